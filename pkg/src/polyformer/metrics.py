"""Dice evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Sequence

import numpy as np

from .engine.tensor import ContractError, DimensionError, Tensor, no_grad
from .nn import set_bn_mode
from .synth import CLASS_NAMES, stack
from .unet import predict_mask


def dice_score(pred_mask: np.ndarray, gt_mask: np.ndarray, class_id: int) -> float:
    """2|A n B| / (|A| + |B|) on the binary masks of ``class_id``.

    Both empty scores 1, exactly one empty scores 0.
    """
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise DimensionError(f"dice_score: shapes {pred_mask.shape} and {gt_mask.shape} differ")
    a = pred_mask == class_id
    b = gt_mask == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


@dataclass
class EvalReport:
    per_class: Dict[str, float]
    mean: float
    count: int
    config_digest: str = ""
    domain: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def report_from_masks(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], class_ids=(1, 2),
                      config_digest: str = "", domain: str = "") -> EvalReport:
    if len(gts) == 0:
        raise ContractError("evaluate: empty dataset")
    per_class = {CLASS_NAMES[c]: float(np.mean([dice_score(p, g, c) for p, g in zip(preds, gts)]))
                 for c in class_ids}
    return EvalReport(per_class, float(np.mean(list(per_class.values()))), len(gts), config_digest, domain)


def predict(model, samples, domain: str = "source", batch_size: int = 4) -> list:
    """Hard masks for ``samples`` with BatchNorms in eval mode."""
    set_bn_mode(model, "eval")
    preds = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            x, _ = stack(samples[i:i + batch_size])
            preds.extend(predict_mask(model(Tensor(x), domain)))
    return preds


def evaluate(model, dataset, domain: str = "source", config_digest: str = "") -> EvalReport:
    """Per-class dice (disc, cup) averaged over samples, plus their mean."""
    if len(dataset) == 0:
        raise ContractError("evaluate: empty dataset")
    preds = predict(model, dataset, domain)
    return report_from_masks(preds, [s.mask for s in dataset], config_digest=config_digest, domain=domain)
