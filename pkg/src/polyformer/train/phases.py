"""The three training phases and the freeze ledger.

Phase A trains the backbone on source data, phase B trains an inserted
polyformer with the backbone frozen, phase C adapts to a few annotated target
images by updating only the target key projections and backbone BatchNorms
(or one of the ablated variants).
"""

from __future__ import annotations

import contextlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..adversarial import Discriminator, adv_loss, build_discriminator
from ..core import (AdaptFlags, Pipeline, PolyformerConfig, configure_phase, init_target_keys,
                    insert_polyformer)
from ..engine import ops
from ..engine.rng import rng_for
from ..engine.tensor import NumericError, Tensor, backward, current_tape, no_grad
from ..errors import ConfigError, LedgerViolation
from ..metrics import dice_score
from ..nn import batchnorms
from ..synth import Sample, stack
from ..unet import UNetConfig, build_unet, predict_mask
from .checkpoint import Checkpoint, config_digest
from .losses import composite_loss
from .optim import AdamW, AdamWConfig

log = logging.getLogger(__name__)

DEFAULT_STEPS = {"A": 300, "B": 300, "C": 150}


@dataclass(frozen=True)
class PhaseConfig:
    phase: str = "A"
    steps: Optional[int] = None
    batch_size: int = 4
    optim: AdamWConfig = AdamWConfig()
    flags: AdaptFlags = AdaptFlags()
    shots: int = 5
    seed: int = 0
    split_seed: int = 0
    lam: float = 1.0
    unet: UNetConfig = UNetConfig()
    poly: PolyformerConfig = PolyformerConfig()

    def __post_init__(self):
        if self.phase not in DEFAULT_STEPS:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.phase == "C":
            self.flags.row()
        if self.poly.dim != self.unet.feature_dim:
            raise ConfigError(f"polyformer width {self.poly.dim} != backbone feature width {self.unet.feature_dim}")

    @property
    def num_steps(self) -> int:
        return DEFAULT_STEPS[self.phase] if self.steps is None else self.steps

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "optim" in d:
                d["optim"] = AdamWConfig(**d["optim"])
            if "flags" in d:
                d["flags"] = AdaptFlags(**d["flags"])
            if "unet" in d:
                d["unet"] = UNetConfig(**d["unet"])
            if "poly" in d:
                d["poly"] = PolyformerConfig(**d["poly"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def digest(self) -> str:
        return config_digest(self.to_dict())


# model <-> checkpoint ------------------------------------------------------------

def model_from_checkpoint(ckpt: Checkpoint) -> Pipeline:
    """Rebuild the pipeline described by the checkpoint and load its weights."""
    arch = ckpt.metadata.get("arch", {})
    backbone = build_unet(UNetConfig(**arch["unet"]))
    if arch.get("poly"):
        model = insert_polyformer(backbone, PolyformerConfig(**arch["poly"]))
    else:
        model = Pipeline(backbone)
    model.load_state_dict(ckpt.model_state())
    model.set_lifecycle(ckpt.metadata.get("lifecycle", {}))
    return model


def model_checkpoint(model: Pipeline, metadata: dict, extra: Optional[Dict[str, np.ndarray]] = None) -> Checkpoint:
    tensors = {k: np.array(v, copy=True) for k, v in model.state_dict().items()}
    if extra:
        tensors.update(extra)
    meta = dict(metadata)
    meta["arch"] = {"unet": model.backbone.cfg.to_dict(),
                    "poly": model.poly.cfg.to_dict() if model.poly is not None else None}
    meta["lifecycle"] = model.lifecycle()
    return Checkpoint(tensors, meta)


# freeze ledger ------------------------------------------------------------------------

def snapshot(model) -> Dict[str, bytes]:
    return {k: np.asarray(v).tobytes() for k, v in model.state_dict().items()}


def changed_names(before: Dict[str, bytes], model) -> List[str]:
    after = snapshot(model)
    return sorted(k for k in before if before[k] != after.get(k))


def allowed_changes(model: Pipeline, phase: str, trainable: Sequence[str]) -> set:
    allowed = set(trainable)
    if phase == "A":
        allowed |= {k for k in model.state_dict() if k.startswith("backbone.")}
    elif phase == "C":
        allowed |= {k for k in model.state_dict()
                    if k.startswith("backbone.") and k.endswith((".running_mean", ".running_var"))}
    return allowed


def check_ledger(changed: Sequence[str], allowed: set, phase: str) -> None:
    bad = sorted(set(changed) - allowed)
    if bad:
        raise LedgerViolation(f"phase {phase}: parameters outside the permitted set changed: {', '.join(bad)}")


@contextlib.contextmanager
def held_running_stats(module):
    """Batch-statistics normalisation without touching running statistics."""
    bns = batchnorms(module)
    prev = [bn.hold_stats for bn in bns]
    for bn in bns:
        bn.hold_stats = True
    try:
        yield
    finally:
        for bn, p in zip(bns, prev):
            bn.hold_stats = p


def batch_dice(logits: Tensor, mask: np.ndarray, num_classes: int) -> float:
    pred = predict_mask(logits)
    return float(np.mean([dice_score(p, g, c) for p, g in zip(pred, mask) for c in range(1, num_classes)]))


# runner ---------------------------------------------------------------------------------

class PhaseRunner:
    """Owns the model, optimizer(s) and step counter for one phase.

    Batches are drawn from streams keyed by (seed, phase, step), so a runner
    restored from a checkpoint continues exactly where the original stopped.
    """

    def __init__(self, model: Pipeline, cfg: PhaseConfig, source: Sequence[Sample] = (),
                 shots: Sequence[Sample] = (), disc: Optional[Discriminator] = None,
                 on_step: Optional[Callable[[dict], None]] = None):
        self.model = model
        self.cfg = cfg
        self.on_step = on_step
        self.step_index = 0
        self.history: List[dict] = []
        self.params = configure_phase(model, cfg.phase, cfg.flags if cfg.phase == "C" else None)
        self.opt = AdamW(self.params.items(), cfg.optim)
        self.disc = None
        self.disc_opt = None
        if len(source):
            self.src_x, self.src_y = stack(source)
        else:
            self.src_x = self.src_y = None
        if cfg.phase in ("A", "B") and self.src_x is None:
            raise ConfigError(f"phase {cfg.phase} needs source data")
        if cfg.phase == "B":
            self.src_f = self._feature_cache()
        if cfg.phase == "C":
            if not len(shots):
                raise ConfigError("phase C needs target shots")
            self.tgt_x, self.tgt_y = stack(shots)
            if cfg.flags.use_adv:
                if self.src_x is None:
                    raise ConfigError("adversarial adaptation needs source data")
                in_ch = model.backbone.cfg.num_classes if cfg.flags.adv_mode == "masks" else model.poly.cfg.dim
                self.disc = disc or build_discriminator(in_ch, cfg.lam, seed=cfg.seed)
                self.disc_opt = AdamW(self.disc.named_parameters(), cfg.optim)

    def _feature_cache(self) -> np.ndarray:
        # backbone is frozen in eval mode during phase B, so its features are fixed
        bs = self.cfg.batch_size
        with no_grad():
            chunks = [self.model.features(Tensor(self.src_x[i:i + bs])).data
                      for i in range(0, len(self.src_x), bs)]
        return np.concatenate(chunks)

    def _indices(self, n: int, label: str) -> np.ndarray:
        rng = rng_for(self.cfg.seed, "batch", self.cfg.phase, label, self.step_index)
        return rng.choice(n, size=min(self.cfg.batch_size, n), replace=False)

    def _modes(self) -> None:
        configure_phase(self.model, self.cfg.phase, self.cfg.flags if self.cfg.phase == "C" else None)
        if self.disc is not None:
            for bn in batchnorms(self.disc):
                bn.set_mode("train")

    def step(self) -> dict:
        self._modes()
        current_tape().reset()
        phase = self.cfg.phase
        ncls = self.model.backbone.cfg.num_classes
        rec = {"step": self.step_index + 1, "phase": phase}
        if phase == "A":
            idx = self._indices(len(self.src_x), "source")
            logits = self.model(Tensor(self.src_x[idx]))
            y = self.src_y[idx]
            total = rec_loss = composite_loss(logits, y)
            rec["sup"] = rec_loss.item()
        elif phase == "B":
            idx = self._indices(len(self.src_f), "source")
            logits = self.model.head(Tensor(self.src_f[idx]), "source")
            y = self.src_y[idx]
            total = composite_loss(logits, y)
            rec["sup"] = total.item()
        else:
            total, logits, y = self._adapt_loss(rec)
        value = total.item()
        if not np.isfinite(value):
            raise NumericError(f"phase {phase}: non-finite loss at step {self.step_index + 1}")
        rec["loss"] = value
        rec["dice"] = batch_dice(logits, y, ncls)
        backward(total)
        self.opt.step()
        self.opt.zero_grad()
        if self.disc_opt is not None:
            self.disc_opt.step()
            self.disc_opt.zero_grad()
        self.step_index += 1
        self.history.append(rec)
        if self.on_step is not None:
            self.on_step(rec)
        return rec

    def _adapt_loss(self, rec: dict):
        fl = self.cfg.flags
        model = self.model
        idx = self._indices(len(self.tgt_x), "target")
        y = self.tgt_y[idx]
        feats = model.poly(model.features(Tensor(self.tgt_x[idx])), "target")
        logits = model.backbone.m2(feats)
        total = None
        if fl.use_sup:
            total = composite_loss(logits, y)
            rec["sup"] = total.item()
        if fl.use_adv:
            src_in, tgt_in = self._adv_inputs(feats, logits)
            adv = adv_loss(self.disc, src_in, tgt_in, fl.adv_mode)
            rec["adv"] = adv.item()
            total = adv if total is None else ops.add(total, adv)
        return total, logits, y

    def _adv_inputs(self, feats: Tensor, logits: Tensor):
        model = self.model
        sidx = self._indices(len(self.src_x), "source")
        with no_grad(), held_running_stats(model.backbone):
            src = model.poly(model.features(Tensor(self.src_x[sidx])), "source")
            if self.cfg.flags.adv_mode == "masks":
                src = ops.softmax(model.backbone.m2(src), axis=1)
        tgt = ops.softmax(logits, axis=1) if self.cfg.flags.adv_mode == "masks" else feats
        return src, tgt

    def run(self, steps: Optional[int] = None) -> List[dict]:
        stop = self.cfg.num_steps if steps is None else self.step_index + steps
        while self.step_index < stop:
            self.step()
        return self.history

    # persistence

    def checkpoint(self, extra_meta: Optional[dict] = None) -> Checkpoint:
        meta = {"phase": self.cfg.phase, "step": self.step_index, "config": self.cfg.to_dict(),
                "config_digest": self.cfg.digest(),
                "rng": {"seed": self.cfg.seed, "counter": self.step_index},
                "optimizer": {"step": self.opt.state.step}}
        if extra_meta:
            meta.update(extra_meta)
        extra = self.opt.state_tensors("train/opt/")
        if self.disc is not None:
            extra.update({f"train/disc/{k}": np.array(v, copy=True) for k, v in self.disc.state_dict().items()})
            extra.update(self.disc_opt.state_tensors("train/disc_opt/"))
            meta["optimizer"]["disc_step"] = self.disc_opt.state.step
        return model_checkpoint(self.model, meta, extra)

    @classmethod
    def resume(cls, ckpt: Checkpoint, source: Sequence[Sample] = (), shots: Sequence[Sample] = (),
               on_step=None) -> "PhaseRunner":
        cfg = PhaseConfig.from_dict(ckpt.metadata["config"])
        model = model_from_checkpoint(ckpt)
        train = ckpt.train_state()
        disc = None
        if cfg.phase == "C" and cfg.flags.use_adv:
            in_ch = model.backbone.cfg.num_classes if cfg.flags.adv_mode == "masks" else model.poly.cfg.dim
            disc = build_discriminator(in_ch, cfg.lam, seed=cfg.seed)
            disc.load_state_dict({k[len("disc/"):]: v for k, v in train.items() if k.startswith("disc/")})
        runner = cls(model, cfg, source, shots, disc=disc, on_step=on_step)
        runner.step_index = int(ckpt.metadata["step"])
        runner.opt.load_state_tensors(train, "opt/", ckpt.metadata["optimizer"]["step"])
        if runner.disc_opt is not None:
            runner.disc_opt.load_state_tensors(train, "disc_opt/", ckpt.metadata["optimizer"]["disc_step"])
        return runner


def _jsonl_writer(path):
    if path is None:
        return None, None
    fh = open(path, "a")

    def write(rec):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()

    return write, fh


def _run_phase(runner: PhaseRunner, before: Dict[str, bytes], log_path=None) -> None:
    write, fh = _jsonl_writer(log_path)
    prev = runner.on_step
    runner.on_step = write or prev
    try:
        runner.run()
    finally:
        runner.on_step = prev
        if fh is not None:
            fh.close()
    check_ledger(changed_names(before, runner.model),
                 allowed_changes(runner.model, runner.cfg.phase, runner.params.names()), runner.cfg.phase)


def train_phase_a(source_ds: Sequence[Sample], cfg: PhaseConfig, log_path=None) -> Checkpoint:
    """Train the backbone from scratch on source data."""
    if cfg.phase != "A":
        cfg = replace(cfg, phase="A")
    model = Pipeline(build_unet(cfg.unet, cfg.seed))
    runner = PhaseRunner(model, cfg, source_ds)
    _run_phase(runner, snapshot(model), log_path)
    return runner.checkpoint()


def start_phase_b(backbone_ckpt: Checkpoint, source_ds: Sequence[Sample], cfg: PhaseConfig) -> PhaseRunner:
    """Insert a fresh polyformer (zero output projection) into a trained backbone."""
    backbone = model_from_checkpoint(backbone_ckpt).backbone
    model = insert_polyformer(backbone, cfg.poly, seed=cfg.seed)
    return PhaseRunner(model, cfg, source_ds)


def train_phase_b(backbone_ckpt: Checkpoint, source_ds: Sequence[Sample], cfg: PhaseConfig,
                  log_path=None) -> Checkpoint:
    """Train only the polyformer on source data; the backbone stays bit-identical."""
    if cfg.phase != "B":
        cfg = replace(cfg, phase="B")
    runner = start_phase_b(backbone_ckpt, source_ds, cfg)
    _run_phase(runner, snapshot(runner.model), log_path)
    runner.model.poly.source_trained = True
    return runner.checkpoint()


def start_phase_c(poly_ckpt: Checkpoint, target_shots: Sequence[Sample], source_ds: Sequence[Sample],
                  cfg: PhaseConfig) -> PhaseRunner:
    model = model_from_checkpoint(poly_ckpt)
    if model.poly is None:
        raise ConfigError("phase C needs a checkpoint with a polyformer")
    init_target_keys(model.poly)
    return PhaseRunner(model, cfg, source_ds if cfg.flags.use_adv else (), target_shots)


def adapt_phase_c(poly_ckpt: Checkpoint, target_shots: Sequence[Sample], source_ds: Sequence[Sample],
                  cfg: PhaseConfig, log_path=None) -> Checkpoint:
    """Few-shot target adaptation under the given ablation flags."""
    if cfg.phase != "C":
        cfg = replace(cfg, phase="C")
    runner = start_phase_c(poly_ckpt, target_shots, source_ds, cfg)
    before = snapshot(runner.model)
    _run_phase(runner, before, log_path)
    meta = {"row": cfg.flags.row(), "changed": changed_names(before, runner.model)}
    return runner.checkpoint(meta)
