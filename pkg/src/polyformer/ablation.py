"""Six-row adaptation ablation from a single source-trained polyformer checkpoint."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import ABLATION_ROWS, AdaptFlags, trainable_params
from .errors import LedgerViolation
from .metrics import EvalReport, evaluate
from .synth import Sample, few_shot_split
from .train.checkpoint import Checkpoint
from .train.phases import PhaseConfig, adapt_phase_c, model_from_checkpoint

log = logging.getLogger(__name__)

UNADAPTED = "Unadapted"
STANDARD = "L_sup+L_adv+K (standard)"
SUP_K = "L_sup+K"


def _is_stat(name: str) -> bool:
    return name.endswith((".running_mean", ".running_var"))


def _is_affine(name: str) -> bool:
    return name.startswith("backbone.") and name.endswith((".bn.gamma", ".bn.beta"))


def row_ledger_problems(flags: AdaptFlags, changed: Sequence[str], poly_ckpt: Checkpoint) -> List[str]:
    """Differences between a row's changed parameters and what its flags permit.

    Key-only rows must change exactly the target keys plus (depending on the
    BatchNorm mode) the affine parameters and running statistics. The
    all-weights row may change any polyformer weight except the source keys.
    """
    model = model_from_checkpoint(poly_ckpt)
    trainable = set(trainable_params(model, "C", flags))
    stats = {n for n in model.state_dict() if n.startswith("backbone.") and _is_stat(n)}
    keys = {n for n in trainable if n.endswith(".K_target")}
    changed = set(changed)
    problems = [f"unexpected change: {n}" for n in sorted(changed - trainable - stats)]
    problems += [f"target key unchanged: {n}" for n in sorted(keys - changed)]
    problems += [f"running stat unchanged: {n}" for n in sorted(stats - changed)]
    if flags.k_scope == "k_only":
        problems += [f"trainable parameter unchanged: {n}" for n in sorted(trainable - changed)]
    if flags.bn_mode == "stats_only":
        problems += [f"affine parameter changed: {n}" for n in sorted(changed) if _is_affine(n)]
    return problems


@dataclass
class AblationRow:
    name: str
    reports: List[EvalReport]
    changed: List[List[str]] = field(default_factory=list)
    ledger_ok: bool = True

    @property
    def mean(self) -> float:
        return float(np.mean([r.mean for r in self.reports]))

    def per_class(self, cls: str) -> float:
        return float(np.mean([r.per_class[cls] for r in self.reports]))


@dataclass
class AblationTable:
    rows: List[AblationRow]
    seeds: List[int]
    shots: int
    config_digest: str = ""

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def ordering(self) -> List[str]:
        """Row names from best to worst mean dice (stable for ties)."""
        return [r.name for r in sorted(self.rows, key=lambda r: -r.mean)]

    def records(self) -> List[dict]:
        return [{"row": r.name, "disc": r.per_class("disc"), "cup": r.per_class("cup"), "mean": r.mean,
                 "per_seed": [rep.mean for rep in r.reports], "ledger_ok": r.ledger_ok} for r in self.rows]

    def to_json(self) -> str:
        return json.dumps({"rows": self.records(), "seeds": self.seeds, "shots": self.shots,
                           "ordering": self.ordering(), "config_digest": self.config_digest},
                          indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["row", "disc", "cup", "mean", "ledger_ok"])
        for rec in self.records():
            writer.writerow([rec["row"], f"{rec['disc']:.4f}", f"{rec['cup']:.4f}", f"{rec['mean']:.4f}",
                             rec["ledger_ok"]])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(len(r.name) for r in self.rows)
        lines = [f"{'Setting':<{width}}  {'disc':>6}  {'cup':>6}  {'mean':>6}  ledger"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.per_class('disc'):6.3f}  {r.per_class('cup'):6.3f}  "
                         f"{r.mean:6.3f}  {'ok' if r.ledger_ok else 'FAIL'}")
        return "\n".join(lines)


def run_row(poly_ckpt: Checkpoint, name: str, shots: Sequence[Sample], held_out: Sequence[Sample],
            source: Sequence[Sample], cfg: PhaseConfig):
    """Adapt and evaluate one ablation row; returns (report, changed names, ledger problems)."""
    flags = ABLATION_ROWS[name]
    row_cfg = replace(cfg, phase="C", flags=flags)
    ckpt = adapt_phase_c(poly_ckpt, shots, source, row_cfg)
    changed = ckpt.metadata["changed"]
    report = evaluate(model_from_checkpoint(ckpt), held_out, "target", row_cfg.digest())
    return report, changed, row_ledger_problems(flags, changed, poly_ckpt)


def ablation_suite(poly_ckpt: Checkpoint, target: Sequence[Sample], source: Sequence[Sample],
                   shots: int = 5, seeds: Sequence[int] = (0,), base_cfg: Optional[PhaseConfig] = None,
                   rows: Optional[Sequence[str]] = None, strict: bool = True) -> AblationTable:
    """Run every ablation row (and the unadapted baseline) for each seed.

    The seed picks both the few-shot split and the training streams, so all
    rows of a seed share one split. With ``strict`` a ledger mismatch raises
    :class:`LedgerViolation` after the row has been recorded and logged.
    """
    base_cfg = base_cfg or PhaseConfig(phase="C")
    names = list(rows) if rows is not None else list(ABLATION_ROWS)
    table_rows: Dict[str, AblationRow] = {UNADAPTED: AblationRow(UNADAPTED, [])}
    table_rows.update({n: AblationRow(n, []) for n in names})
    unadapted = model_from_checkpoint(poly_ckpt)
    failures = []
    for seed in seeds:
        cfg = replace(base_cfg, phase="C", seed=seed, split_seed=seed, shots=shots)
        few, held_out = few_shot_split(target, shots, seed)
        table_rows[UNADAPTED].reports.append(evaluate(unadapted, held_out, "source", poly_ckpt.metadata.get(
            "config_digest", "")))
        for name in names:
            report, changed, problems = run_row(poly_ckpt, name, few, held_out, source, cfg)
            row = table_rows[name]
            row.reports.append(report)
            row.changed.append(changed)
            if problems:
                row.ledger_ok = False
                failures.append(f"{name} (seed {seed}): " + "; ".join(problems))
                log.error("ledger mismatch in %s seed %d: %s", name, seed, problems)
            log.info("seed %d %s: mean dice %.4f", seed, name, report.mean)
    table = AblationTable(list(table_rows.values()), list(seeds), shots, base_cfg.digest())
    log.info("ordering by mean dice: %s", " > ".join(table.ordering()))
    if STANDARD in table_rows and SUP_K in table_rows:
        std, sup = table.row(STANDARD).mean, table.row(SUP_K).mean
        log.info("standard %.4f vs %s %.4f (difference %+.4f)", std, SUP_K, sup, std - sup)
    if strict and failures:
        raise LedgerViolation("ablation ledger mismatch: " + " | ".join(failures))
    return table
