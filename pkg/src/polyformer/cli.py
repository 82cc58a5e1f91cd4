"""Command-line entry point: ``polyformer <subcommand> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure,
4 freeze-ledger violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .ablation import ablation_suite
from .core import AdaptFlags
from .engine.tensor import ContractError, NumericError
from .errors import ConfigError, FormatError, LedgerViolation, LifecycleError
from .metrics import evaluate
from .nn import CheckpointMismatchError
from .synth import (DomainSpec, default_source_spec, default_target_spec, few_shot_split, generate_dataset,
                    read_manifest, write_dataset)
from .train.checkpoint import config_digest, load_checkpoint, save_checkpoint
from .train.phases import PhaseConfig, adapt_phase_c, model_from_checkpoint, train_phase_a, train_phase_b

log = logging.getLogger("polyformer")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_LEDGER = 0, 2, 3, 4

# flat config keys grouped by the nested PhaseConfig section that owns them
_SECTIONS = {
    "optim": ("lr", "beta1", "beta2", "eps", "weight_decay"),
    "flags": ("use_sup", "use_adv", "adv_mode", "k_scope", "bn_mode"),
    "unet": ("depth", "base_channels", "in_channels", "num_classes"),
    "poly": ("dim", "num_prototypes", "num_modes", "ffn_hidden"),
}
_TOP = ("steps", "batch_size", "shots", "seed", "split_seed", "lam")


def flat_to_phase_config(flat: dict, phase: str) -> PhaseConfig:
    """Build a PhaseConfig from flat keys such as ``lr`` or ``num_prototypes``."""
    nested = {"phase": phase}
    owner = {k: sec for sec, keys in _SECTIONS.items() for k in keys}
    for key, val in flat.items():
        if key in _TOP:
            nested[key] = val
        elif key in owner:
            nested.setdefault(owner[key], {})[key] = val
        elif key != "phase":
            raise ConfigError(f"unknown config key {key!r}")
    if "poly" not in nested or "dim" not in nested["poly"]:
        # polyformer width follows the backbone unless set explicitly
        width = nested.get("unet", {}).get("base_channels")
        if width is not None:
            nested.setdefault("poly", {})["dim"] = width
    return PhaseConfig.from_dict(nested)


def load_flat_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
        raise ConfigError(f"config {path} must be a flat JSON object")
    return data


def _phase_config(args, phase: str, **overrides) -> PhaseConfig:
    flat = load_flat_config(args.config)
    for key in ("steps", "seed", "batch_size"):
        val = getattr(args, key, None)
        if val is not None:
            flat[key] = val
    flat.update({k: v for k, v in overrides.items() if v is not None})
    return flat_to_phase_config(flat, phase)


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load_samples(path: str):
    try:
        return read_manifest(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"no dataset manifest at {path}") from exc


# subcommands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    base = default_target_spec() if args.domain == "target" else default_source_spec()
    overrides = load_flat_config(args.config)
    try:
        spec = DomainSpec.from_dict({**base.to_dict(), **overrides})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid domain spec: {exc}") from exc
    manifest = write_dataset(generate_dataset(spec, args.count), args.out, spec)
    _emit({"manifest": manifest, "count": args.count, "config_digest": config_digest(spec.to_dict())})
    return EXIT_OK


def cmd_train_source(args) -> int:
    cfg = _phase_config(args, "A")
    ckpt = train_phase_a(_load_samples(args.data), cfg, log_path=args.log)
    save_checkpoint(args.out, ckpt)
    _emit({"checkpoint": args.out, "phase": "A", "config_digest": cfg.digest()})
    return EXIT_OK


def cmd_train_poly(args) -> int:
    cfg = _phase_config(args, "B")
    ckpt = train_phase_b(load_checkpoint(args.ckpt), _load_samples(args.data), cfg, log_path=args.log)
    save_checkpoint(args.out, ckpt)
    _emit({"checkpoint": args.out, "phase": "B", "config_digest": cfg.digest()})
    return EXIT_OK


def _adapt_flags(args, base: AdaptFlags) -> AdaptFlags:
    kw = {}
    if args.sup is not None:
        kw["use_sup"] = args.sup
    if args.adv is not None:
        kw["use_adv"] = args.adv != "off"
        if args.adv != "off":
            kw["adv_mode"] = args.adv
    if args.scope is not None:
        kw["k_scope"] = {"k": "k_only", "all": "all_weights"}[args.scope]
    if args.bn is not None:
        kw["bn_mode"] = {"full": "full", "stats-only": "stats_only"}[args.bn]
    return replace(base, **kw)


def cmd_adapt(args) -> int:
    cfg = _phase_config(args, "C", shots=args.shots, lam=args.lam, split_seed=args.split_seed)
    cfg = replace(cfg, flags=_adapt_flags(args, cfg.flags))
    cfg.flags.row()
    shots, _ = few_shot_split(_load_samples(args.target), cfg.shots, cfg.split_seed)
    source = _load_samples(args.source) if cfg.flags.use_adv else []
    ckpt = adapt_phase_c(load_checkpoint(args.ckpt), shots, source, cfg, log_path=args.log)
    save_checkpoint(args.out, ckpt)
    _emit({"checkpoint": args.out, "phase": "C", "row": ckpt.metadata["row"],
           "shot_ids": [s.id for s in shots], "config_digest": cfg.digest()})
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    samples = _load_samples(args.data)
    if args.holdout_shots:
        _, samples = few_shot_split(samples, args.holdout_shots, args.split_seed)
    domain = args.domain
    if domain is None:
        domain = "target" if ckpt.metadata.get("lifecycle", {}).get("target_keys_ready") else "source"
    report = evaluate(model_from_checkpoint(ckpt), samples, domain, ckpt.metadata.get("config_digest", ""))
    out = report.to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=1, sort_keys=True))
    _emit(out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _phase_config(args, "C")
    table = ablation_suite(load_checkpoint(args.ckpt), _load_samples(args.target), _load_samples(args.source),
                           shots=args.shots, seeds=args.seeds, base_cfg=cfg, strict=False)
    print(table.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(table.to_json())
        (out / "ablation.csv").write_text(table.to_csv())
    bad = [r.name for r in table.rows if not r.ledger_ok]
    if bad:
        raise LedgerViolation(f"ledger mismatch in rows: {', '.join(bad)}")
    return EXIT_OK


# parser ---------------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="flat JSON config mirroring PhaseConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--log", help="append per-step JSON lines here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polyformer", description="Few-shot domain adaptation with a polyformer layer.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--domain", choices=("source", "target"), default="source")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat JSON overriding DomainSpec fields")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-source", help="phase A: train the backbone")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("train-poly", help="phase B: train an inserted polyformer")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_train_poly)

    p = sub.add_parser("adapt", help="phase C: few-shot target adaptation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--source", help="source dataset (needed for the adversarial term)")
    p.add_argument("--out", required=True)
    p.add_argument("--shots", type=int)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--sup", dest="sup", action="store_true", default=None)
    p.add_argument("--no-sup", dest="sup", action="store_false")
    p.add_argument("--adv", choices=("off", "features", "masks"))
    p.add_argument("--scope", choices=("k", "all"))
    p.add_argument("--bn", choices=("full", "stats-only"))
    p.add_argument("--lambda", dest="lam", type=float)
    _common(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="dice report for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", choices=("source", "target"))
    p.add_argument("--holdout-shots", dest="holdout_shots", type=int, default=0,
                   help="drop the k-shot split used for adaptation before scoring")
    p.add_argument("--split-seed", dest="split_seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="all six adaptation settings plus the unadapted baseline")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError, LifecycleError, FormatError, CheckpointMismatchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LedgerViolation as exc:
        print(f"ledger violation: {exc}", file=sys.stderr)
        return EXIT_LEDGER


if __name__ == "__main__":
    sys.exit(main())
