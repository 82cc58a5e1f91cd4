"""The polymorphic transformer layer.

A bank of M prototypes first attends over the N spatial feature tokens
(squeeze), the transformed prototypes are then read back by every token
(expand) and added to the original features. Adapting to a new domain swaps
the squeeze step's key projections for a trainable copy.
"""

from __future__ import annotations

import fnmatch
import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional

import numpy as np

from .engine import ops
from .engine.tensor import DimensionError, Tensor, make_result
from .errors import ConfigError, LifecycleError
from .nn import FeedForward, LayerNorm, Module, Parameter, batchnorms, set_bn_mode
from .unet import SplitModel

DOMAINS = ("source", "target")


class EmptyInputError(DimensionError):
    """Attention over zero feature tokens."""


@dataclass(frozen=True)
class PolyformerConfig:
    dim: int = 8
    num_prototypes: int = 16
    num_modes: int = 2
    ffn_hidden: int = 32

    def __post_init__(self):
        if self.num_prototypes < 1 or self.num_modes < 1 or self.dim < 1:
            raise ConfigError(f"invalid polyformer config {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def select(x: Tensor, i: int) -> Tensor:
    """x[i] along the first axis."""
    src_shape, dtype = x.shape, x.dtype

    def bw(g, needs):
        full = np.zeros(src_shape, dtype=dtype)
        full[i] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[i]), (x,), bw, "select")


def _mix(parts: List[Tensor], gate: Tensor) -> Tensor:
    """Gate-weighted sum of same-shaped tensors (gate already softmaxed)."""
    shape = parts[0].shape
    n = int(np.prod(shape))
    stacked = ops.concat([p.reshape(1, n) for p in parts], axis=0)
    return ops.matmul(gate.reshape(1, len(parts)), stacked).reshape(shape)


class SqueezeMode(Module):
    def __init__(self, dim: int):
        rule = ("xavier", dim, dim)
        self.Q = Parameter((dim, dim), rule, decay=True)
        self.K_source = Parameter((dim, dim), rule, decay=True)
        self.K_target = Parameter((dim, dim), rule, decay=True)
        self.V = Parameter((dim, dim), rule, decay=True)


class ExpandMode(Module):
    def __init__(self, dim: int):
        rule = ("xavier", dim, dim)
        self.Q = Parameter((dim, dim), rule, decay=True)
        self.K = Parameter((dim, dim), rule, decay=True)
        self.V = Parameter((dim, dim), rule, decay=True)


class SqueezeTransformer(Module):
    """Transformer 1: prototypes aggregate the feature tokens.

    Per mode the N x M attention weight is normalised over the feature axis,
    so each prototype receives a convex mix of projected features.
    """

    def __init__(self, cfg: PolyformerConfig):
        D = cfg.dim
        self.mode = [SqueezeMode(D) for _ in range(cfg.num_modes)]
        self.gate = Parameter((cfg.num_modes,))
        self.W_O = Parameter((D, D), ("xavier", D, D), decay=True)
        self.ln1 = LayerNorm(D)
        self.ffn = FeedForward(D, cfg.ffn_hidden, "gelu")
        self.ln2 = LayerNorm(D)
        self.dim = D
        self.target_keys_ready = False

    def keys(self, mode: SqueezeMode, domain: str) -> Parameter:
        if domain == "source":
            return mode.K_source
        if domain == "target":
            if not self.target_keys_ready:
                raise LifecycleError("target keys used before init_target_keys")
            return mode.K_target
        raise ConfigError(f"unknown domain {domain!r}")

    def attention(self, f: Tensor, C: Tensor, domain: str) -> List[Tensor]:
        """Per-mode attention weights, each N x M with columns summing to 1."""
        scale = 1.0 / math.sqrt(self.dim)
        out = []
        for mode in self.mode:
            kf = ops.matmul(f, self.keys(mode, domain))
            qc = ops.matmul(C, mode.Q)
            out.append(ops.softmax(ops.scale(ops.matmul(kf, ops.transpose(qc)), scale), axis=0))
        return out

    def forward(self, f: Tensor, C: Tensor, domain: str = "source") -> Tensor:
        _check_tokens(f, C, self.dim)
        fused = [ops.matmul(ops.transpose(A), ops.matmul(f, mode.V))
                 for A, mode in zip(self.attention(f, C, domain), self.mode)]
        mixed = _mix(fused, ops.softmax(self.gate, axis=0))
        h = self.ln1(ops.add(C, ops.matmul(mixed, self.W_O)))
        return self.ln2(ops.add(h, self.ffn(h)))


class ExpandTransformer(Module):
    """Transformer 2: every feature token reads back from the squeezed prototypes.

    W_O is the final op, so a zero W_O makes the whole layer an identity via
    the outer residual.
    """

    def __init__(self, cfg: PolyformerConfig):
        D = cfg.dim
        self.mode = [ExpandMode(D) for _ in range(cfg.num_modes)]
        self.gate = Parameter((cfg.num_modes,))
        self.ln = LayerNorm(D)
        self.ffn = FeedForward(D, cfg.ffn_hidden, "gelu")
        self.W_O = Parameter((D, D), ("zeros",), decay=True)
        self.dim = D

    def attention(self, C_sq: Tensor, f: Tensor) -> List[Tensor]:
        """Per-mode attention weights, each N x M with rows summing to 1."""
        scale = 1.0 / math.sqrt(self.dim)
        out = []
        for mode in self.mode:
            qf = ops.matmul(f, mode.Q)
            kc = ops.matmul(C_sq, mode.K)
            out.append(ops.softmax(ops.scale(ops.matmul(qf, ops.transpose(kc)), scale), axis=1))
        return out

    def forward(self, C_sq: Tensor, f: Tensor) -> Tensor:
        _check_tokens(f, C_sq, self.dim)
        fused = [ops.matmul(A, ops.matmul(C_sq, mode.V))
                 for A, mode in zip(self.attention(C_sq, f), self.mode)]
        h = _mix(fused, ops.softmax(self.gate, axis=0))
        h = ops.add(h, self.ffn(self.ln(h)))
        return ops.add(ops.matmul(h, self.W_O), f)


def _check_tokens(f: Tensor, C: Tensor, dim: int) -> None:
    if f.ndim != 2 or C.ndim != 2:
        raise DimensionError(f"polyformer expects token matrices, got {f.shape} and {C.shape}")
    if f.shape[1] != dim or C.shape[1] != dim:
        raise DimensionError(f"polyformer width {dim}: got features {f.shape}, prototypes {C.shape}")
    if f.shape[0] == 0:
        raise EmptyInputError("polyformer: no feature tokens")


class PolyformerLayer(Module):
    def __init__(self, cfg: Optional[PolyformerConfig] = None):
        cfg = cfg or PolyformerConfig()
        self.cfg = cfg
        self.prototypes = Parameter((cfg.num_prototypes, cfg.dim), ("normal", 1.0 / math.sqrt(cfg.dim)))
        self.t1 = SqueezeTransformer(cfg)
        self.t2 = ExpandTransformer(cfg)
        self.source_trained = False

    @property
    def target_keys_ready(self) -> bool:
        return self.t1.target_keys_ready

    def squeeze(self, f: Tensor, domain: str = "source") -> Tensor:
        return self.t1(f, self.prototypes, domain)

    def expand(self, C_sq: Tensor, f: Tensor) -> Tensor:
        return self.t2(C_sq, f)

    def tokens(self, f: Tensor, domain: str = "source") -> Tensor:
        """N x D tokens in, N x D tokens out."""
        return self.expand(self.squeeze(f, domain), f)

    def forward(self, fmap: Tensor, domain: str = "source") -> Tensor:
        if fmap.ndim != 4 or fmap.shape[1] != self.cfg.dim:
            raise DimensionError(f"polyformer expects B x {self.cfg.dim} x H x W, got {fmap.shape}")
        B, D, H, W = fmap.shape
        seq = ops.permute(fmap, (0, 2, 3, 1)).reshape(B, H * W, D)
        outs = [self.tokens(select(seq, b), domain).reshape(1, H * W, D) for b in range(B)]
        out = outs[0] if B == 1 else ops.concat(outs, axis=0)
        return ops.permute(out.reshape(B, H, W, D), (0, 3, 1, 2))


def squeeze(layer: PolyformerLayer, f: Tensor, C: Optional[Tensor] = None, domain: str = "source") -> Tensor:
    return layer.t1(f, layer.prototypes if C is None else C, domain)


def expand(layer: PolyformerLayer, C_sq: Tensor, f: Tensor) -> Tensor:
    return layer.t2(C_sq, f)


def polyformer_forward(layer: PolyformerLayer, fmap: Tensor, domain: str = "source") -> Tensor:
    return layer(fmap, domain)


def init_target_keys(layer: PolyformerLayer) -> None:
    """Copy every Transformer-1 source key projection into its target slot."""
    if not layer.source_trained:
        raise LifecycleError("init_target_keys needs a polyformer trained on the source domain")
    for mode in layer.t1.mode:
        mode.K_target.data = mode.K_source.data.copy()
        mode.K_target.grad = None
    layer.t1.target_keys_ready = True


class Pipeline(Module):
    """Backbone halves with an optional polyformer between them."""

    def __init__(self, backbone: SplitModel, poly: Optional[PolyformerLayer] = None):
        self.backbone = backbone
        self.poly = poly

    def features(self, x: Tensor) -> Tensor:
        return self.backbone.m1(x)

    def head(self, f: Tensor, domain: str = "source") -> Tensor:
        if self.poly is not None:
            f = self.poly(f, domain)
        return self.backbone.m2(f)

    def forward(self, x: Tensor, domain: str = "source") -> Tensor:
        return self.head(self.features(x), domain)

    def lifecycle(self) -> dict:
        if self.poly is None:
            return {}
        return {"source_trained": self.poly.source_trained, "target_keys_ready": self.poly.target_keys_ready}

    def set_lifecycle(self, state: dict) -> None:
        if self.poly is not None and state:
            self.poly.source_trained = bool(state.get("source_trained", False))
            self.poly.t1.target_keys_ready = bool(state.get("target_keys_ready", False))


def insert_polyformer(backbone: SplitModel, cfg: Optional[PolyformerConfig] = None, seed: int = 0) -> Pipeline:
    cfg = cfg or PolyformerConfig(dim=backbone.cfg.feature_dim)
    if cfg.dim != backbone.cfg.feature_dim:
        raise ConfigError(f"polyformer width {cfg.dim} != backbone feature width {backbone.cfg.feature_dim}")
    poly = PolyformerLayer(cfg)
    poly.initialize(seed, prefix="poly.")
    poly.assign_names("poly.")
    return Pipeline(backbone, poly)


# phase-aware trainability -------------------------------------------------------

K_SCOPES = ("k_only", "all_weights")
BN_CHOICES = ("full", "stats_only")
ADV_MODES = ("features", "masks")


@dataclass(frozen=True)
class AdaptFlags:
    use_sup: bool = True
    use_adv: bool = True
    adv_mode: str = "features"
    k_scope: str = "k_only"
    bn_mode: str = "full"

    def row(self) -> str:
        """Name of the ablation row these flags select; ConfigError if none."""
        if self.adv_mode not in ADV_MODES or self.k_scope not in K_SCOPES or self.bn_mode not in BN_CHOICES:
            raise ConfigError(f"unknown adaptation flag value in {self}")
        for name, flags in ABLATION_ROWS.items():
            if _row_key(flags) == _row_key(self):
                return name
        raise ConfigError(f"flag combination {self} matches no supported ablation row")

    def to_dict(self) -> dict:
        return asdict(self)


def _row_key(f: AdaptFlags) -> tuple:
    # adv_mode is irrelevant when the adversarial term is off
    return (f.use_sup, f.use_adv, f.adv_mode if f.use_adv else None, f.k_scope, f.bn_mode)


ABLATION_ROWS: Dict[str, AdaptFlags] = {
    "L_adv+K": AdaptFlags(use_sup=False, use_adv=True),
    "L_sup+K, w/o BN": AdaptFlags(use_adv=False, bn_mode="stats_only"),
    "L_sup+K": AdaptFlags(use_adv=False),
    "L_sup+L_adv+All weights": AdaptFlags(k_scope="all_weights"),
    "L_sup+L_adv(mask)+K": AdaptFlags(adv_mode="masks"),
    "L_sup+L_adv+K (standard)": AdaptFlags(),
}


class ParamSet:
    """Ordered name -> Parameter mapping tagged with which entries are trainable."""

    def __init__(self, params: Dict[str, Parameter], trainable: Iterable[str]):
        self.params = dict(params)
        self.trainable = [n for n in self.params if n in set(trainable)]

    def __iter__(self):
        return iter(self.trainable)

    def __len__(self):
        return len(self.trainable)

    def __contains__(self, name):
        return name in self.trainable

    def names(self) -> List[str]:
        return list(self.trainable)

    def items(self):
        return [(n, self.params[n]) for n in self.trainable]

    def match(self, pattern: str) -> List[str]:
        return [n for n in self.trainable if fnmatch.fnmatchcase(n, pattern)]

    def apply(self) -> None:
        """Set requires_grad so exactly the trainable entries take gradients."""
        keep = set(self.trainable)
        for n, p in self.params.items():
            p.requires_grad = n in keep
            p.grad = None


def _is_bn_affine(name: str) -> bool:
    return name.startswith("backbone.") and (name.endswith(".bn.gamma") or name.endswith(".bn.beta"))


def trainable_params(model: Pipeline, phase: str, flags: Optional[AdaptFlags] = None) -> ParamSet:
    """Parameters updated in ``phase`` ('A' backbone, 'B' polyformer, 'C' adaptation)."""
    params = dict(model.named_parameters())
    if phase == "A":
        chosen = [n for n in params if n.startswith("backbone.")]
    elif phase == "B":
        if model.poly is None:
            raise ConfigError("phase B needs an inserted polyformer")
        chosen = [n for n in params if n.startswith("poly.") and not n.endswith(".K_target")]
    elif phase == "C":
        if model.poly is None:
            raise ConfigError("phase C needs an inserted polyformer")
        flags = flags or AdaptFlags()
        flags.row()
        if flags.k_scope == "k_only":
            chosen = [n for n in params if fnmatch.fnmatchcase(n, "poly.t1.mode*.K_target")]
        else:
            chosen = [n for n in params if n.startswith("poly.") and not n.endswith(".K_source")]
        if flags.bn_mode == "full":
            chosen += [n for n in params if _is_bn_affine(n)]
    else:
        raise ConfigError(f"unknown phase {phase!r}")
    return ParamSet(params, chosen)


def configure_phase(model: Pipeline, phase: str, flags: Optional[AdaptFlags] = None) -> ParamSet:
    """Apply trainability and backbone BatchNorm modes for a training phase."""
    ps = trainable_params(model, phase, flags)
    ps.apply()
    if phase == "A":
        set_bn_mode(model.backbone, "train")
    elif phase == "B":
        set_bn_mode(model.backbone, "eval")
    else:
        set_bn_mode(model.backbone, "train" if (flags or AdaptFlags()).bn_mode == "full" else "stats_only")
    for bn in batchnorms(model.backbone):
        bn.hold_stats = False
    return ps


def set_eval(model: Module) -> None:
    set_bn_mode(model, "eval")
