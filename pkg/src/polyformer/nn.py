"""Neural network layers built on the tensor engine."""

from __future__ import annotations

import math
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .engine import ops
from .engine.rng import rng_for
from .engine.tensor import DimensionError, Tensor, default_dtype


class DegenerateBatchError(ValueError):
    """Batch statistics requested over fewer than two values per channel."""


class CheckpointMismatchError(KeyError):
    """State does not fit the module: missing, unexpected, or mis-shaped entries."""

    def __init__(self, missing=(), unexpected=(), shape_diffs=()):
        self.missing = list(missing)
        self.unexpected = list(unexpected)
        self.shape_diffs = list(shape_diffs)
        lines = []
        if self.missing:
            lines.append("missing: " + ", ".join(self.missing))
        if self.unexpected:
            lines.append("unexpected: " + ", ".join(self.unexpected))
        for name, want, got in self.shape_diffs:
            lines.append(f"shape mismatch {name}: model {want} vs checkpoint {got}")
        super().__init__("; ".join(lines))

    def __str__(self):
        return self.args[0]


class Parameter(Tensor):
    """A learnable tensor.

    ``init`` names the initialisation rule applied by :meth:`Module.initialize`;
    ``decay`` marks weight matrices that receive decoupled weight decay.
    """

    __slots__ = ("init", "decay")

    def __init__(self, shape, init=("zeros",), decay: bool = False):
        super().__init__(np.zeros(shape), requires_grad=True)
        self.init = init
        self.decay = decay


def _init_values(rule, shape, rng: np.random.Generator) -> np.ndarray:
    kind = rule[0]
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "he":
        return rng.standard_normal(shape) * math.sqrt(2.0 / rule[1])
    if kind == "xavier":
        fan_in, fan_out = rule[1], rule[2]
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    if kind == "normal":
        return rng.standard_normal(shape) * rule[1]
    raise ValueError(f"unknown init rule {rule!r}")


class Module:
    """Container that discovers parameters, buffers and children by attribute."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self._children():
            yield from child.named_parameters(prefix + key + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for key in getattr(self, "_buffers", ()):
            yield prefix + key, getattr(self, key)
        for key, child in self._children():
            yield from child.named_buffers(prefix + key + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def initialize(self, seed: int, prefix: str = "") -> None:
        """Draw every parameter from its rule, keyed by (seed, name)."""
        for name, p in self.named_parameters(prefix):
            vals = _init_values(p.init, p.shape, rng_for(seed, "init", name))
            p.data = np.ascontiguousarray(vals, dtype=default_dtype())

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters(prefix)}
        state.update({name: buf for name, buf in self.named_buffers(prefix)})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = "") -> None:
        params = dict(self.named_parameters(prefix))
        buffers = {name: (mod, key) for mod, key, name in self._buffer_slots(prefix)}
        expected = {n: p.shape for n, p in params.items()}
        expected.update({n: getattr(m, k).shape for n, (m, k) in buffers.items()})
        missing = [n for n in expected if n not in state]
        unexpected = [n for n in state if n not in expected]
        shape_diffs = [(n, expected[n], tuple(state[n].shape)) for n in expected
                       if n in state and tuple(state[n].shape) != tuple(expected[n])]
        if missing or unexpected or shape_diffs:
            raise CheckpointMismatchError(missing, unexpected, shape_diffs)
        for n, p in params.items():
            p.data = np.array(state[n], dtype=p.data.dtype)
            p.grad = None
        for n, (m, k) in buffers.items():
            setattr(m, k, np.array(state[n], dtype=getattr(m, k).dtype))

    def _buffer_slots(self, prefix: str = ""):
        for key in getattr(self, "_buffers", ()):
            yield self, key, prefix + key
        for key, child in self._children():
            yield from child._buffer_slots(prefix + key + ".")

    def to_dtype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 for gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for mod, key, _ in self._buffer_slots():
            setattr(mod, key, getattr(mod, key).astype(dtype))
        return self


class Linear(Module):
    """y = x W + b over the last axis."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True, zero: bool = False):
        self.weight = Parameter((d_in, d_out), ("zeros",) if zero else ("xavier", d_in, d_out), decay=True)
        self.bias = Parameter((d_out,)) if bias else None
        self.d_in = d_in

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"Linear: input width {x.shape[-1]} != {self.d_in}")
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else x.reshape(-1, self.d_in)
        y = ops.matmul(flat, self.weight)
        if self.bias is not None:
            y = ops.add(y, self.bias)
        return y if x.ndim == 2 else y.reshape(lead + (y.shape[-1],))


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, bias: bool = True):
        self.weight = Parameter((c_out, c_in, k, k), ("he", c_in * k * k), decay=True)
        self.bias = Parameter((c_out,)) if bias else None
        self.stride = stride
        self.pad = k // 2

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


BN_MODES = ("train", "eval", "stats_only")


class BatchNorm2d(Module):
    """BatchNorm over (B, H, W) per channel.

    Modes: ``train`` (batch stats, running update, affine trainable), ``eval``
    (running stats, affine applied as constants), ``stats_only`` (as train,
    but the affine parameters are constants).
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter((channels,), ("ones",))
        self.beta = Parameter((channels,))
        self.running_mean = np.zeros(channels, dtype=default_dtype())
        self.running_var = np.ones(channels, dtype=default_dtype())
        self.momentum = momentum
        self.eps = eps
        self.mode = "train"
        # set by callers that need batch-stat normalisation without touching running stats
        self.hold_stats = False

    def set_mode(self, mode: str) -> None:
        if mode not in BN_MODES:
            raise ValueError(f"BatchNorm2d: unknown mode {mode!r}")
        self.mode = mode

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.gamma.shape[0]:
            raise DimensionError(f"BatchNorm2d: expected {self.gamma.shape[0]} channels, got {x.shape}")
        if self.mode == "eval":
            return ops.batch_norm(x, self.gamma.detach(), self.beta.detach(), self.running_mean,
                                  self.running_var, self.eps)
        B, _, H, W = x.shape
        if B * H * W < 2:
            raise DegenerateBatchError(f"BatchNorm2d: batch statistics need >= 2 values per channel, got {B * H * W}")
        gamma, beta = self.gamma, self.beta
        if self.mode == "stats_only":
            gamma, beta = gamma.detach(), beta.detach()
        out, mu, var = ops.batch_norm(x, gamma, beta, eps=self.eps)
        if not self.hold_stats:
            m = self.running_mean.dtype.type(self.momentum)
            one = self.running_mean.dtype.type(1)
            self.running_mean = (one - m) * self.running_mean + m * mu.astype(self.running_mean.dtype)
            self.running_var = (one - m) * self.running_var + m * var.astype(self.running_var.dtype)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter((dim,), ("ones",))
        self.beta = Parameter((dim,))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    """D -> hidden -> D with a nonlinearity in between."""

    def __init__(self, dim: int, hidden: int, activation: str = "gelu", zero_out: bool = False):
        self.lin1 = Linear(dim, hidden)
        self.lin2 = Linear(hidden, dim, zero=zero_out)
        self.activation = activation
        self.dim = dim

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise DimensionError(f"FeedForward: input width {x.shape[-1]} != {self.dim}")
        h = self.lin1(x)
        h = ops.gelu(h) if self.activation == "gelu" else ops.relu(h)
        return self.lin2(h)


def ffn_forward(x: Tensor, ffn: FeedForward) -> Tensor:
    return ffn(x)


class GradientReversal(Module):
    def __init__(self, lam: float = 1.0):
        if lam < 0:
            raise ValueError(f"GradientReversal: lambda must be non-negative, got {lam}")
        self.lam = lam

    def forward(self, x: Tensor) -> Tensor:
        return ops.grad_reverse(x, self.lam)


def grad_reverse(x: Tensor, lam: float = 1.0) -> Tensor:
    return ops.grad_reverse(x, lam)


def batchnorm_forward(x: Tensor, bn: BatchNorm2d) -> Tensor:
    return bn(x)


class ConvBNReLU(Module):
    """3x3 conv (no bias) -> BatchNorm -> ReLU."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        self.conv = Conv2d(c_in, c_out, 3, stride=stride, bias=False)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


def batchnorms(module: Module):
    return [m for m in module.modules() if isinstance(m, BatchNorm2d)]


def set_bn_mode(module: Module, mode: str) -> None:
    for bn in batchnorms(module):
        bn.set_mode(mode)
