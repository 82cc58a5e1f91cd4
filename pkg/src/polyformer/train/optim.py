"""AdamW with decoupled weight decay on weight matrices only."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Tuple

import numpy as np

from ..nn import Parameter


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamWState:
    step: int = 0
    m: Dict[str, np.ndarray] = None
    v: Dict[str, np.ndarray] = None

    def __post_init__(self):
        self.m = {} if self.m is None else self.m
        self.v = {} if self.v is None else self.v


def adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamWState,
               cfg: AdamWConfig, decay: Dict[str, bool] = None) -> Tuple[Dict[str, np.ndarray], AdamWState]:
    """One bias-corrected AdamW update.

    Entries whose gradient is None are left untouched, decay included.
    Returns new parameter arrays; ``state`` is updated in place.
    """
    decay = decay or {}
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        f = p.dtype.type
        if decay.get(name, False) and cfg.weight_decay:
            p = p - f(cfg.lr * cfg.weight_decay) * p
        m = state.m.get(name)
        v = state.v.get(name)
        m = (f(1 - cfg.beta1) * g) if m is None else f(cfg.beta1) * m + f(1 - cfg.beta1) * g
        v = (f(1 - cfg.beta2) * g * g) if v is None else f(cfg.beta2) * v + f(1 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / f(1 - cfg.beta1 ** t)
        vhat = v / f(1 - cfg.beta2 ** t)
        out[name] = p - f(cfg.lr) * mhat / (np.sqrt(vhat) + f(cfg.eps))
    return out, state


class AdamW:
    """Stateful wrapper over :func:`adamw_step` for a fixed list of named parameters."""

    def __init__(self, named_params: Iterable[Tuple[str, Parameter]], cfg: AdamWConfig = AdamWConfig()):
        self.params = dict(named_params)
        self.cfg = cfg
        self.state = AdamWState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        new, _ = adamw_step({n: p.data for n, p in self.params.items()},
                            {n: p.grad for n, p in self.params.items()},
                            self.state, self.cfg,
                            {n: p.decay for n, p in self.params.items()})
        for n, p in self.params.items():
            p.data = np.ascontiguousarray(new[n], dtype=p.data.dtype)

    def state_tensors(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {}
        for n in self.params:
            if n in self.state.m:
                out[f"{prefix}m/{n}"] = self.state.m[n]
                out[f"{prefix}v/{n}"] = self.state.v[n]
        return out

    def load_state_tensors(self, tensors: Dict[str, np.ndarray], prefix: str, step: int) -> None:
        self.state = AdamWState(step=step)
        for n, p in self.params.items():
            if f"{prefix}m/{n}" in tensors:
                self.state.m[n] = np.array(tensors[f"{prefix}m/{n}"], dtype=p.data.dtype)
                self.state.v[n] = np.array(tensors[f"{prefix}v/{n}"], dtype=p.data.dtype)
