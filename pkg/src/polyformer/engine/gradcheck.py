"""Central-difference gradient checking in 64-bit replay mode."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import NumericError, Tensor, backward, no_grad, precision


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _scalar(out: Tensor) -> float:
    v = float(out.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericError("grad_check: non-finite function value")
    return v


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` at ``point`` and
    central differences.

    ``f`` maps a tensor to a scalar tensor. Everything runs in float64.
    """
    with precision(np.float64):
        x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
        x = Tensor(x0, requires_grad=True)
        backward(f(x))
        analytic = np.zeros_like(x0) if x.grad is None else x.grad
        numeric = np.zeros_like(x0)
        flat = x0.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = _scalar(f(Tensor(x0)))
                flat[i] = orig - eps
                fm = _scalar(f(Tensor(x0)))
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return _rel_err(analytic, numeric)


def grad_check_params(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> dict:
    """Gradient check against every coordinate of the given parameter tensors.

    Parameters must already hold float64 data (see ``Module.to_dtype``).
    Returns ``{name: max relative error}``.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check_params: {p.name} is {p.data.dtype}, expected float64")
    with precision(np.float64):
        saved = [(p.requires_grad, p.grad) for p in params]
        for p in params:
            p.requires_grad = True
            p.grad = None
        try:
            backward(loss_fn())
            errors = {}
            with no_grad():
                for j, p in enumerate(params):
                    analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                    numeric = np.zeros_like(p.data)
                    flat = p.data.reshape(-1)
                    for i in range(flat.size):
                        orig = flat[i]
                        flat[i] = orig + eps
                        fp = _scalar(loss_fn())
                        flat[i] = orig - eps
                        fm = _scalar(loss_fn())
                        flat[i] = orig
                        numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
                    errors[p.name or f"param{j}"] = _rel_err(analytic, numeric)
        finally:
            for p, (rg, g) in zip(params, saved):
                p.requires_grad = rg
                p.grad = g
    return errors
