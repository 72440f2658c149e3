"""Central finite-difference gradient oracle and comparison helpers."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import ContractError, NumericError, Tensor, no_grad


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    arr = np.asarray(value, dtype=np.float64)
    if arr.size != 1:
        raise ContractError(f"function must return a scalar, got shape {arr.shape}")
    out = float(arr.reshape(-1)[0])
    if not np.isfinite(out):
        raise NumericError("non-finite function value during finite differencing")
    return out


def finite_difference_grad(
    f: Callable[[Tensor], object],
    x: Tensor,
    h: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> np.ndarray:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for every flat index i.

    ``x`` is perturbed in place and restored afterwards. With ``indices``
    only those coordinates are evaluated; the others are left at zero.
    """
    if h <= 0:
        raise ContractError(f"step h must be positive, got {h}")
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    coords = range(flat.size) if indices is None else indices
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            plus = _scalar(f(x))
            flat[i] = orig - h
            minus = _scalar(f(x))
            flat[i] = orig
            grad[i] = (plus - minus) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """max |a - n| scaled by the larger of the two max-magnitudes.

    Normalising by the whole vector's scale (rather than per element) keeps
    near-zero entries from dominating.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.shape != n.shape:
        raise ContractError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / denom)


def check_gradients(
    f: Callable[[], Tensor],
    params: list[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between backward() and finite differences.

    ``f`` rebuilds the scalar from the current values of ``params``. When
    ``max_coords`` is set, each tensor is probed at that many randomly chosen
    coordinates instead of all of them.
    """
    for p in params:
        p.grad = None
    root = f()
    root.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if max_coords is not None and p.size > max_coords:
            picker = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(picker.choice(p.size, size=max_coords, replace=False))
        else:
            idx = np.arange(p.size)
        numeric = finite_difference_grad(lambda _x: f(), p, h, indices=idx)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx]))
    return worst
