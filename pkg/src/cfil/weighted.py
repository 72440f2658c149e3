"""Softmax-normalised distance-kernel weighting operators.

Both operators reweight a flat feature vector with a row-stochastic matrix
whose rows are softmaxes of the quadratic kernel

    psi(a, b) = (a - b)**2 + (a**2 - b**2)

(or, in ``negated-first-term`` mode, ``-(a - b)**2 + (a**2 - b**2)``).

* non-local: ``W[i, m] = softmax_m psi(x_i, x_m)`` and ``f = W @ x``
* local (cross-pair): ``Wx[i, j] = softmax_j psi(x_i, y_j)``,
  ``Wy[j, i] = softmax_i psi(y_j, x_i)``, ``fx = Wx @ x``, ``fy = Wy @ y``

The weights are computed across the pair but each matrix is applied to the
vector's own values. The non-local operator is the local one with ``y = x``
and shares its code path, so the two agree bitwise in that case.

Neither operator has trainable parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import DimensionError, Function, NumericError, Tensor

AS_ALGORITHM = "as-algorithm"
NEGATED_FIRST_TERM = "negated-first-term"
SIGN_MODES = (AS_ALGORITHM, NEGATED_FIRST_TERM)
_SIGN_ALIASES = {"eq8-negated-first-term": NEGATED_FIRST_TERM}

DEFAULT_MAX_N = 8192
SINGLE_PRECISION_LIMIT = 1e3


class CapacityError(ValueError):
    """Raised when a flattened feature map is too long for a dense weight matrix."""


@dataclass(frozen=True)
class DistanceKernel:
    sign_mode: str = AS_ALGORITHM

    def __post_init__(self):
        mode = _SIGN_ALIASES.get(self.sign_mode, self.sign_mode)
        if mode not in SIGN_MODES:
            raise ValueError(f"unknown sign mode {self.sign_mode!r}; expected one of {SIGN_MODES}")
        object.__setattr__(self, "sign_mode", mode)

    @property
    def first_term_sign(self) -> float:
        return 1.0 if self.sign_mode == AS_ALGORITHM else -1.0

    def __call__(self, a, b):
        s = self.first_term_sign
        return s * (a - b) ** 2 + (a * a - b * b)

    def coefficients(self) -> tuple[float, float, float]:
        """(caa, cab, cbb) with psi(a, b) = caa*a^2 + cab*a*b + cbb*b^2."""
        s = self.first_term_sign
        return s + 1.0, -2.0 * s, s - 1.0


def psi(a: float, b: float, kernel: DistanceKernel = DistanceKernel()) -> float:
    return kernel(a, b)


def _check_values(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what}: non-finite input")
    if arr.dtype == np.float32 and arr.size and np.abs(arr).max() > SINGLE_PRECISION_LIMIT:
        raise NumericError(
            f"{what}: |value| {float(np.abs(arr).max()):.4g} exceeds {SINGLE_PRECISION_LIMIT:g}; "
            "the quadratic kernel would overflow single precision"
        )


def _check_budget(n: int, max_n: int) -> None:
    if n > max_n:
        raise CapacityError(
            f"flattened length n={n} exceeds the dense weight budget {max_n} "
            f"(an n x n matrix); reduce channels or spatial size before this layer"
        )


# ---------------------------------------------------------------------------
# weight matrices (composed from primitive ops)


class _PairwiseKernel(Function):
    """K[i, j] = psi(a_i, b_j) for vectors a, b."""

    kernel: DistanceKernel

    def forward(self, a, b):
        self.a, self.b = a, b
        return self.kernel(a[:, None], b[None, :])

    def backward(self, grad):
        caa, cab, cbb = self.kernel.coefficients()
        a, b = self.a, self.b
        ga = 2 * caa * a * grad.sum(axis=1) + cab * (grad @ b)
        gb = cab * (grad.T @ a) + 2 * cbb * b * grad.sum(axis=0)
        return ga, gb


def _as_vector(x: Tensor, what: str) -> Tensor:
    if x.ndim == 2 and x.shape[0] == 1:
        return ops.reshape(x, (x.shape[1],))
    if x.ndim == 1:
        return x
    raise DimensionError(f"{what}: expected a 1 x n or length-n vector, got shape {x.shape}")


def pairwise_kernel(a: Tensor, b: Tensor, kernel: DistanceKernel = DistanceKernel()) -> Tensor:
    a = _as_vector(a, "pairwise_kernel")
    b = _as_vector(b, "pairwise_kernel")
    return _PairwiseKernel.apply(a, b, kernel=kernel)


def nonlocal_weights(x: Tensor, kernel: DistanceKernel = DistanceKernel(), max_n: int = DEFAULT_MAX_N) -> Tensor:
    """Row-stochastic n x n self-weighting matrix for a 1 x n vector."""
    _check_values(x.data, "nonlocal_weights")
    _check_budget(x.size, max_n)
    return ops.softmax_rows(pairwise_kernel(x, x, kernel))


def local_weights(
    x: Tensor, y: Tensor, kernel: DistanceKernel = DistanceKernel(), max_n: int = DEFAULT_MAX_N
) -> tuple[Tensor, Tensor]:
    """Cross-pair weight matrices (Wx, Wy) for two 1 x n vectors."""
    if x.size != y.size:
        raise DimensionError(f"local_weights: lengths differ ({x.size} vs {y.size})")
    _check_values(x.data, "local_weights")
    _check_values(y.data, "local_weights")
    _check_budget(x.size, max_n)
    wx = ops.softmax_rows(pairwise_kernel(x, y, kernel))
    wy = ops.softmax_rows(pairwise_kernel(y, x, kernel))
    return wx, wy


def is_row_stochastic(w, atol: float = 1e-6) -> bool:
    arr = w.data if isinstance(w, Tensor) else np.asarray(w)
    return bool(
        np.all(arr >= 0.0) and np.all(arr <= 1.0) and np.allclose(arr.sum(axis=1), 1.0, rtol=0.0, atol=atol)
    )


# ---------------------------------------------------------------------------
# fused apply


def _exp_logits(a, b, cab, cbb):
    # the caa*a_i^2 term is constant along each row and cancels in the softmax
    logits = np.multiply.outer(cab * a, b)
    if cbb:
        logits += cbb * (b * b)
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    return logits


class _CrossWeighted(Function):
    """f[r, i] = sum_j softmax_j(psi(a[r, i], b[r, j])) * v[r, j], row by row.

    The n x n weights are rebuilt in backward rather than stored, so memory
    stays O(n^2) for one sample instead of the whole batch.
    """

    kernel: DistanceKernel

    def forward(self, a, b, v):
        _, cab, cbb = self.kernel.coefficients()
        dt = a.dtype.type
        out = np.empty_like(v)
        self.norms = np.empty_like(v)
        for r in range(a.shape[0]):
            e = _exp_logits(a[r], b[r], dt(cab), dt(cbb))
            s = e.sum(axis=1)
            out[r] = (e @ v[r]) / s
            self.norms[r] = s
        self.a, self.b, self.v, self.out = a, b, v, out
        return out

    def backward(self, grad):
        _, cab, cbb = self.kernel.coefficients()
        dt = grad.dtype.type
        ga = np.zeros_like(self.a)
        gb = np.zeros_like(self.b)
        gv = np.zeros_like(self.v)
        for r in range(grad.shape[0]):
            a, b, v, f, s, g = self.a[r], self.b[r], self.v[r], self.out[r], self.norms[r], grad[r]
            e = _exp_logits(a, b, dt(cab), dt(cbb))
            # W @ z == (E @ z) / s and W.T @ y == E.T @ (y / s)
            right = (e @ np.stack([v * b, b], axis=1)) / s[:, None]
            gs = g / s
            left = e.T @ np.stack([gs, gs * a, gs * a * f, gs * f], axis=1)
            wt_g, wt_ga, wt_gaf, wt_gf = left.T
            gv[r] = wt_g
            # dlogits[i, j] = g_i W_ij (v_j - f_i), chained through psi's partials
            ga[r] = cab * g * (right[:, 0] - f * right[:, 1])
            gb[r] = cab * (v * wt_ga - wt_gaf) + 2 * cbb * b * (v * wt_g - wt_gf)
        return ga, gb, gv


def _cross_apply(a: Tensor, b: Tensor, v: Tensor, kernel: DistanceKernel) -> Tensor:
    return _CrossWeighted.apply(a, b, v, kernel=kernel)


def nonlocal_apply_batch(
    x: Tensor, kernel: DistanceKernel = DistanceKernel(), max_n: int = DEFAULT_MAX_N
) -> Tensor:
    """Apply the non-local operator independently to each sample of a batch.

    ``x`` has shape (N, ...); each sample is flattened in row-major order,
    reweighted, and reshaped back, so the output shape equals the input's.
    """
    if x.ndim < 2:
        raise DimensionError(f"nonlocal_apply_batch expects (N, ...) input, got shape {x.shape}")
    n = x.size // x.shape[0]
    _check_budget(n, max_n)
    _check_values(x.data, "nonlocal_apply")
    flat = ops.reshape(x, (x.shape[0], n))
    return ops.reshape(_cross_apply(flat, flat, flat, kernel), x.shape)


def nonlocal_apply(x: Tensor, kernel: DistanceKernel = DistanceKernel(), max_n: int = DEFAULT_MAX_N) -> Tensor:
    """Non-local reweighting of one feature map (e.g. C x H x W); shape is preserved."""
    _check_budget(x.size, max_n)
    _check_values(x.data, "nonlocal_apply")
    flat = ops.reshape(x, (1, x.size))
    return ops.reshape(_cross_apply(flat, flat, flat, kernel), x.shape)


def local_apply(
    x: Tensor, y: Tensor, kernel: DistanceKernel = DistanceKernel(), max_n: int = DEFAULT_MAX_N
) -> tuple[Tensor, Tensor]:
    """Cross-pair reweighting of two vectors.

    Accepts 1 x n / length-n vectors or N x n batches (one pair per row);
    returns ``(fx, fy)`` with the input shape.
    """
    if x.shape != y.shape:
        raise DimensionError(f"local_apply: shapes {x.shape} and {y.shape} differ")
    if x.ndim not in (1, 2):
        raise DimensionError(f"local_apply expects vectors or an N x n batch, got shape {x.shape}")
    _check_budget(x.shape[-1], max_n)
    _check_values(x.data, "local_apply")
    _check_values(y.data, "local_apply")
    shape = x.shape
    xb = x if x.ndim == 2 else ops.reshape(x, (1, x.size))
    yb = y if y.ndim == 2 else ops.reshape(y, (1, y.size))
    fx = _cross_apply(xb, yb, xb, kernel)
    fy = _cross_apply(yb, xb, yb, kernel)
    if x.ndim == 1:
        fx, fy = ops.reshape(fx, shape), ops.reshape(fy, shape)
    return fx, fy


# ---------------------------------------------------------------------------
# brute-force references


def _reference_cross(a: list[float], b: list[float], v: list[float], kernel: DistanceKernel) -> list[float]:
    n = len(a)
    out = []
    for i in range(n):
        logits = [kernel(a[i], b[j]) for j in range(n)]
        top = max(logits)
        num = 0.0
        den = 0.0
        for j in range(n):
            e = math.exp(logits[j] - top)
            num += e * v[j]
            den += e
        out.append(num / den)
    return out


def _reference_weights(a: list[float], b: list[float], kernel: DistanceKernel) -> list[list[float]]:
    rows = []
    for ai in a:
        logits = [kernel(ai, bj) for bj in b]
        top = max(logits)
        exps = [math.exp(t - top) for t in logits]
        total = sum(exps)
        rows.append([e / total for e in exps])
    return rows


def _plain(x) -> list[float]:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    flat = [float(t) for t in np.asarray(arr, dtype=np.float64).reshape(-1)]
    if len(flat) > 4096:
        raise CapacityError(f"reference oracle limited to n <= 4096, got {len(flat)}")
    return flat


def reference_nonlocal_weights(x, kernel: DistanceKernel = DistanceKernel()) -> np.ndarray:
    xs = _plain(x)
    return np.array(_reference_weights(xs, xs, kernel))


def reference_local_weights(x, y, kernel: DistanceKernel = DistanceKernel()) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = _plain(x), _plain(y)
    return np.array(_reference_weights(xs, ys, kernel)), np.array(_reference_weights(ys, xs, kernel))


def reference_nonlocal(x, kernel: DistanceKernel = DistanceKernel()) -> np.ndarray:
    """Double-loop non-local operator in double precision; keeps the input shape."""
    shape = np.shape(x.data if isinstance(x, Tensor) else x)
    xs = _plain(x)
    return np.array(_reference_cross(xs, xs, xs, kernel)).reshape(shape)


def reference_local(x, y, kernel: DistanceKernel = DistanceKernel()) -> tuple[np.ndarray, np.ndarray]:
    shape = np.shape(x.data if isinstance(x, Tensor) else x)
    xs, ys = _plain(x), _plain(y)
    if len(xs) != len(ys):
        raise DimensionError(f"reference_local: lengths differ ({len(xs)} vs {len(ys)})")
    fx = np.array(_reference_cross(xs, ys, xs, kernel)).reshape(shape)
    fy = np.array(_reference_cross(ys, xs, ys, kernel)).reshape(shape)
    return fx, fy
