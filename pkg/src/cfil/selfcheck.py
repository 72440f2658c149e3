"""Finite-difference gradient suites behind ``cfil gradcheck``.

Each suite returns ``{check name: worst relative error}``; everything runs
in double precision with central differences of step ``h``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .gradcheck import check_gradients, relative_error
from .network import CFILModel, ModelConfig, loss, loss_logit_grad_closed_form
from .rng import STREAM_GRADCHECK, make_rng
from .tensor import Tensor
from .weighted import SIGN_MODES, DistanceKernel, local_apply, local_weights, nonlocal_apply, nonlocal_weights

H = 1e-5


def _leaf(rng, shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from_zero(rng, shape) -> Tensor:
    """Values with |v| >= 0.1 so ReLU kinks stay out of the FD stencil."""
    v = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(v, requires_grad=True)


def _op_cases(rng) -> dict[str, tuple[Callable[..., Tensor], list[Tensor]]]:
    a, b = _leaf(rng, (4, 4)), _leaf(rng, (4, 4))
    m1, m2 = _leaf(rng, (3, 5)), _leaf(rng, (5, 4))
    img = _leaf(rng, (1, 2, 5, 5))
    ker, bias = _leaf(rng, (3, 2, 3, 3)), _leaf(rng, (3,))
    pos = Tensor(rng.uniform(0.5, 2.0, size=(4, 4)), requires_grad=True)
    r = _away_from_zero(rng, (4, 4))
    lb = _leaf(rng, (4,))
    probs_logits = _leaf(rng, (4, 3))
    idx = rng.integers(0, 3, size=4)
    return {
        "add": (lambda: ops.add(a, b), [a, b]),
        "sub": (lambda: ops.sub(a, b), [a, b]),
        "mul": (lambda: ops.mul(a, b), [a, b]),
        "scale": (lambda: ops.scale(a, -1.7), [a]),
        "affine": (lambda: ops.affine(a, 2.5, -0.3), [a]),
        "relu": (lambda: ops.relu(r), [r]),
        "log": (lambda: ops.log(pos), [pos]),
        "matmul": (lambda: ops.matmul(m1, m2), [m1, m2]),
        "linear": (lambda: ops.linear(m1, m2, lb), [m1, m2, lb]),
        "reshape": (lambda: ops.reshape(m1, (5, 3)), [m1]),
        "concat": (lambda: ops.concat([m1, ops.transpose(m2)], axis=0), [m1, m2]),
        "softmax_rows": (lambda: ops.softmax_rows(a), [a]),
        "select_cols": (lambda: ops.select_cols(probs_logits, idx), [probs_logits]),
        "conv2d": (lambda: ops.conv2d(img, ker, bias, stride=1, padding=1), [img, ker, bias]),
        "conv2d_stride2": (lambda: ops.conv2d(img, ker, bias, stride=2, padding=0), [img, ker, bias]),
        "maxpool2d": (lambda: ops.maxpool2d(img, 2, 2), [img]),
        "global_avg_pool": (lambda: ops.global_avg_pool(img), [img]),
        "global_max_pool": (lambda: ops.global_max_pool(img), [img]),
    }


def numerics_suite(trials: int, seed: int, h: float = H) -> dict[str, float]:
    worst: dict[str, float] = {}
    for trial in range(trials):
        rng = make_rng(seed, STREAM_GRADCHECK, 1, trial)
        for name, (fn, leaves) in _op_cases(rng).items():
            w = Tensor(rng.normal(size=fn().shape))
            err = check_gradients(lambda: ops.sum(ops.mul(fn(), w)), leaves, h)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def weighted_suite(trials: int, seed: int, h: float = H, max_len: int = 16) -> dict[str, float]:
    worst: dict[str, float] = {}
    for trial in range(trials):
        rng = make_rng(seed, STREAM_GRADCHECK, 2, trial)
        n = int(rng.integers(1, max_len + 1))
        for mode in SIGN_MODES:
            kernel = DistanceKernel(mode)
            x, y = _leaf(rng, (1, n)), _leaf(rng, (1, n))
            cmap = _leaf(rng, (2, 2, 2))
            wx, wy, wc, wn = (Tensor(rng.normal(size=s)) for s in ((1, n), (1, n), (2, 2, 2), (n, n)))
            cases = {
                f"nonlocal_apply[{mode}]": (lambda: ops.sum(ops.mul(nonlocal_apply(cmap, kernel), wc)), [cmap]),
                f"local_apply[{mode}]": (
                    lambda: ops.add(*[ops.sum(ops.mul(f, w)) for f, w in zip(local_apply(x, y, kernel), (wx, wy))]),
                    [x, y],
                ),
                f"nonlocal_weights[{mode}]": (lambda: ops.sum(ops.mul(nonlocal_weights(x, kernel), wn)), [x]),
                f"local_weights[{mode}]": (
                    lambda: ops.add(*[ops.sum(ops.mul(w, wn)) for w in local_weights(x, y, kernel)]),
                    [x, y],
                ),
            }
            for name, (fn, leaves) in cases.items():
                worst[name] = max(worst.get(name, 0.0), check_gradients(fn, leaves, h))
    return worst


def network_suite(width_scale, seed: int, h: float = H, coords: int = 3, batch: int = 2) -> dict[str, float]:
    """End-to-end loss gradient at reduced width, double precision."""
    rng = make_rng(seed, STREAM_GRADCHECK, 3)
    # a non-zero final layer so every parameter receives gradient signal
    model = CFILModel(ModelConfig(width_scale=str(width_scale), zero_head=False), seed=seed).astype(np.float64)
    size = model.config.image_size
    parent = Tensor(rng.uniform(0, 1, size=(batch, 3, size, size)), requires_grad=True)
    child = Tensor(rng.uniform(0, 1, size=(batch, 3, size, size)))
    labels = np.arange(batch) % 2

    def f() -> Tensor:
        return loss(model(parent, child), labels)

    leaves = list(model.params.values()) + [parent]
    worst: dict[str, float] = {}
    for name, leaf in zip(list(model.params) + ["input.parent"], leaves):
        worst[f"loss/{name}"] = check_gradients(f, [leaf], h, max_coords=coords, rng=rng)
    return worst


def loss_closed_form_suite(trials: int, seed: int) -> dict[str, float]:
    """Autodiff logit gradient vs the closed form, scaled by batch size."""
    worst = 0.0
    for trial in range(trials):
        rng = make_rng(seed, STREAM_GRADCHECK, 4, trial)
        n = int(rng.integers(1, 9))
        logits = Tensor(rng.normal(scale=3.0, size=(n, 2)), requires_grad=True)
        labels = rng.integers(0, 2, size=n)
        probs = ops.softmax_rows(logits)
        loss(probs, labels).backward()
        closed = loss_logit_grad_closed_form(probs, labels) / n
        worst = max(worst, float(np.abs(logits.grad - closed).max()))
    return {"loss_logit_closed_form": worst}


def run_all(width_scale="1/8", trials: int = 3, seed: int = 42, h: float = H) -> dict[str, dict[str, float]]:
    return {
        "numerics-core": numerics_suite(trials, seed, h),
        "weighted-ops": weighted_suite(trials, seed, h),
        "network": {**network_suite(width_scale, seed, h), **loss_closed_form_suite(max(trials, 1) * 10, seed)},
    }


__all__ = ["run_all", "numerics_suite", "weighted_suite", "network_suite", "loss_closed_form_suite", "relative_error"]
