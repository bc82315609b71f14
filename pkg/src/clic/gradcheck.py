"""Finite-difference audit of the gradient core and the training objective.

Every check builds a small scalar function of a few parameter tensors,
differentiates it on the tape and compares against central differences.
Checks run in float64 so the finite-difference truncation error, not
float32 rounding, dominates the comparison.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numeric as nx
from .encoder import forward, init_encoder
from .numeric import GradTape, Tensor
from .trainer import cal_loss, info_nce, total_loss

TOLERANCE = 1e-3
FD_STEP = 1e-3
# Central differences are meaningless across a ReLU kink, so random cases
# are redrawn until every pre-activation sits at least this far from zero.
KINK_MARGIN = 0.02


@dataclass(frozen=True)
class GradCheck:
    name: str
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def check(name: str, fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = FD_STEP) -> GradCheck:
    """Compare tape gradients of ``fn`` against central differences."""
    with GradTape() as tape:
        loss = fn()
    analytic = tape.gradient(loss, list(params))
    numeric = nx.finite_difference(fn, params, step)
    return GradCheck(name, nx.max_relative_error(analytic, numeric))


def _unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _conv_stride2(rng) -> GradCheck:
    x = Tensor(rng.normal(size=(1, 2, 8, 8)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 3, 3)))
    return check("conv2d_stride2", lambda: nx.sum(nx.mul(nx.reshape(nx.conv2d(x, k, 2), (3, 3, 3)), w)), [x, k])


def _clear_of_kinks(pre: np.ndarray) -> bool:
    return bool(np.min(np.abs(pre)) > KINK_MARGIN)


def _conv_relu_mean(rng) -> GradCheck:
    while True:
        x = Tensor(rng.normal(size=(2, 1, 6, 6)), requires_grad=True)
        k = Tensor(rng.normal(size=(4, 1, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=4), requires_grad=True)
        if _clear_of_kinks(nx.add_bias(nx.conv2d(x, k, 1), b).data):
            break
    return check("conv_relu_mean", lambda: nx.mean(nx.relu(nx.add_bias(nx.conv2d(x, k, 1), b))), [x, k, b])


def _matmul_normalize(rng) -> GradCheck:
    while True:
        a = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        if _clear_of_kinks(nx.matmul(a, w).data):
            break
    t = Tensor(rng.normal(size=(3, 4)))

    def fn():
        z = nx.l2_normalize(nx.relu(nx.matmul(a, w)) + Tensor(np.full((3, 4), 0.1)), axis=1)
        return nx.sum(nx.mul(z, t))

    return check("matmul_relu_l2norm", fn, [a, w])


def _logsumexp(rng) -> GradCheck:
    x = Tensor(rng.normal(size=(4, 6)) * 3, requires_grad=True)
    return check("logsumexp", lambda: nx.mean(nx.logsumexp(x, axis=1)), [x])


def _stage_preactivations(enc, x: Tensor) -> list[np.ndarray]:
    out, h = [], x
    for k, b in zip(enc.kernels, enc.biases):
        pre = nx.add_bias(nx.conv2d(h, k, stride=2), b)
        out.append(pre.data)
        h = nx.relu(pre)
    return out


def _objective(rng, lam: float) -> GradCheck:
    while True:
        enc = init_encoder(int(rng.integers(1 << 31)), channels=(4, 8), embed_dim=16)
        enc = enc.with_params([a + 0.05 * rng.normal(size=a.shape) for a in enc.arrays()])
        x = Tensor(rng.uniform(0.0, 1.0, size=(3, 1, 8, 8)))
        if all(_clear_of_kinks(p) for p in _stage_preactivations(enc, x)):
            break
    keys = _unit_rows(rng, 3, 16)
    negs = _unit_rows(rng, 8, 16)
    ge = rng.uniform(0.0, 1.0, size=3)

    def fn():
        res = forward(enc, x)
        return total_loss(info_nce(res.embedding, keys, negs, 0.07), cal_loss(res.fae, ge), lam)

    return check(f"infonce_plus_cal_lambda{lam:g}", fn, enc.params())


def run_gradcheck(seed: int = 0) -> list[GradCheck]:
    """Run every check at float64 precision; returns one result per check."""
    rng = np.random.default_rng(seed)
    with nx.precision(np.float64):
        return [
            _conv_stride2(rng),
            _conv_relu_mean(rng),
            _matmul_normalize(rng),
            _logsumexp(rng),
            _objective(rng, 0.25),
            _objective(rng, 1.0),
        ]


__all__ = ["GradCheck", "TOLERANCE", "check", "run_gradcheck"]
