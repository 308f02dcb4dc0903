"""Central finite-difference checks of every differentiable op and of the full
per-iteration training loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .model import RacModel
from .objectives import total_loss
from .tensor import GradientTape, Tensor
from .trainer import draw_iteration, iteration_terms

EPS = 1e-3
TOL = 1e-3


@dataclass
class GradResult:
    name: str
    rel_err: float
    tol: float = TOL

    @property
    def ok(self) -> bool:
        return self.rel_err <= self.tol


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), with 0 when both vanish."""
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_op(name: str, fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
             eps: float = EPS, tol: float = TOL) -> GradResult:
    """Compare autodiff J^T r with central differences of the op's output.

    ``r`` is a fixed random cotangent. The autodiff side backpropagates a
    mean-squared loss whose output-gradient at the base point is exactly ``r``.
    """
    rng = np.random.default_rng(seed)
    base = [np.asarray(a, np.float32) for a in inputs]
    out0 = fn(*[Tensor(a) for a in base]).data
    r = rng.standard_normal(out0.shape)
    n = out0.size
    target = (out0.astype(np.float64) - r * n / 2.0).astype(np.float32)
    # float32 rounding of target perturbs the cotangent; recompute it exactly
    r_eff = 2.0 / n * (out0.astype(np.float64) - target.astype(np.float64))

    leaves = [Tensor(a, requires_grad=True) for a in base]
    with GradientTape() as tape:
        loss = T.reduce_mean_sq(fn(*leaves), Tensor(target))
    auto = tape.gradient(loss, leaves)

    errs = []
    for i, a in enumerate(base):
        fd = np.zeros(a.shape, np.float64)
        for idx in np.ndindex(a.shape):
            vals, steps = [], []
            for sign in (1.0, -1.0):
                pert = [b.copy() for b in base]
                pert[i][idx] += sign * eps
                steps.append(float(pert[i][idx]))
                vals.append(fn(*[Tensor(b) for b in pert]).data.astype(np.float64))
            fd[idx] = np.sum((vals[0] - vals[1]) / (steps[0] - steps[1]) * r_eff)
        errs.append(relative_error(auto[i], fd))
    return GradResult(name, max(errs), tol)


def _away_from(x: np.ndarray, points: Sequence[float], margin: float = 0.05) -> np.ndarray:
    x = x.copy()
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin) * 2
    return x


def op_cases(seed: int = 0) -> list[tuple[str, Callable[..., Tensor], list[np.ndarray]]]:
    """(name, fn, inputs) for every registered op on seeded 4x4 inputs."""
    rng = np.random.default_rng(seed)

    def r(*shape):
        return rng.standard_normal(shape).astype(np.float32)

    a, b = r(2, 4, 4), r(2, 4, 4)
    return [
        ("add", T.add, [a, b]),
        ("sub", T.sub, [a, b]),
        ("mul", T.mul, [a, b]),
        ("scale", lambda x: T.scale(x, 2.5), [a]),
        ("add_scalar", lambda x: T.add(x, 0.75), [a]),
        ("relu", T.relu, [_away_from(a, [0.0])]),
        ("silu", T.silu, [a]),
        ("exp", T.exp, [0.5 * a]),
        ("clamp", lambda x: T.clamp(x, -0.5, 0.5), [_away_from(a, [-0.5, 0.5])]),
        ("mean", T.mean, [a]),
        ("reduce_mean_sq", lambda x, y: T.scale(T.reduce_mean_sq(x, y), 1.0), [a, b]),
        ("conv2d_3x3", T.conv2d, [r(3, 4, 4), r(2, 3, 3, 3), r(2)]),
        ("conv2d_1x1", T.conv2d, [r(3, 4, 4), r(2, 3, 1, 1), r(2)]),
        ("conv2d_batched", T.conv2d, [r(2, 2, 4, 4), r(3, 2, 3, 3), r(3)]),
        ("avg_pool2d", lambda x: T.avg_pool2d(x, 2), [a]),
        ("upsample_nearest", lambda x: T.upsample_nearest(x, 2), [a]),
        ("concat_channels", lambda x, y: T.concat_channels([x, y]), [a, r(1, 4, 4)]),
        ("slice_channels", lambda x: T.slice_channels(x, 1, 3), [r(4, 4, 4)]),
    ]


def check_all_ops(seed: int = 0) -> list[GradResult]:
    return [check_op(name, fn, inputs, seed=seed) for name, fn, inputs in op_cases(seed)]


def full_loss_config(seed: int = 0) -> RunConfig:
    """Default settings on an 8x8 state with K=2."""
    return RunConfig().override({
        "state.height": 8, "state.width": 8, "train.K": 2, "train.seed": seed,
        "train.batch_size": 2,
    })


def check_full_loss(seed: int = 0, coords_per_param: int = 4, eps: float = EPS,
                    tol: float = TOL, config: RunConfig | None = None) -> list[GradResult]:
    """Autodiff vs central differences of the whole weighted objective.

    The head is given random weights so gradients reach every layer, and the
    iteration's grid and step noise are drawn once so the loss is a fixed function.
    """
    config = config or full_loss_config(seed)
    model = RacModel.build(config)
    model.field.randomize_head(config.seed_for("gradcheck-head"))
    head = model.field.params["field.head.weight"].value.data
    head *= 0.1
    rng = np.random.default_rng(config.seed_for("gradcheck"))
    x = rng.uniform(0.05, 0.95, (config.train.batch_size, 3) + config.state.state_shape[1:])
    x = x.astype(np.float32)
    draws = draw_iteration(config, 0, (x.shape[0],) + config.state.state_shape)

    def loss_value() -> float:
        # the oracle runs in float64: float32 rounding of the loss alone would
        # dominate a central difference at this step size
        with T.no_grad(), T.precision(np.float64):
            return total_loss(iteration_terms(model, x, draws), config.loss).total

    params = model.trainable()
    with GradientTape():
        report = total_loss(iteration_terms(model, x, draws), config.loss)
        auto = T.backward(report.tensor, params)

    results = []
    for p in params:
        data = p.value.data
        picks = rng.choice(data.size, size=min(coords_per_param, data.size), replace=False)
        fd, ad = [], []
        for flat in picks:
            idx = np.unravel_index(flat, data.shape)
            orig = data[idx]
            data[idx] = orig + eps
            hi, up = float(data[idx]), loss_value()
            data[idx] = orig - eps
            lo, down = float(data[idx]), loss_value()
            data[idx] = orig
            fd.append((up - down) / (hi - lo))
            ad.append(auto[p.name][idx])
        results.append(GradResult(f"loss/{p.name}", relative_error(ad, fd), tol))
    return results


def gradcheck_suite(seed: int = 0) -> list[GradResult]:
    return check_all_ops(seed) + check_full_loss(seed)


