"""Training losses and their weighted combination."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .integrator import Field, TimeGrid, Trajectory, integrate_forward, integrate_reverse
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

TERMS = ("recon", "path", "latent", "pixel", "rt", "mv")


@dataclass(frozen=True)
class LossWeights:
    path: float = 0.1
    latent: float = 1.0
    pixel: float = 1.0
    rt: float = 1.0
    mv: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not value >= 0:
                raise ValueError(f"loss weight {f.name} must be non-negative, got {value}")


@dataclass
class LossReport:
    recon: float = 0.0
    path: float = 0.0
    latent: float = 0.0
    pixel: float = 0.0
    rt: float = 0.0
    mv: float = 0.0
    total: float = 0.0
    tensor: Tensor | None = None  # differentiable total, None once detached

    def row(self) -> list[float]:
        return [getattr(self, name) for name in TERMS] + [self.total]


def _zero() -> Tensor:
    return Tensor(np.float32(0.0))


def loss_recon(traj: Trajectory, s_star: Tensor) -> Tensor:
    return T.reduce_mean_sq(traj.end, s_star.detach())


def loss_path(traj: Trajectory, s_star: Tensor) -> Tensor:
    """Mean squared distance of interior states from the straight chord s_0 -> s*."""
    K = len(traj.states) - 1
    if K < 2:
        log.debug("path loss skipped: K=%d has no interior states", K)
        return _zero()
    s0 = traj.states[0]
    gap = T.sub(s_star.detach(), s0)
    total = None
    for k in range(1, K):
        chord = T.add(s0, T.scale(gap, k / K))
        term = T.reduce_mean_sq(traj.states[k], chord)
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / (K - 1))


def loss_latent(z_hat: Tensor, z_teacher: Tensor) -> Tensor:
    return T.reduce_mean_sq(z_hat, z_teacher.detach())


def loss_pixel(teacher, z_hat: Tensor, x: Tensor) -> Tensor:
    """Teacher decoding of the encoded latent against the [0, 1] input image."""
    return T.reduce_mean_sq(teacher.decode(z_hat), x.detach())


def loss_roundtrip(field: Field, s_star: Tensor, grid: TimeGrid, detach_inner: bool = False,
                   encoded: Tensor | None = None) -> Tensor:
    """||Flow(Flow^-1(s*)) - s*||^2 with both passes noise-free on ``grid``.

    ``encoded`` may carry an already computed noise-free Flow^-1(s*) on the same
    grid, saving the inner pass.
    """
    if encoded is None:
        encoded = integrate_reverse(field, s_star, grid).start
    if detach_inner:
        encoded = encoded.detach()
    back = integrate_forward(field, encoded, grid).end
    return T.reduce_mean_sq(back, s_star.detach())


def loss_mean_velocity(field: Field, s_t: Tensor, t: float, eps_t: float = 1e-3) -> Tensor:
    """Match v(s_t, t) to the detached target v - t * dv/dt (central difference in t)."""
    lo, hi = max(0.0, t - eps_t), min(1.0, t + eps_t)
    with no_grad():
        v_bar = field(s_t, t).data
        dv_dt = (field(s_t, hi).data - field(s_t, lo).data) / np.float32(hi - lo)
    target = v_bar - np.float32(t) * dv_dt
    return T.reduce_mean_sq(field(s_t, t), Tensor(target))


def total_loss(terms: dict[str, Tensor], weights: LossWeights) -> LossReport:
    """recon + sum of weighted optional terms; absent terms count as zero."""
    if "recon" not in terms:
        raise KeyError("total loss needs the reconstruction term")
    total = terms["recon"]
    report = LossReport()
    for name in TERMS:
        if name not in terms:
            continue
        value = terms[name].item()
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite value in loss term {name!r}")
        setattr(report, name, value)
        if name == "recon":
            continue
        w = getattr(weights, name)
        if w:
            total = T.add(total, T.scale(terms[name], w))
    report.tensor = total
    report.total = total.item()
    if not math.isfinite(report.total):
        raise FloatingPointError("non-finite total loss")
    return report
