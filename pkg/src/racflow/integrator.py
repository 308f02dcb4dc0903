"""Explicit Euler integration of the flow in both time directions."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from . import tensor as T
from .state import StateSpec, down_state, expand_latent, normalize_image, pad_state, project_rgb
from .tensor import Tensor

Field = Callable[[Tensor, float], Tensor]


class FlowError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    nodes: tuple[float, ...]

    def __post_init__(self):
        n = self.nodes
        if len(n) < 2 or n[0] != 0.0 or n[-1] != 1.0:
            raise ValueError(f"time grid must run from 0 to 1, got {n}")
        if any(b <= a for a, b in zip(n[:-1], n[1:])):
            raise ValueError(f"time grid must be strictly increasing, got {n}")

    @property
    def K(self) -> int:
        return len(self.nodes) - 1

    @property
    def deltas(self) -> tuple[float, ...]:
        return tuple(b - a for a, b in zip(self.nodes[:-1], self.nodes[1:]))


@dataclass
class Trajectory:
    grid: TimeGrid
    states: list[Tensor]
    direction: str = "forward"

    @property
    def start(self) -> Tensor:
        return self.states[0]

    @property
    def end(self) -> Tensor:
        return self.states[-1]


@dataclass(frozen=True)
class IntegrationOptions:
    K: int = 4
    noise_sigma: float = 0.0
    random_grid: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"need at least one Euler step, got K={self.K}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def make_uniform_grid(K: int) -> TimeGrid:
    if K < 1:
        raise ValueError(f"need at least one Euler step, got K={K}")
    # k / K computed exactly, endpoints pinned
    return TimeGrid(tuple(k / K for k in range(K + 1)))


def sample_random_grid(K: int, rng: np.random.Generator) -> TimeGrid:
    """Sorted uniform interior nodes; draws that collide or hit 0 are redrawn."""
    if K < 1:
        raise ValueError(f"need at least one Euler step, got K={K}")
    while True:
        inner = np.sort(rng.uniform(0.0, 1.0, K - 1))
        nodes = (0.0, *map(float, inner), 1.0)
        if all(b > a for a, b in zip(nodes[:-1], nodes[1:])):
            return TimeGrid(nodes)


def make_grid(options: IntegrationOptions, rng: np.random.Generator | None = None) -> TimeGrid:
    if options.random_grid:
        return sample_random_grid(options.K, rng or np.random.default_rng(options.rng_seed))
    return make_uniform_grid(options.K)


def _check(s: Tensor, step: int, direction: str) -> None:
    if not np.isfinite(s.data).all():
        raise FlowError(f"non-finite state at {direction} step {step}")


def integrate_forward(field: Field, s0: Tensor, grid: TimeGrid, noise_sigma: float = 0.0,
                      rng: np.random.Generator | None = None,
                      noise: list[np.ndarray] | None = None) -> Trajectory:
    """s_{k+1} = s_k + dt_k * v(s_k, t_k) [+ sigma * eps_k].

    Noise is drawn from ``rng`` unless pre-drawn standard normals are passed in
    ``noise`` (one array per step), which makes the pass exactly repeatable.
    """
    states = [s0]
    s = s0
    for k, (t, dt) in enumerate(zip(grid.nodes[:-1], grid.deltas)):
        s = T.add(s, T.scale(field(s, t), dt))
        if noise_sigma > 0:
            if noise is not None:
                eps = noise[k]
            else:
                if rng is None:
                    raise ValueError("step noise requested without an rng")
                eps = rng.standard_normal(s.shape).astype(np.float32)
            s = T.add(s, Tensor(noise_sigma * eps))
        _check(s, k, "forward")
        states.append(s)
    return Trajectory(grid, states, "forward")


def integrate_reverse(field: Field, sK: Tensor, grid: TimeGrid, noise_sigma: float = 0.0,
                      rng: np.random.Generator | None = None) -> Trajectory:
    """Descending sweep s_k = s_{k+1} - dt_k * v(s_{k+1}, t_{k+1}).

    States are returned in time order (index 0 is the encoded start).
    """
    states = [sK]
    s = sK
    for k in reversed(range(grid.K)):
        dt = grid.nodes[k + 1] - grid.nodes[k]
        s = T.sub(s, T.scale(field(s, grid.nodes[k + 1]), dt))
        if noise_sigma > 0:
            if rng is None:
                raise ValueError("step noise requested without an rng")
            s = T.add(s, Tensor(noise_sigma * rng.standard_normal(s.shape)))
        _check(s, k, "reverse")
        states.append(s)
    states.reverse()
    return Trajectory(grid, states, "reverse")


def decode(field: Field, z: Tensor, spec: StateSpec, steps: int = 4) -> tuple[Tensor, Trajectory]:
    """Latent -> image via a noise-free forward pass on the uniform grid."""
    traj = integrate_forward(field, expand_latent(z, spec), make_uniform_grid(steps))
    return project_rgb(traj.end), traj


def encode(field: Field, x: Tensor, spec: StateSpec, steps: int = 4, mode: str = "avg_pool",
           projector=None) -> tuple[Tensor, Trajectory]:
    """Image in [0, 1] -> latent via the reversed flow."""
    s_star = pad_state(normalize_image(x), spec)
    traj = integrate_reverse(field, s_star, make_uniform_grid(steps))
    return down_state(traj.start, spec, mode, projector), traj
