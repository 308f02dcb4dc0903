"""Time-conditioned velocity field v(s, t) shared by decoding and encoding."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .state import StateSpec
from .tensor import Parameter, ShapeError, Tensor

GROUP = "field"


@dataclass(frozen=True)
class FieldConfig:
    width: int = 32
    depth: int = 2
    down_factor: int = 2
    use_pos_enc: bool = True
    zero_init_head: bool = True
    kernel: int = 3

    def validate(self, spec: StateSpec) -> None:
        if self.width < spec.channels:
            raise ValueError(f"field width {self.width} smaller than state channels {spec.channels}")
        d = self.down_factor
        if d < 1 or spec.height % d or spec.width % d:
            raise ValueError(f"down_factor {d} must divide {spec.height}x{spec.width}")
        if self.depth < 0:
            raise ValueError("depth must be non-negative")


def coordinate_planes(height: int, width: int) -> np.ndarray:
    """Two planes ramping linearly over [-1, 1] along height and width."""
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy, xx]).astype(np.float32)


def assemble_input(s: Tensor, t: float, use_pos_enc: bool = True) -> Tensor:
    """Concatenate the state, a constant time plane and optional coordinate planes."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time must lie in [0, 1], got {t}")
    lead, (h, w) = s.shape[:-3], s.shape[-2:]
    parts = [s, Tensor(np.full(lead + (1, h, w), t, dtype=np.float32))]
    if use_pos_enc:
        parts.append(Tensor(np.broadcast_to(coordinate_planes(h, w), lead + (2, h, w))))
    return T.concat_channels(parts)


class VelocityField:
    """Hourglass conv net: full-resolution residual blocks, an internal pooled
    stage, upsampling with a skip connection, then a conv head to C_s channels.

    Calling the field as ``field(s, t)`` evaluates the velocity.
    """

    def __init__(self, spec: StateSpec, config: FieldConfig | None = None, seed: int = 0):
        self.spec = spec
        self.config = config or FieldConfig()
        self.config.validate(spec)
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        cfg = self.config
        c_in = spec.channels + 1 + (2 if cfg.use_pos_enc else 0)
        self._add_conv("stem", c_in, cfg.width, rng)
        for i in range(cfg.depth):
            self._add_conv(f"hi{i}", cfg.width, cfg.width, rng)
        for i in range(cfg.depth):
            self._add_conv(f"lo{i}", cfg.width, cfg.width, rng)
        self._add_conv("head", cfg.width, spec.channels, rng, zero=cfg.zero_init_head)

    def _add_conv(self, name: str, c_in: int, c_out: int, rng: np.random.Generator,
                  zero: bool = False) -> None:
        k = self.config.kernel
        if zero:
            w = np.zeros((c_out, c_in, k, k), dtype=np.float32)
        else:
            w = rng.standard_normal((c_out, c_in, k, k)) * math.sqrt(2.0 / (c_in * k * k))
        for suffix, value in (("weight", w), ("bias", np.zeros(c_out))):
            full = f"{GROUP}.{name}.{suffix}"
            self.params[full] = Parameter(full, Tensor(value))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def _conv(self, x: Tensor, name: str) -> Tensor:
        return T.conv2d(x, self.params[f"{GROUP}.{name}.weight"].value,
                        self.params[f"{GROUP}.{name}.bias"].value)

    def __call__(self, s: Tensor, t: float) -> Tensor:
        if s.shape[-3:] != self.spec.state_shape:
            raise ShapeError(f"field expects states of shape {self.spec.state_shape}, got {s.shape}")
        cfg = self.config
        h = T.silu(self._conv(assemble_input(s, t, cfg.use_pos_enc), "stem"))
        for i in range(cfg.depth):
            h = T.add(h, T.silu(self._conv(h, f"hi{i}")))
        skip = h
        h = T.avg_pool2d(h, cfg.down_factor)
        for i in range(cfg.depth):
            h = T.add(h, T.silu(self._conv(h, f"lo{i}")))
        h = T.add(T.upsample_nearest(h, cfg.down_factor), skip)
        return self._conv(h, "head")

    def randomize_head(self, seed: int) -> None:
        """Replace the head with He-scaled random weights (non-identity baseline)."""
        rng = np.random.default_rng(seed)
        w = self.params[f"{GROUP}.head.weight"]
        c_out, c_in, k, _ = w.shape
        w.value.data[...] = rng.standard_normal(w.shape) * math.sqrt(2.0 / (c_in * k * k))

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].value.data.tobytes())
        return h.hexdigest()


def velocity_eval(field, s: Tensor, t: float) -> Tensor:
    return field(s, t)
