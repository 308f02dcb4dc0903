"""State construction: image normalization, channel padding, latent expansion,
RGB projection and downsampling back to latent resolution."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

log = logging.getLogger(__name__)

# overshoot tolerated (and clamped) by lenient normalization
LENIENT_OVERSHOOT = 1e-3


@dataclass(frozen=True)
class StateSpec:
    channels: int = 4  # C_s
    height: int = 32
    width: int = 32
    latent_channels: int = 4  # C
    factor: int = 2  # H / h
    pad_value: float = 0.5

    def __post_init__(self):
        if self.channels < 3:
            raise ValueError(f"state needs at least 3 channels, got {self.channels}")
        if self.latent_channels > self.channels:
            raise ValueError(
                f"latent channels ({self.latent_channels}) exceed state channels ({self.channels})"
            )
        if self.factor < 1 or self.height % self.factor or self.width % self.factor:
            raise ValueError(f"factor {self.factor} must divide {self.height}x{self.width}")
        if not math.isfinite(self.pad_value):
            raise ValueError("pad_value must be finite")

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        f = self.factor
        return (self.latent_channels, self.height // f, self.width // f)

    @property
    def state_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def check_state(self, s: Tensor) -> Tensor:
        if s.shape[-3:] != self.state_shape or s.ndim not in (3, 4):
            raise ShapeError(f"state shape {s.shape} does not match {self.state_shape}")
        return s


def normalize_image(x, strict: bool = True) -> Tensor:
    """Map [0, 1] pixels to [-1, 1].

    In lenient mode (``strict=False``) overshoot up to ``LENIENT_OVERSHOOT`` is
    clamped with a warning; anything larger is always an error.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    lo, hi = float(x.data.min()), float(x.data.max())
    if lo < 0.0 or hi > 1.0:
        over = max(-lo, hi - 1.0)
        if strict or over > LENIENT_OVERSHOOT:
            raise ValueError(f"image values must lie in [0, 1], got range [{lo}, {hi}]")
        log.warning("clamping image overshoot of %.2g into [0, 1]", over)
        x = T.clamp(x, 0.0, 1.0)
    return T.sub(T.scale(x, 2.0), 1.0)


def denormalize_image(x: Tensor) -> Tensor:
    return T.scale(T.add(x, 1.0), 0.5)


def pad_channels(u: Tensor, channels: int, value: float) -> Tensor:
    """Append constant channels to ``u`` up to ``channels`` in total."""
    c = u.shape[-3]
    if c > channels:
        raise ShapeError(f"cannot pad {c} channels into a {channels}-channel state")
    if c == channels:
        return u
    pad_shape = u.shape[:-3] + (channels - c,) + u.shape[-2:]
    return T.concat_channels([u, Tensor(np.full(pad_shape, value))])


def pad_state(u: Tensor, spec: StateSpec) -> Tensor:
    """Append ``pad_value`` channels up to ``spec.channels``."""
    return pad_channels(u, spec.channels, spec.pad_value)


def expand_latent(z: Tensor, spec: StateSpec) -> Tensor:
    """s_0 = upsample(pad(z)): the latent lifted to full state resolution."""
    if z.shape[-2:] != spec.latent_shape[-2:]:
        raise ShapeError(
            f"latent spatial shape {z.shape[-2:]} does not match {spec.latent_shape[-2:]} "
            f"(factor {spec.factor})"
        )
    return spec.check_state(T.upsample_nearest(pad_state(z, spec), spec.factor))


def project_rgb(s: Tensor) -> Tensor:
    """First three state channels mapped back to clamped [0, 1] pixels."""
    if s.shape[-3] < 3:
        raise ShapeError(f"state needs at least 3 channels, got {s.shape}")
    return T.clamp(denormalize_image(T.slice_channels(s, 0, 3)), 0.0, 1.0)


class LearnedProjector:
    """1x1 conv from C_s to C channels followed by average pooling.

    Initialized to select the first C channels, so before training it agrees
    with the parameter-free path.
    """

    def __init__(self, spec: StateSpec):
        self.spec = spec
        c, cs = spec.latent_channels, spec.channels
        w = np.zeros((c, cs, 1, 1), dtype=np.float32)
        w[np.arange(c), np.arange(c), 0, 0] = 1.0
        self.weight = Parameter("projector.weight", Tensor(w))
        self.bias = Parameter("projector.bias", Tensor(np.zeros(c)))

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, s: Tensor) -> Tensor:
        h = T.conv2d(s, self.weight.value, self.bias.value)
        return T.avg_pool2d(h, self.spec.factor)


def down_state(s: Tensor, spec: StateSpec, mode: str = "avg_pool",
               projector: LearnedProjector | None = None) -> Tensor:
    """Reduce a full-resolution state to latent shape ``C x h x w``."""
    spec.check_state(s)
    if mode == "avg_pool":
        return T.avg_pool2d(T.slice_channels(s, 0, spec.latent_channels), spec.factor)
    if mode == "learned":
        if projector is None:
            raise ValueError("down_state mode 'learned' requires trained projector weights")
        return projector(s)
    raise ValueError(f"unknown down_state mode {mode!r}")
