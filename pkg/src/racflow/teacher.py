"""Frozen teacher autoencoder supplying latent targets and pixel supervision."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import AdamW
from .state import StateSpec, denormalize_image, pad_channels
from .tensor import GradientTape, Parameter, ShapeError, Tensor, no_grad

log = logging.getLogger(__name__)


class TeacherNotReady(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TeacherConfig:
    mode: str = "analytic"  # analytic | learned
    hidden: int = 16
    kl_weight: float = 1e-4
    iterations: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    checkpoint: str = ""

    def __post_init__(self):
        if self.mode not in ("analytic", "learned"):
            raise ValueError(f"unknown teacher mode {self.mode!r}")


def _he(rng: np.random.Generator, c_out: int, c_in: int, k: int, gain: float = 1.0) -> np.ndarray:
    std = gain * math.sqrt(2.0 / (c_in * k * k))
    return (rng.standard_normal((c_out, c_in, k, k)) * std).astype(np.float32)


class Teacher:
    """Encoder/decoder pair. ``analytic`` is pad + pool / upsample; ``learned``
    is a small conv KL autoencoder whose posterior mean is used as the latent."""

    def __init__(self, spec: StateSpec, config: TeacherConfig | None = None, seed: int = 0):
        self.spec = spec
        self.config = config or TeacherConfig()
        self.loaded = self.config.mode == "analytic"
        self.params: dict[str, Parameter] = {}
        if self.config.mode == "learned":
            self._init_learned(np.random.default_rng(seed))

    def _init_learned(self, rng: np.random.Generator) -> None:
        c, hid = self.spec.latent_channels, self.config.hidden
        shapes = {
            "enc0": (hid, 3), "enc1": (hid, hid), "enc2": (2 * c, hid),
            "dec0": (hid, c), "dec1": (hid, hid), "dec2": (3, hid),
        }
        for name, (co, ci) in shapes.items():
            gain = 0.1 if name in ("enc2", "dec2") else 1.0
            self.params[f"teacher.{name}.weight"] = Parameter(
                f"teacher.{name}.weight", Tensor(_he(rng, co, ci, 3, gain)))
            self.params[f"teacher.{name}.bias"] = Parameter(
                f"teacher.{name}.bias", Tensor(np.zeros(co)))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def freeze(self) -> "Teacher":
        for p in self.params.values():
            p.freeze()
        self.loaded = True
        return self

    def _conv(self, x: Tensor, name: str) -> Tensor:
        return T.conv2d(x, self.params[f"teacher.{name}.weight"].value,
                        self.params[f"teacher.{name}.bias"].value)

    def _require(self) -> None:
        if not self.loaded:
            raise TeacherNotReady("learned teacher has no trained weights loaded")

    def posterior(self, x_norm: Tensor) -> tuple[Tensor, Tensor]:
        """Learned mode: (mean, log-variance) of the diagonal Gaussian posterior."""
        h = T.silu(self._conv(x_norm, "enc0"))
        h = T.silu(self._conv(h, "enc1"))
        h = self._conv(T.avg_pool2d(h, self.spec.factor), "enc2")
        c = self.spec.latent_channels
        return T.slice_channels(h, 0, c), T.slice_channels(h, c, 2 * c)

    def encode(self, x_norm: Tensor) -> Tensor:
        """Latent target for a normalized image batch or single image."""
        self._require()
        if x_norm.shape[-3] != 3:
            raise ShapeError(f"teacher expects 3-channel images, got {x_norm.shape}")
        if self.config.mode == "analytic":
            c = self.spec.latent_channels
            u = pad_channels(x_norm, c, self.spec.pad_value) if c >= 3 else T.slice_channels(x_norm, 0, c)
            return T.avg_pool2d(u, self.spec.factor)
        mu, _ = self.posterior(x_norm)
        return mu

    def decode(self, z: Tensor) -> Tensor:
        """Pixels in [0, 1] reconstructed from a latent."""
        self._require()
        if z.shape[-3:] != self.spec.latent_shape:
            raise ShapeError(f"latent shape {z.shape} does not match {self.spec.latent_shape}")
        if self.config.mode == "analytic":
            up = T.upsample_nearest(z, self.spec.factor)
            up = pad_channels(up, max(3, up.shape[-3]), self.spec.pad_value)
            return T.clamp(denormalize_image(T.slice_channels(up, 0, 3)), 0.0, 1.0)
        h = T.silu(self._conv(z, "dec0"))
        h = T.silu(self._conv(T.upsample_nearest(h, self.spec.factor), "dec1"))
        return T.clamp(T.add(self._conv(h, "dec2"), 0.5), 0.0, 1.0)

    def digest(self) -> str:
        """SHA-256 over the teacher's mode, geometry and parameter bytes."""
        h = hashlib.sha256()
        s = self.spec
        h.update(f"{self.config.mode}|{s.latent_channels}|{s.factor}|{s.pad_value!r}".encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].value.data.tobytes())
        return h.hexdigest()


def teacher_pretrain(images: np.ndarray, spec: StateSpec, config: TeacherConfig,
                     seed: int = 0) -> tuple[Teacher, list[float]]:
    """Fit a learned teacher on ``images`` (N x 3 x H x W in [0, 1]), then freeze it.

    Returns the frozen teacher and the per-iteration reconstruction MSE curve.
    """
    if config.mode != "learned":
        raise ValueError("teacher_pretrain only applies to the learned teacher mode")
    teacher = Teacher(spec, config, seed=seed)
    teacher.loaded = True
    opt = AdamW(teacher.parameters(), lr=config.lr, betas=(0.9, 0.99), weight_decay=0.0)
    rng = np.random.default_rng([seed, 7])
    n = images.shape[0]
    bs = min(config.batch_size, n)
    curve: list[float] = []
    for it in range(config.iterations):
        idx = rng.choice(n, size=bs, replace=False)
        x = Tensor(images[idx])
        eps = rng.standard_normal((bs,) + spec.latent_shape).astype(np.float32)
        with GradientTape():
            x_norm = T.sub(T.scale(x, 2.0), 1.0)
            mu, logvar = teacher.posterior(x_norm)
            std = T.exp(T.scale(logvar, 0.5))
            z = T.add(mu, T.mul(std, Tensor(eps)))
            recon = T.reduce_mean_sq(teacher.decode(z), x)
            loss = recon
            if config.kl_weight:
                # KL(N(mu, var) || N(0, 1)) averaged per latent element
                kl_inner = T.sub(T.add(T.mul(mu, mu), T.exp(logvar)), T.add(logvar, 1.0))
                loss = T.add(loss, T.scale(T.mean(kl_inner), 0.5 * config.kl_weight))
            grads = T.backward(loss, teacher.parameters())
        value = float(loss.item())
        if not math.isfinite(value):
            raise DivergenceError(f"teacher pretraining diverged at iteration {it}")
        curve.append(float(recon.item()))
        opt.step(grads)
        if it % 100 == 0:
            log.info("teacher it=%d recon=%.5f loss=%.5f", it, curve[-1], value)
    teacher.freeze()
    if curve:
        with no_grad():
            final = T.reduce_mean_sq(teacher.decode(teacher.encode(
                T.sub(T.scale(Tensor(images), 2.0), 1.0))), Tensor(images)).item()
        log.info("teacher pretraining done: reconstruction MSE %.6f", final)
    return teacher, curve
