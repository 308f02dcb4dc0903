"""Image sources: a seeded procedural corpus and binary PPM (P6) files."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .config import DatasetSpec, RunConfig, derive_seed

KINDS = ("gradient", "checkerboard", "blobs", "sinusoid")


class PpmError(ValueError):
    pass


class PpmMagicError(PpmError):
    pass


class PpmMaxvalError(PpmError):
    pass


class PpmTruncatedError(PpmError):
    pass


def _gradient(rng, h, w):
    axis = rng.integers(2)
    n = w if axis else h
    ramp = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    plane = np.broadcast_to(ramp[None, :] if axis else ramp[:, None], (h, w))
    flips = rng.integers(2, size=3)
    return np.stack([1.0 - plane if f else plane for f in flips])


def _checkerboard(rng, h, w):
    cell = int(rng.choice([c for c in (2, 4, 8) if c <= max(h, w)] or [1]))
    yy, xx = np.meshgrid(np.arange(h) // cell, np.arange(w) // cell, indexing="ij")
    mask = ((yy + xx) % 2).astype(bool)
    a = rng.uniform(0.0, 0.45, 3)
    b = rng.uniform(0.55, 1.0, 3)
    return np.where(mask[None], a[:, None, None], b[:, None, None])


def _blobs(rng, h, w):
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = np.broadcast_to(rng.uniform(0.0, 0.4, 3)[:, None, None], (3, h, w)).copy()
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        r = rng.uniform(0.12, 0.3)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += rng.uniform(0.2, 0.7, 3)[:, None, None] * bump
    return img


def _sinusoid(rng, h, w):
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    out = []
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.0, 2) * rng.choice([-1, 1], 2)
        phase = rng.uniform(0, 2 * np.pi)
        out.append(0.5 + 0.45 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase))
    return np.stack(out)


_GENERATORS = {"gradient": _gradient, "checkerboard": _checkerboard, "blobs": _blobs,
               "sinusoid": _sinusoid}


def gen_synthetic_image(kind: str, height: int, width: int, seed: int, index: int) -> np.ndarray:
    try:
        gen = _GENERATORS[kind]
    except KeyError:
        raise ValueError(f"unknown synthetic image kind {kind!r}") from None
    rng = np.random.default_rng([seed, index])
    return np.clip(gen(rng, height, width), 0.0, 1.0).astype(np.float32)


def gen_synthetic_batch(spec: DatasetSpec, height: int, width: int, seed: int,
                        indices=None) -> np.ndarray:
    """Images ``indices`` (default: all ``spec.count``) as an N x 3 x H x W array.

    Kinds cycle through ``spec.kinds`` by index.
    """
    if indices is None:
        indices = range(spec.count)
    for kind in spec.kinds:
        if kind not in _GENERATORS:
            raise ValueError(f"unknown synthetic image kind {kind!r}")
    imgs = [gen_synthetic_image(spec.kinds[i % len(spec.kinds)], height, width, seed, i)
            for i in indices]
    return np.stack(imgs)


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def load_ppm(path: str | Path) -> np.ndarray:
    """Binary P6 with maxval 255 -> float32 array 3 x H x W in [0, 1]."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise PpmMagicError(f"{path}: not a binary PPM (magic {raw[:2]!r})")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise PpmTruncatedError(f"{path}: header truncated")
        fields.append(m.group(1))
        pos = m.end()
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise PpmError(f"{path}: malformed header {fields!r}") from None
    if maxval != 255:
        raise PpmMaxvalError(f"{path}: maxval {maxval} unsupported (need 255)")
    pos += 1  # single whitespace byte ends the header
    need = width * height * 3
    body = raw[pos:pos + need]
    if len(body) < need:
        raise PpmTruncatedError(f"{path}: payload has {len(body)} of {need} bytes")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return (pixels.transpose(2, 0, 1) / 255.0).astype(np.float32)


def to_bytes_image(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write a 3 x H x W image in [0, 1] as P6, rounding to the nearest byte."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a 3 x H x W image, got shape {image.shape}")
    _, h, w = image.shape
    body = to_bytes_image(image).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + body)


def load_dataset(config: RunConfig) -> np.ndarray:
    """The configured corpus as N x 3 x H x W float32."""
    spec, st = config.data, config.state
    if spec.source == "synthetic":
        return gen_synthetic_batch(spec, st.height, st.width, derive_seed(config.train.seed, "data"))
    files = sorted(Path(spec.directory).glob("*.ppm"))[:spec.count]
    if not files:
        raise FileNotFoundError(f"no .ppm files in {spec.directory!r}")
    imgs = [load_ppm(f) for f in files]
    for f, img in zip(files, imgs):
        if img.shape != (3, st.height, st.width):
            raise ValueError(f"{f}: shape {img.shape} does not match configured "
                             f"{st.height}x{st.width}")
    return np.stack(imgs)
