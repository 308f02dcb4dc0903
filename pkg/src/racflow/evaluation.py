"""Reconstruction metrics, the decode-step sweep, round-trip error and PCA
projection of decoding trajectories."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .integrator import integrate_forward, integrate_reverse, make_uniform_grid
from .model import RacModel
from .state import normalize_image, pad_state
from .tensor import ShapeError, Tensor, no_grad

PSNR_CAP = 99.0


@dataclass(frozen=True)
class Metrics:
    mse: float
    psnr: float


def psnr_from_mse(mse: float) -> float:
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def compute_metrics(x_hat, x) -> Metrics:
    """MSE and PSNR (dB, peak 1) between images in [0, 1]."""
    a = np.asarray(x_hat.data if isinstance(x_hat, Tensor) else x_hat, dtype=np.float64)
    b = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"metrics need equal shapes, got {a.shape} and {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return Metrics(mse, psnr_from_mse(mse))


def _teacher_latents(model: RacModel, images: np.ndarray) -> Tensor:
    return model.teacher.encode(normalize_image(Tensor(images)))


def decode_images(model: RacModel, images: np.ndarray, steps: int) -> np.ndarray:
    with no_grad():
        x_hat, _ = model.decode(_teacher_latents(model, images), steps)
    return x_hat.data


def step_sweep(model: RacModel, images: np.ndarray, steps) -> list[tuple[int, Metrics]]:
    """Mean per-image metrics of teacher-latent decoding for each step count."""
    rows = []
    for K in steps:
        recon = decode_images(model, images, int(K))
        per_image = [compute_metrics(recon[i], images[i]) for i in range(len(images))]
        rows.append((int(K), Metrics(float(np.mean([m.mse for m in per_image])),
                                     float(np.mean([m.psnr for m in per_image])))))
    return rows


def write_sweep_csv(path: str | Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", "mse", "psnr"])
        for K, m in rows:
            w.writerow([K, repr(m.mse), repr(m.psnr)])


def roundtrip_eval(model: RacModel, images: np.ndarray, steps: int) -> float:
    """Mean over images of ||Flow(Flow^-1(s*)) - s*|| / ||s*|| on a noise-free uniform grid."""
    grid = make_uniform_grid(steps)
    with no_grad():
        s_star = pad_state(normalize_image(Tensor(images)), model.spec)
        encoded = integrate_reverse(model.field, s_star, grid).start
        back = integrate_forward(model.field, encoded, grid).end
    diff = (back.data - s_star.data).astype(np.float64).reshape(len(images), -1)
    ref = s_star.data.astype(np.float64).reshape(len(images), -1)
    return float(np.mean(np.linalg.norm(diff, axis=1) / np.linalg.norm(ref, axis=1)))


# -- PCA -------------------------------------------------------------------------

@dataclass
class PcaResult:
    components: np.ndarray  # (n_components, D) unit rows
    eigenvalues: np.ndarray  # all covariance eigenvalues, descending
    explained_ratio: np.ndarray  # (n_components,)
    mean: np.ndarray


def pca_fit(vectors: np.ndarray, n_components: int = 2) -> PcaResult:
    """Covariance eigen-decomposition with eigenvalues sorted descending.

    Component signs are fixed so the largest-magnitude entry is positive.
    """
    X = np.asarray(vectors, dtype=np.float64)
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / max(len(X) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order].T
    n = min(n_components, X.shape[1])
    comps = evecs[:n].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    total = evals.sum()
    ratio = evals[:n] / total if total > 0 else np.zeros(n)
    if n < n_components:
        comps = np.vstack([comps, np.zeros((n_components - n, X.shape[1]))])
        ratio = np.concatenate([ratio, np.zeros(n_components - n)])
    return PcaResult(comps, evals, ratio, mean)


@dataclass
class PcaExport:
    positions: np.ndarray  # (n, 2) sampled (row, col)
    times: np.ndarray  # (K + 1,)
    features: np.ndarray  # (n, K + 1, C_s)
    pca: PcaResult
    coords: np.ndarray  # (n, K + 1, 2)

    def rows(self):
        n, steps = self.coords.shape[:2]
        for pid in range(n):
            for k in range(steps):
                yield pid, k, float(self.times[k]), float(self.coords[pid, k, 0]), \
                    float(self.coords[pid, k, 1])


def pca_trajectories(model: RacModel, image: np.ndarray, n_positions: int, seed: int,
                     steps: int | None = None, pool_images: np.ndarray | None = None) -> PcaExport:
    """Decode ``image`` once and project the per-position state paths onto two components.

    The fit uses the trajectory vectors of this image only, unless
    ``pool_images`` is given, in which case all of their trajectories at the same
    positions are pooled for the fit.
    """
    spec = model.spec
    h, w = spec.height, spec.width
    if not 1 <= n_positions <= h * w:
        raise ValueError(f"n_positions must be in [1, {h * w}], got {n_positions}")
    steps = steps or model.config.train.K
    flat = np.random.default_rng(seed).choice(h * w, size=n_positions, replace=False)
    rows, cols = np.divmod(flat, w)

    def features(img: np.ndarray) -> tuple[np.ndarray, tuple[float, ...]]:
        with no_grad():
            _, traj = model.decode(_teacher_latents(model, img[None]), steps)
        states = np.stack([s.data[0] for s in traj.states])  # K+1, C_s, H, W
        return states[:, :, rows, cols].transpose(2, 0, 1), traj.grid.nodes

    feats, times = features(np.asarray(image))
    fit_on = feats.reshape(-1, spec.channels)
    if pool_images is not None:
        fit_on = np.concatenate([features(im)[0].reshape(-1, spec.channels) for im in pool_images])
    pca = pca_fit(fit_on, 2)
    coords = (feats.astype(np.float64) - pca.mean) @ pca.components.T
    return PcaExport(np.stack([rows, cols], axis=1), np.asarray(times), feats, pca, coords)


def write_pca_csv(path: str | Path, export: PcaExport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pos_id", "step", "t", "pc1", "pc2"])
        for pid, k, t, a, b in export.rows():
            w.writerow([pid, k, repr(t), repr(a), repr(b)])
