"""One-iteration training step, the training loop, and model <-> checkpoint conversion."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import objectives as O
from . import tensor as T
from .checkpoint import Checkpoint, CheckpointShapeError, DigestError, save_checkpoint
from .config import RunConfig, format_value
from .integrator import TimeGrid, integrate_forward, integrate_reverse, make_uniform_grid, \
    sample_random_grid
from .model import RacModel
from .objectives import LossReport
from .optim import AdamW, AdamWState
from .state import expand_latent, normalize_image, pad_state
from .teacher import Teacher
from .tensor import GradientTape, Tensor, no_grad

log = logging.getLogger(__name__)

LOG_HEADER = ["iter", *O.TERMS, "total", "ms"]


class TeacherChanged(RuntimeError):
    pass


@dataclass
class IterationDraws:
    """Random inputs of one iteration, drawn up front so the loss is a pure function."""

    grid: TimeGrid
    noise: list[np.ndarray]
    mv_index: int


def draw_iteration(config: RunConfig, iteration: int, batch_shape: tuple[int, ...]) -> IterationDraws:
    tc = config.train
    rng = np.random.default_rng([config.seed_for("iteration"), iteration])
    grid = sample_random_grid(tc.K, rng) if tc.random_grid else make_uniform_grid(tc.K)
    noise = []
    if tc.noise_sigma > 0:
        noise = [rng.standard_normal(batch_shape).astype(np.float32) for _ in range(tc.K)]
    mv_index = int(rng.integers(0, tc.K)) if tc.K > 1 else 0
    return IterationDraws(grid, noise, mv_index)


def iteration_terms(model: RacModel, x: np.ndarray, draws: IterationDraws) -> dict[str, Tensor]:
    """All loss terms for batch ``x`` (N x 3 x H x W in [0, 1]); records on the active tape."""
    cfg, spec = model.config, model.spec
    tc, weights = cfg.train, cfg.loss
    x_t = Tensor(x)
    x_norm = normalize_image(x_t)
    with no_grad():
        z_teacher = model.teacher.encode(x_norm)
    s0 = expand_latent(z_teacher, spec)
    traj = integrate_forward(model.field, s0, draws.grid, tc.noise_sigma, noise=draws.noise)
    s_star = pad_state(x_norm, spec)
    terms = {"recon": O.loss_recon(traj, s_star), "path": O.loss_path(traj, s_star)}
    encoded = integrate_reverse(model.field, s_star, draws.grid).start
    z_hat = model.down(encoded)
    terms["latent"] = O.loss_latent(z_hat, z_teacher)
    terms["pixel"] = O.loss_pixel(model.teacher, z_hat, x_t)
    # the encoder pass above is noise-free on the same grid, so it doubles as
    # the inner pass of the round trip
    terms["rt"] = O.loss_roundtrip(model.field, s_star, draws.grid, tc.detach_rt_inner,
                                   encoded=encoded)
    if weights.mv > 0:
        k = draws.mv_index
        terms["mv"] = O.loss_mean_velocity(model.field, traj.states[k].detach(),
                                           draws.grid.nodes[k], tc.mv_eps)
    return terms


def make_optimizer(model: RacModel) -> AdamW:
    tc = model.config.train
    return AdamW(model.trainable(), lr=tc.lr, betas=(tc.beta1, tc.beta2),
                 weight_decay=tc.weight_decay)


def train_iteration(model: RacModel, optimizer: AdamW, x: np.ndarray, iteration: int) -> LossReport:
    draws = draw_iteration(model.config, iteration, (x.shape[0],) + model.spec.state_shape)
    with GradientTape():
        terms = iteration_terms(model, x, draws)
        report = O.total_loss(terms, model.config.loss)
        grads = T.backward(report.tensor, model.trainable())
    report.tensor = None
    optimizer.step(grads)
    return report


def batch_indices(config: RunConfig, n_images: int, iteration: int) -> np.ndarray:
    """Seeded per-epoch shuffle; the incomplete final batch is dropped."""
    bs = min(config.train.batch_size, n_images)
    per_epoch = n_images // bs
    epoch, b = divmod(iteration, per_epoch)
    order = np.random.default_rng([config.seed_for("shuffle"), epoch]).permutation(n_images)
    return np.sort(order[b * bs:(b + 1) * bs])


# -- checkpoints ---------------------------------------------------------------

def to_checkpoint(model: RacModel, optimizer: AdamW | None = None, iteration: int = 0) -> Checkpoint:
    tensors = {p.name: p.value.data.copy() for p in model.parameters()}
    meta = {"iteration": iteration, "field_digest": model.field.digest()}
    if optimizer is not None:
        st = optimizer.state
        meta["adamw_step"] = st.step
        for p in optimizer.params:
            tensors[f"adamw.m.{p.name}"] = st.m[p.name].copy()
            tensors[f"adamw.v.{p.name}"] = st.v[p.name].copy()
    config = {k: format_value(v) for k, v in model.config.to_flat().items()}
    return Checkpoint("rac", tensors, config, model.teacher.digest(), meta)


def _copy_into(params, tensors: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in tensors:
            raise CheckpointShapeError(f"checkpoint lacks parameter {p.name!r}")
        arr = tensors[p.name]
        if arr.shape != p.shape:
            raise CheckpointShapeError(
                f"parameter {p.name!r}: checkpoint shape {arr.shape} does not match model {p.shape}")
        p.value.data[...] = arr


def from_checkpoint(ckpt: Checkpoint, config: RunConfig | None = None):
    """Rebuild ``(model, adamw_state, iteration)``; teacher digest is re-verified."""
    if ckpt.kind != "rac":
        raise CheckpointShapeError(f"expected a model checkpoint, got kind {ckpt.kind!r}")
    config = config or RunConfig.from_flat(ckpt.config)
    teacher = Teacher(config.state, config.teacher)
    if config.teacher.mode == "learned":
        _copy_into(teacher.parameters(), ckpt.tensors)
    teacher.freeze()
    if teacher.digest() != ckpt.teacher_digest:
        raise DigestError("teacher digest mismatch between checkpoint header and weights")
    model = RacModel.build(config, teacher)
    _copy_into(model.trainable(), ckpt.tensors)
    state = None
    if "adamw_step" in ckpt.meta:
        state = AdamWState(step=int(ckpt.meta["adamw_step"]))
        for p in model.trainable():
            state.m[p.name] = ckpt.tensors[f"adamw.m.{p.name}"].copy()
            state.v[p.name] = ckpt.tensors[f"adamw.v.{p.name}"].copy()
    return model, state, int(ckpt.meta.get("iteration", 0))


def teacher_checkpoint(teacher: Teacher, config: RunConfig) -> Checkpoint:
    tensors = {p.name: p.value.data.copy() for p in teacher.parameters()}
    cfg = {k: format_value(v) for k, v in config.to_flat().items()}
    return Checkpoint("teacher", tensors, cfg, teacher.digest())


def teacher_from_checkpoint(ckpt: Checkpoint, config: RunConfig) -> Teacher:
    if ckpt.kind != "teacher":
        raise CheckpointShapeError(f"expected a teacher checkpoint, got kind {ckpt.kind!r}")
    teacher = Teacher(config.state, config.teacher)
    _copy_into(teacher.parameters(), ckpt.tensors)
    teacher.freeze()
    if teacher.digest() != ckpt.teacher_digest:
        raise DigestError("teacher digest mismatch")
    return teacher


# -- loop ------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: RacModel
    optimizer: AdamW
    history: list[LossReport] = dc_field(default_factory=list)
    checkpoint: Checkpoint | None = None


def _log_row(it: int, report: LossReport, ms: float) -> list[str]:
    return [str(it)] + [repr(float(v)) for v in report.row()] + [f"{ms:.3f}"]


def train_loop(images: np.ndarray, config: RunConfig, out_dir: str | Path | None = None,
               model: RacModel | None = None, optimizer: AdamW | None = None,
               start: int = 0) -> TrainResult:
    """Train from iteration ``start`` up to ``config.train.iterations`` in total.

    With ``out_dir`` set, writes ``train_log.csv`` (appended when resuming) and
    ``ckpt_*.rack`` files.
    """
    model = model or RacModel.build(config)
    optimizer = optimizer or make_optimizer(model)
    tc = config.train
    digest = model.teacher.digest()
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        fresh = not start or not log_path.exists() or log_path.stat().st_size == 0
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_HEADER)
    result = TrainResult(model, optimizer)

    def checkpoint(it: int, name: str) -> Checkpoint:
        if model.teacher.digest() != digest:
            raise TeacherChanged(f"teacher parameters changed by iteration {it}")
        ckpt = to_checkpoint(model, optimizer, it)
        if out is not None:
            save_checkpoint(out / name, ckpt)
        return ckpt

    try:
        end = max(start, tc.iterations)
        for it in range(start, end):
            t0 = time.perf_counter()
            x = images[batch_indices(config, images.shape[0], it)]
            report = train_iteration(model, optimizer, x, it)
            ms = (time.perf_counter() - t0) * 1e3 if tc.log_timing else 0.0
            result.history.append(report)
            if writer is not None:
                writer.writerow(_log_row(it, report, ms))
            if it % 100 == 0 or it == end - 1:
                log.info("it=%d total=%.5f recon=%.5f rt=%.5f", it, report.total, report.recon,
                         report.rt)
            done = it + 1
            if tc.checkpoint_every and done % tc.checkpoint_every == 0 and done != end:
                checkpoint(done, f"ckpt_{done:06d}.rack")
        result.checkpoint = checkpoint(end, "ckpt_final.rack")
    finally:
        if fh is not None:
            fh.close()
    return result
