"""Acceptance gate: criteria 1-9, one PASS/FAIL line each.

Criterion 6 trains the default configuration for 2000 iterations on one CPU
thread, which takes roughly a quarter of an hour.
"""

import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from racflow import tensor as T
from racflow.checkpoint import from_bytes, load_checkpoint, to_bytes
from racflow.config import RunConfig
from racflow.data import load_dataset
from racflow.evaluation import (pca_fit, pca_trajectories, roundtrip_eval, step_sweep,
                                write_pca_csv, write_sweep_csv)
from racflow.gradcheck import check_all_ops, check_full_loss
from racflow.integrator import integrate_forward, integrate_reverse, make_uniform_grid, \
    sample_random_grid
from racflow.model import RacModel
from racflow.objectives import loss_latent, loss_path, loss_recon, loss_roundtrip
from racflow.state import (StateSpec, down_state, expand_latent, normalize_image, pad_state,
                           project_rgb)
from racflow.tensor import GradientTape, Tensor
from racflow.trainer import from_checkpoint, to_checkpoint, train_loop
from racflow.integrator import Trajectory

from conftest import ConstantField, LinearField, record_criterion, scalar_state
from test_evaluation import jacobi_eigenvalues

SMOOTH = 50
TRAIN_BUDGET_S = 30 * 60


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept")
    config = RunConfig()
    images = load_dataset(config)
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        result = train_loop(images, config, out / "run")
    return config, images, result, out / "run", time.perf_counter() - t0


def random_head_baseline(config, trained, norm_matched):
    """Untrained body with an He-scaled random head, or the trained body with a
    random head rescaled to the trained head's norm."""
    if not norm_matched:
        baseline = RacModel.build(config)
        baseline.field.randomize_head(config.seed_for("baseline-head"))
        return baseline
    baseline, _, _ = from_checkpoint(to_checkpoint(trained), config)
    head = baseline.field.params["field.head.weight"].value.data
    target = np.linalg.norm(head)
    baseline.field.randomize_head(config.seed_for("baseline-head"))
    head *= np.float32(target / np.linalg.norm(head))
    return baseline


def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    results = check_all_ops(0) + check_full_loss(0)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.rel_err)
    ok = all(r.ok for r in results) and elapsed < 60
    record_criterion(1, "gradient oracle", ok,
                     f"{len(results)} checks, worst {worst.name} {worst.rel_err:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_identity_flow_fixed_point():
    config = RunConfig()
    model = RacModel.build(config)
    images = load_dataset(config)
    z = model.teacher.encode(normalize_image(images))
    expected = project_rgb(expand_latent(z, config.state)).data
    same = all(model.decode(z, K)[0].data.tobytes() == expected.tobytes() for K in (1, 2, 4, 8))
    rows = step_sweep(model, images, [1, 2, 4, 8])
    ok = same and len({(m.mse, m.psnr) for _, m in rows}) == 1
    record_criterion(2, "identity-flow fixed point", ok, f"sweep mse {rows[0][1].mse:.6g} for all K")
    assert ok


def test_criterion_3_algebraic_anchors():
    rng = np.random.default_rng(0)
    checks = []
    for _ in range(20):
        s0 = Tensor(rng.standard_normal((4, 3, 3)))
        c = rng.standard_normal((4, 3, 3)).astype(np.float32)
        grid = sample_random_grid(int(rng.integers(1, 9)), rng)
        end = integrate_forward(ConstantField(c), s0, grid).end
        back = integrate_reverse(ConstantField(c), end, grid).start
        checks.append(np.max(np.abs(end.data - s0.data - c)) <= 1e-6)
        checks.append(np.max(np.abs(back.data - s0.data)) <= 1e-6)
    grid = make_uniform_grid(4)
    fwd = integrate_forward(LinearField(), scalar_state(1.0), grid).end
    rt = integrate_reverse(LinearField(), fwd, grid).start.item()
    checks.append(abs(fwd.item() - 2.44140625) <= 1e-6)
    checks.append(abs(rt - 0.7724761962890625) <= 1e-6)
    values = []
    for K in (1, 2, 4, 8, 16, 32):
        g = make_uniform_grid(K)
        values.append(integrate_reverse(LinearField(), integrate_forward(
            LinearField(), scalar_state(1.0), g).end, g).start.item())
    checks.append(all(a < b <= 1 for a, b in zip(values, values[1:])))
    ok = all(checks)
    record_criterion(3, "exact algebraic anchors", ok,
                     f"forward {fwd.item()!r}, round trip {rt!r}, K-sweep {[round(v, 4) for v in values]}")
    assert ok


def test_criterion_4_state_identities():
    rng = np.random.default_rng(1)
    spec = RunConfig().state
    z = Tensor(rng.standard_normal(spec.latent_shape))
    x = rng.uniform(0, 1, (3, spec.height, spec.width)).astype(np.float32)
    s = pad_state(normalize_image(x), spec)
    checks = [
        down_state(expand_latent(z, spec), spec).data.tobytes() == z.data.tobytes(),
        np.max(np.abs(project_rgb(s).data - x)) <= 1e-6,
        bool(np.all(s.data[3] == 0.5)),
        T.avg_pool2d(T.upsample_nearest(z, 2), 2).data.tobytes() == z.data.tobytes(),
    ]
    wide = StateSpec(channels=6, height=8, width=8, latent_channels=6, factor=4)
    zw = Tensor(rng.standard_normal(wide.latent_shape))
    checks.append(down_state(expand_latent(zw, wide), wide).data.tobytes() == zw.data.tobytes())
    ok = all(checks)
    record_criterion(4, "state-operator identities", ok, f"{sum(checks)}/{len(checks)} identities")
    assert ok


def test_criterion_5_loss_fixed_points():
    rng = np.random.default_rng(2)
    config = RunConfig()
    spec = config.state
    s0 = Tensor(rng.standard_normal(spec.state_shape))
    s_star = Tensor(rng.standard_normal(spec.state_shape))
    K = 4
    chord = [Tensor(s0.data + (k / K) * (s_star.data - s0.data)) for k in range(K + 1)]
    traj = Trajectory(make_uniform_grid(K), chord)
    model = RacModel.build(config)
    x = load_dataset(config)[:2]
    x_norm = normalize_image(x)
    encoded = integrate_reverse(model.field, pad_state(x_norm, spec), make_uniform_grid(K)).start
    values = {
        "path": loss_path(traj, s_star).item(),
        "recon": loss_recon(Trajectory(make_uniform_grid(1), [s0, s_star]), s_star).item(),
        "latent": loss_latent(model.down(encoded), model.teacher.encode(x_norm)).item(),
        "rt": loss_roundtrip(ConstantField(rng.standard_normal(spec.state_shape)), s_star,
                             make_uniform_grid(K)).item(),
    }
    ok = all(abs(v) <= 1e-6 for v in values.values())
    record_criterion(5, "loss fixed points", ok, ", ".join(f"{k}={v:.1e}" for k, v in values.items()))
    assert ok


def test_criterion_6_training_trend(default_run):
    config, images, result, out, elapsed = default_run
    totals = np.array([r.total for r in result.history])
    start, end = totals[:SMOOTH].mean(), totals[-SMOOTH:].mean()
    model = result.model
    sweep = dict(step_sweep(model, images, [1, 8]))
    trained_rt = roundtrip_eval(model, images, config.train.K)
    baseline_rt = min(roundtrip_eval(random_head_baseline(config, model, matched), images,
                                     config.train.K) for matched in (False, True))
    parts = {
        "loss": end < 0.5 * start,
        "sweep": sweep[8].mse <= sweep[1].mse,
        "roundtrip": trained_rt < baseline_rt,
        "budget": len(totals) == 2000 and elapsed < TRAIN_BUDGET_S,
    }
    ok = all(parts.values())
    record_criterion(
        6, "training trend", ok,
        f"smoothed total {start:.5f} -> {end:.5f} (ratio {end / start:.3f}); "
        f"mse K=1 {sweep[1].mse:.5f} K=8 {sweep[8].mse:.5f}; "
        f"round trip {trained_rt:.4g} vs lowest random-head baseline {baseline_rt:.4g}; {elapsed / 60:.1f} min"
        + ("" if ok else f"; failed: {[k for k, v in parts.items() if not v]}"))
    assert ok


def test_criterion_7_parameter_sharing(default_run):
    config, images, result, out, _ = default_run
    ckpt = load_checkpoint(out / "ckpt_final.rack")
    model, _, _ = from_checkpoint(ckpt)
    field_groups = [g for g in ckpt.groups() if g == "field"]
    names = [p.name for p in model.field.parameters()]
    z = model.teacher.encode(normalize_image(images[:1]))
    with GradientTape():
        g_dec = T.backward(T.mean(model.decode(z)[0]), model.trainable())
    with GradientTape():
        g_enc = T.backward(T.mean(model.encode(Tensor(images[:1]))[0]), model.trainable())
    touched_dec = {n for n in names if np.any(g_dec[n] != 0)}
    touched_enc = {n for n in names if np.any(g_enc[n] != 0)}
    manifest_field = {e["name"] for e in ckpt.manifest() if e["group"] == "field"}
    ok = (len(field_groups) == 1 and touched_dec == touched_enc == set(names) == manifest_field)
    record_criterion(7, "parameter sharing", ok,
                     f"1 field group, {len(names)} tensors receive encode and decode gradients")
    assert ok


def test_criterion_8_determinism_and_serialization(default_run, tmp_path):
    config, images, result, out, _ = default_run
    short = config.override({"train.iterations": 30, "train.checkpoint_every": 10})
    with threadpool_limits(limits=1):
        train_loop(images, short, tmp_path / "a")
        train_loop(images, short, tmp_path / "b")
    logs_same = (tmp_path / "a/train_log.csv").read_bytes() == (tmp_path / "b/train_log.csv").read_bytes()
    raw = (out / "ckpt_final.rack").read_bytes()
    ckpt_stable = to_bytes(from_bytes(raw)) == raw
    digests = {load_checkpoint(p).teacher_digest for p in sorted(out.glob("ckpt_*.rack"))}
    digest_ok = digests == {result.model.teacher.digest()} and len(list(out.glob("ckpt_*.rack"))) == 4
    ok = logs_same and ckpt_stable and digest_ok
    record_criterion(8, "determinism and serialization", ok,
                     f"logs identical={logs_same}, save-load-save identical={ckpt_stable}, "
                     f"teacher digest constant over {len(list(out.glob('ckpt_*.rack')))} checkpoints={digest_ok}")
    assert ok


def test_criterion_9_export_integrity(default_run, tmp_path):
    config, images, result, out, _ = default_run
    rng = np.random.default_rng(3)
    oracle_ok = True
    for dim in range(1, 9):
        x = rng.standard_normal((40, dim)) @ rng.standard_normal((dim, dim))
        res = pca_fit(x, 2)
        evals, _ = jacobi_eigenvalues(np.cov(x, rowvar=False).reshape(dim, dim))
        evals = np.clip(evals, 0, None)
        n = min(2, dim)
        oracle_ok &= bool(np.allclose(res.eigenvalues, evals, atol=1e-6 * evals.max()))
        oracle_ok &= bool(np.allclose(res.explained_ratio[:n], evals[:n] / evals.sum(), atol=1e-6))
        oracle_ok &= bool(np.all(np.diff(res.explained_ratio) <= 0))
    model = result.model
    export = pca_trajectories(model, images[0], 16, seed=0)
    write_pca_csv(tmp_path / "pca.csv", export)
    steps = [1, 2, 4, 8, 16]
    write_sweep_csv(tmp_path / "sweep.csv", step_sweep(model, images, steps))
    pca_rows = len((tmp_path / "pca.csv").read_text().splitlines()) - 1
    sweep_rows = len((tmp_path / "sweep.csv").read_text().splitlines()) - 1
    ratios_ok = bool(np.all(np.diff(export.pca.explained_ratio) <= 0))
    ok = oracle_ok and ratios_ok and pca_rows == 16 * (config.train.K + 1) and sweep_rows == len(steps)
    record_criterion(9, "export integrity", ok,
                     f"oracle dims 1-8 ok={oracle_ok}, pca rows {pca_rows}, sweep rows {sweep_rows}, "
                     f"ratios {np.round(export.pca.explained_ratio, 4).tolist()}")
    assert ok
