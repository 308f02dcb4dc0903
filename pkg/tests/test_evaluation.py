import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from racflow.evaluation import (compute_metrics, pca_fit, pca_trajectories, psnr_from_mse,
                                roundtrip_eval, step_sweep, write_pca_csv, write_sweep_csv)
from racflow.model import RacModel
from racflow.tensor import ShapeError


def jacobi_eigenvalues(a, sweeps=100):
    """Brute-force cyclic Jacobi rotations; independent of LAPACK."""
    a = np.array(a, dtype=np.float64)
    n = len(a)
    v = np.eye(n)
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off < 1e-15:
            break
        for p in range(n):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta else 1.0
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                r = np.eye(n)
                r[p, p] = r[q, q] = c
                r[p, q], r[q, p] = s, -s
                a = r.T @ a @ r
                v = v @ r
    order = np.argsort(np.diag(a))[::-1]
    return np.diag(a)[order], v[:, order]


def test_metrics_examples(rng):
    x = rng.uniform(0, 0.9, (3, 4, 4))
    m = compute_metrics(x, x)
    assert m.mse == 0 and m.psnr == 99
    m = compute_metrics(x + 0.1, x)
    assert m.mse == pytest.approx(0.01) and m.psnr == pytest.approx(20.0)
    assert compute_metrics(x + 0.1, x) == compute_metrics(x, x + 0.1)
    with pytest.raises(ShapeError):
        compute_metrics(x, x[:2])
    assert psnr_from_mse(1e-12) == 99


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(3, 30), st.integers(1, 8)),
                  elements=st.floats(-10, 10)))
def test_pca_matches_jacobi_oracle(x):
    res = pca_fit(x, 2)
    cov = np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])
    evals, _ = jacobi_eigenvalues(cov)
    evals = np.clip(evals, 0, None)
    np.testing.assert_allclose(res.eigenvalues, evals, atol=1e-6 * max(1, evals.max()))
    if evals.sum() > 1e-9:
        n = min(2, x.shape[1])
        np.testing.assert_allclose(res.explained_ratio[:n], evals[:n] / evals.sum(), atol=1e-6)
    ratio = res.explained_ratio
    assert ratio.sum() <= 1 + 1e-9
    assert np.all(np.diff(ratio) <= 1e-12)


def test_pca_on_a_line_has_unit_first_ratio(rng):
    t = rng.standard_normal(20)
    x = np.stack([2 * t + 1, -t + 3], axis=1)
    res = pca_fit(x, 2)
    assert res.explained_ratio[0] == pytest.approx(1.0, abs=1e-6)
    expected = np.array([2, -1]) / np.sqrt(5)
    np.testing.assert_allclose(np.abs(res.components[0]), np.abs(expected), atol=1e-9)


def _images(model, n=2):
    from racflow.data import load_dataset
    return load_dataset(model.config)[:n]


def test_step_sweep_untrained_identical_across_K(small_config, tmp_path):
    model = RacModel.build(small_config)
    rows = step_sweep(model, _images(model), [1, 2, 4, 8])
    assert len({(m.mse, m.psnr) for _, m in rows}) == 1
    assert len(step_sweep(model, _images(model), [1])) == 1
    write_sweep_csv(tmp_path / "s.csv", rows)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "K,mse,psnr" and len(lines) == 5


def test_roundtrip_eval_zero_field_exact(small_config):
    model = RacModel.build(small_config)
    assert roundtrip_eval(model, _images(model), 4) == 0.0
    model.field.randomize_head(1)
    assert roundtrip_eval(model, _images(model), 4) > 0


def test_pca_trajectories_zero_field_single_point(small_config, tmp_path):
    model = RacModel.build(small_config)
    img = _images(model, 1)[0]
    exp = pca_trajectories(model, img, 5, seed=0, steps=4)
    assert exp.coords.shape == (5, 5, 2)
    for pid in range(5):
        assert np.all(exp.coords[pid] == exp.coords[pid, 0])
    write_pca_csv(tmp_path / "p.csv", exp)
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["pos_id", "step", "t", "pc1", "pc2"] and len(rows) == 1 + 5 * 5
    with pytest.raises(ValueError):
        pca_trajectories(model, img, 65, seed=0)


def test_pca_trajectories_trained_like_field(small_config):
    model = RacModel.build(small_config)
    model.field.randomize_head(2)
    imgs = _images(model, 2)
    exp = pca_trajectories(model, imgs[0], 16, seed=1, steps=3, pool_images=imgs)
    assert exp.coords.shape == (16, 4, 2)
    assert np.all(np.diff(exp.pca.explained_ratio) <= 0)
    assert list(exp.times) == [0, 1 / 3, 2 / 3, 1]
