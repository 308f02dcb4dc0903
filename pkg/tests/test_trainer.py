import numpy as np
import pytest

from racflow import tensor as T
from racflow import trainer
from racflow.checkpoint import load_checkpoint
from racflow.data import load_dataset
from racflow.model import RacModel
from racflow.state import expand_latent, normalize_image, pad_state
from racflow.teacher import TeacherConfig, teacher_pretrain
from racflow.tensor import GradientTape, Tensor
from racflow.trainer import (TeacherChanged, batch_indices, draw_iteration, from_checkpoint,
                             iteration_terms, make_optimizer, to_checkpoint, train_iteration,
                             train_loop)


def test_iteration_zero_by_hand(small_config):
    cfg = small_config.override({"train.noise_sigma": 0.0})
    model = RacModel.build(cfg)
    x = load_dataset(cfg)[:2]
    draws = draw_iteration(cfg, 0, (2,) + cfg.state.state_shape)
    terms = iteration_terms(model, x, draws)
    assert terms["latent"].item() == 0
    x_norm = normalize_image(x)
    s0 = expand_latent(model.teacher.encode(x_norm), cfg.state)
    expected = T.reduce_mean_sq(s0, pad_state(x_norm, cfg.state)).item()
    assert terms["recon"].item() == expected
    assert terms["rt"].item() == 0
    assert "mv" not in terms


def test_iteration_zero_with_step_noise(small_config):
    model = RacModel.build(small_config)
    x = load_dataset(small_config)[:2]
    draws = draw_iteration(small_config, 0, (2,) + small_config.state.state_shape)
    terms = iteration_terms(model, x, draws)
    x_norm = normalize_image(x)
    s_end = expand_latent(model.teacher.encode(x_norm), small_config.state).data.astype(np.float64)
    s_end = s_end + small_config.train.noise_sigma * np.sum(draws.noise, axis=0)
    expected = np.mean((s_end - pad_state(x_norm, small_config.state).data) ** 2)
    assert terms["recon"].item() == pytest.approx(expected, rel=1e-5)


def test_mv_term_present_when_weighted(small_config):
    cfg = small_config.override({"loss.mv": 0.5})
    model = RacModel.build(cfg)
    model.field.randomize_head(1)
    x = load_dataset(cfg)[:2]
    report = train_iteration(model, make_optimizer(model), x, 0)
    assert report.mv > 0


def test_deterministic_replay(small_config, tmp_path):
    images = load_dataset(small_config)
    a = train_loop(images, small_config, tmp_path / "a")
    b = train_loop(images, small_config, tmp_path / "b")
    assert [r.row() for r in a.history] == [r.row() for r in b.history]
    assert (tmp_path / "a/train_log.csv").read_bytes() == (tmp_path / "b/train_log.csv").read_bytes()
    assert (tmp_path / "a/ckpt_final.rack").read_bytes() == (tmp_path / "b/ckpt_final.rack").read_bytes()
    assert (tmp_path / "a/ckpt_000002.rack").exists()


def test_zero_iterations_checkpoint_is_initialization(small_config, tmp_path):
    cfg = small_config.override({"train.iterations": 0})
    result = train_loop(load_dataset(cfg), cfg, tmp_path)
    fresh = to_checkpoint(RacModel.build(cfg), make_optimizer(RacModel.build(cfg)), 0)
    saved = load_checkpoint(tmp_path / "ckpt_final.rack")
    assert set(saved.tensors) == set(fresh.tensors)
    for name, arr in fresh.tensors.items():
        assert saved.tensors[name].tobytes() == arr.tobytes()
    assert result.history == []
    assert (tmp_path / "train_log.csv").read_text().count("\n") == 1


def test_resume_is_bit_identical(small_config, tmp_path):
    cfg = small_config.override({"train.iterations": 4, "train.checkpoint_every": 0})
    images = load_dataset(cfg)
    straight = train_loop(images, cfg, tmp_path / "straight")

    half = cfg.override({"train.iterations": 2})
    train_loop(images, half, tmp_path / "split")
    model, state, start = from_checkpoint(load_checkpoint(tmp_path / "split/ckpt_final.rack"), cfg)
    assert start == 2
    opt = make_optimizer(model)
    opt.state = state
    resumed = train_loop(images, cfg, tmp_path / "split", model=model, optimizer=opt, start=start)

    for a, b in zip(straight.model.trainable(), resumed.model.trainable()):
        assert a.value.data.tobytes() == b.value.data.tobytes()
        assert straight.optimizer.state.m[a.name].tobytes() == resumed.optimizer.state.m[b.name].tobytes()
    assert straight.optimizer.state.step == resumed.optimizer.state.step == 4
    assert (tmp_path / "straight/train_log.csv").read_bytes() == \
        (tmp_path / "split/train_log.csv").read_bytes()


def test_teacher_digest_unchanged_by_training(small_config):
    cfg = small_config.override({"teacher.mode": "learned", "teacher.hidden": 4,
                                 "teacher.iterations": 2})
    images = load_dataset(cfg)
    teacher, _ = teacher_pretrain(images, cfg.state, cfg.teacher, seed=0)
    model = RacModel.build(cfg, teacher)
    before = teacher.digest()
    result = train_loop(images, cfg, model=model)
    assert teacher.digest() == before == result.checkpoint.teacher_digest
    assert all(p.name.startswith("field.") for p in make_optimizer(model).params)


def test_teacher_change_fails_the_run(small_config, monkeypatch):
    cfg = small_config.override({"teacher.mode": "learned", "teacher.hidden": 4,
                                 "teacher.iterations": 1})
    images = load_dataset(cfg)
    teacher, _ = teacher_pretrain(images, cfg.state, cfg.teacher, seed=0)
    model = RacModel.build(cfg, teacher)
    real = trainer.train_iteration

    def tampering(model, optimizer, x, iteration):
        model.teacher.parameters()[0].value.data[...] += 1e-3
        return real(model, optimizer, x, iteration)
    monkeypatch.setattr(trainer, "train_iteration", tampering)
    with pytest.raises(TeacherChanged):
        train_loop(images, cfg, model=model)


def test_learned_down_mode_trains_projector(small_config):
    cfg = small_config.override({"train.down_mode": "learned"})
    model = RacModel.build(cfg)
    before = model.projector.weight.value.data.copy()
    train_iteration(model, make_optimizer(model), load_dataset(cfg)[:2], 0)
    assert not np.array_equal(before, model.projector.weight.value.data)


def test_diverging_field_stops_training(small_config):
    model = RacModel.build(small_config)
    x = load_dataset(small_config)[:2].copy()
    model.field.params["field.head.bias"].value.data[...] = np.float32(1e38)
    model.field.params["field.head.weight"].value.data[...] = 0
    with np.errstate(all="ignore"), pytest.raises(FloatingPointError, match="step"):
        train_iteration(model, make_optimizer(model), x, 0)


def test_batch_indices_cover_each_epoch(small_config):
    cfg = small_config.override({"data.count": 8, "train.batch_size": 3})
    seen = np.concatenate([batch_indices(cfg, 8, it) for it in range(2)])
    assert len(seen) == 6 and len(set(seen.tolist())) == 6
    assert np.array_equal(batch_indices(cfg, 8, 5), batch_indices(cfg, 8, 5))


def test_encode_and_decode_share_parameters(small_config):
    model = RacModel.build(small_config)
    model.field.randomize_head(4)
    names = [p.name for p in model.field.parameters()]
    x = load_dataset(small_config)[:1]
    z = model.teacher.encode(normalize_image(x))
    with GradientTape():
        g_dec = T.backward(T.mean(model.decode(z, 2)[0]), model.field.parameters())
    with GradientTape():
        g_enc = T.backward(T.mean(model.encode(Tensor(x), 2)[0]), model.field.parameters())
    assert list(g_dec) == list(g_enc) == names
    for n in names:
        assert np.any(g_dec[n] != 0) and np.any(g_enc[n] != 0), n
    groups = to_checkpoint(model).groups()
    assert groups.count("field") == 1
