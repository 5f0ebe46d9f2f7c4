import math

import numpy as np
import pytest
import torch

import symlab.trainer as trainer
from symlab.model import GenerativeModel, load_checkpoint
from symlab.renderer import generate_dataset, get_object, save_dataset
from symlab.trainer import (
    NonFiniteLossError,
    SweepReport,
    TrainConfig,
    TrainingCurve,
    beta_sweep,
    format_config,
    parse_config_text,
    train,
)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_dataset(get_object("cylinder"), 40, seed=0, width=16)


def tiny_model(seed=0):
    torch.manual_seed(seed)
    return GenerativeModel(latent_dim=2, resolution=16, channels=(4, 4, 8, 8), hidden=16, transition_hidden=16)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta=0.001)
    with pytest.raises(ValueError):
        TrainConfig(beta=2000)
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step")


def test_config_text_round_trip():
    cfg = TrainConfig(beta=2.5, steps=10, seed=3, dataset="data/x", out=None, deterministic=False)
    assert parse_config_text(format_config(cfg)) == cfg


def test_config_text_parsing():
    cfg = parse_config_text("# comment\nbeta = 4   # inline\n\nsteps=7\nlr_schedule = constant\n")
    assert cfg.beta == 4.0 and cfg.steps == 7 and cfg.lr_schedule == "constant"
    with pytest.raises(ValueError, match="unknown key"):
        parse_config_text("gamma = 1")
    with pytest.raises(ValueError, match="expected"):
        parse_config_text("beta 1")
    with pytest.raises(ValueError):
        parse_config_text("deterministic = maybe")


def test_curve_steps_strictly_increasing():
    c = TrainingCurve()
    c.append(0, 1, 1, 0)
    with pytest.raises(ValueError):
        c.append(0, 1, 1, 0)


def test_schedules():
    cfg = TrainConfig(beta=2.0, steps=100, kl_warmup=0.5)
    assert trainer._beta_at(cfg, 0) == pytest.approx(2.0 / 50)
    assert trainer._beta_at(cfg, 25) == pytest.approx(1.0)
    assert trainer._beta_at(cfg, 60) == 2.0
    assert trainer._lr_at(cfg, 0) == pytest.approx(cfg.lr)
    assert trainer._lr_at(cfg, 50) == pytest.approx(cfg.lr / 2)
    assert trainer._lr_at(cfg.replace(lr_schedule="constant"), 99) == cfg.lr


def test_tiny_run_reduces_loss(tiny_ds):
    cfg = TrainConfig(beta=1.0, steps=200, batch_size=8, seed=0, eval_interval=100, latent_dim=2, eval_pairs=32)
    _, curve = train(cfg, tiny_ds, tiny_model())
    assert curve.steps == [0, 100, 200]
    assert curve.loss[-1] < curve.loss[0]
    for loss, acc, comp in zip(curve.loss, curve.accuracy, curve.complexity):
        assert loss == pytest.approx(acc + cfg.beta * comp, rel=1e-6)


def test_same_seed_bit_identical(tiny_ds):
    cfg = TrainConfig(beta=0.5, steps=30, batch_size=4, seed=5, eval_interval=10, latent_dim=2, eval_pairs=8)
    m1, c1 = train(cfg, tiny_ds, tiny_model())
    m2, c2 = train(cfg, tiny_ds, tiny_model())
    for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
        assert torch.equal(a, b)
    assert c1 == c2
    m3, _ = train(cfg.replace(seed=6), tiny_ds, tiny_model())
    assert any(not torch.equal(a, b) for a, b in zip(m1.state_dict().values(), m3.state_dict().values()))


def test_checkpoint_and_dataset_path(tmp_path, tiny_ds):
    save_dataset(tiny_ds, tmp_path / "ds")
    cfg = TrainConfig(steps=5, batch_size=4, eval_interval=5, latent_dim=4, eval_pairs=8,
                      dataset=str(tmp_path / "ds"), out=str(tmp_path / "ck"), beta=3.0)
    model, _ = train(cfg)
    back, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["beta"] == 3.0 and manifest["object"] == "cylinder"
    assert manifest["training_config"]["steps"] == 5
    for a, b in zip(model.state_dict().values(), back.state_dict().values()):
        assert torch.equal(a, b)


def test_missing_dataset_and_resolution_mismatch(tmp_path, tiny_ds):
    with pytest.raises(FileNotFoundError):
        train(TrainConfig(steps=1, dataset=str(tmp_path / "nope")))
    with pytest.raises(ValueError):
        train(TrainConfig(steps=1))
    with pytest.raises(ValueError):
        train(TrainConfig(steps=1), tiny_ds, GenerativeModel(resolution=32))


def test_non_finite_loss_aborts(monkeypatch, tiny_ds):
    real = trainer.free_energy_loss
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        loss, acc, comp = real(*args, **kwargs)
        calls["n"] += 1
        if calls["n"] > 3:
            return loss * math.nan, acc, comp
        return loss, acc, comp

    monkeypatch.setattr(trainer, "free_energy_loss", flaky)
    cfg = TrainConfig(steps=10, batch_size=4, eval_interval=10, latent_dim=2, eval_pairs=4)
    with pytest.raises(NonFiniteLossError) as info:
        train(cfg, tiny_ds, tiny_model())
    assert info.value.step == 3 and "loss" in info.value.terms


def test_self_pairs(tiny_ds):
    cfg = TrainConfig(steps=3, batch_size=4, eval_interval=3, latent_dim=2, eval_pairs=4, self_pair_fraction=0.5)
    train(cfg, tiny_ds, tiny_model())
    with pytest.raises(ValueError):
        TrainConfig(self_pair_fraction=1.0)


SWEEP_KW = dict(train_views=30, eval_views=20, resolution=16)


def _base():
    return TrainConfig(steps=6, batch_size=4, eval_interval=3, latent_dim=4, eval_pairs=8, seed=1)


def test_beta_sweep_shape_and_replay(tmp_path):
    obj = get_object("cylinder")
    rep = beta_sweep(obj, [0.25, 1, 10, 100], _base(), out=tmp_path / "a", **SWEEP_KW)
    assert len(rep.rows) == 4 and all(r.status == "ok" for r in rep.rows)
    for r in rep.rows:
        assert len(r.complexity_values) == 900 and len(r.symmetry_scores) == 900
        assert not math.isnan(r.median_complexity + r.symmetry_pct + r.top2_variance_ratio + r.recon_mse)
        assert r.orbit_symmetry_scores
    lines = (tmp_path / "a" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "beta,median_complexity,symmetry_pct,top2_variance_ratio,recon_mse"
    assert len(lines) == 5
    assert (tmp_path / "a" / "beta_0.25" / "manifest.json").is_file()
    again = beta_sweep(obj, [0.25, 1, 10, 100], _base(), out=tmp_path / "b", **SWEEP_KW)
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()
    loaded = SweepReport.load(tmp_path / "a" / "sweep.json")
    assert loaded.to_csv() == rep.to_csv()
    # threshold calibrated on the lowest beta: 5% of its pairs fall below it, up to ties
    assert rep.threshold == pytest.approx(np.percentile(rep.rows[0].symmetry_scores, 5))


def test_beta_sweep_records_failures(monkeypatch):
    real = trainer.train

    def failing(cfg, *args, **kwargs):
        if cfg.beta == 10:
            raise NonFiniteLossError(4, {"loss": math.nan})
        return real(cfg, *args, **kwargs)

    monkeypatch.setattr(trainer, "train", failing)
    rep = beta_sweep(get_object("cube"), [1, 10, 50], _base(), threshold="fixed", **SWEEP_KW)
    assert [r.status == "ok" for r in rep.rows] == [True, False, True]
    assert "non-finite" in rep.rows[1].status
    assert rep.threshold == 300.0 and rep.rows[0].orbit_symmetry_scores == []
    assert "nan" in rep.to_csv().splitlines()[2]


def test_beta_sweep_rejects_bad_grid():
    with pytest.raises(ValueError):
        beta_sweep(get_object("cube"), [1.0], _base(), **SWEEP_KW)
    with pytest.raises(ValueError):
        beta_sweep(get_object("cube"), [10, 1], _base(), **SWEEP_KW)
