import numpy as np
import pytest

from nsrobust import train as train_mod
from nsrobust.errors import ArgumentError, TrainingError
from nsrobust.losses import LossConfig
from nsrobust.network import build_mlp
from nsrobust.persist import load_model
from nsrobust.synth import synthetic_heartbeats
from nsrobust.train import LOG_COLUMNS, TrainConfig, evaluate_clean, train, with_loss

SMALL = (187, 16, 16, 5)


@pytest.fixture(scope="module")
def beats():
    data = synthetic_heartbeats([60] * 5, seed=0)
    return data.subset(np.arange(240)), data.subset(np.arange(240, 300))


def _run(beats, **loss):
    cfg = TrainConfig(loss=LossConfig(**loss), epochs=2, batch_size=32, seed=4)
    return train(build_mlp(SMALL, seed=1), beats[0], beats[1], cfg)


def _strip(rows):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]


def test_protocol_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.lr, cfg.batch_size) == (50, 0.001, 128)
    assert (cfg.loss.beta1, cfg.loss.beta2) == (0.2, 0.5)
    assert cfg.adv_steps == 10


@pytest.mark.parametrize("kind,key", [("loss1", "beta1"), ("loss2", "beta2")])
def test_zero_weight_runs_match_mse_margin(beats, kind, key):
    m1, log1 = _run(beats, kind=kind, **{key: 0.0})
    m2, log2 = _run(beats, kind="mseMargin")
    assert _strip(log1.rows) == _strip(log2.rows)
    for name in m1.params:
        np.testing.assert_array_equal(m1.params[name], m2.params[name])


def test_training_is_deterministic(beats):
    m1, _ = _run(beats, kind="loss2")
    m2, _ = _run(beats, kind="loss2")
    for name in m1.params:
        np.testing.assert_array_equal(m1.params[name], m2.params[name])


def test_log_and_checkpoints(beats, tmp_path):
    cfg = TrainConfig(loss=LossConfig(kind="ce"), epochs=3, batch_size=32, lr=0.01)
    model, tlog = train(build_mlp(SMALL, seed=2), beats[0], beats[1], cfg, out_dir=str(tmp_path))
    assert [r["epoch"] for r in tlog.rows] == [1, 2, 3]
    assert tlog.rows[-1]["train_loss"] < tlog.rows[0]["train_loss"]
    best = load_model(tmp_path / "best.json")
    assert evaluate_clean(best, beats[1])[0] == pytest.approx(tlog.best_val_acc)
    assert (tmp_path / "last_good.json").exists()
    tlog.write_csv(tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == ",".join(LOG_COLUMNS)


def test_adversarial_training_runs(beats):
    cfg = TrainConfig(loss=LossConfig(kind="adv"), epochs=1, batch_size=64, adv_eps=0.1, adv_steps=2)
    _, tlog = train(build_mlp(SMALL, seed=3), beats[0], beats[1], cfg)
    assert np.isfinite(tlog.rows[0]["train_loss"])


def test_divergence_reports_last_checkpoint(beats, tmp_path, monkeypatch):
    real = train_mod.objective
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        value, grads, stats = real(*args, **kwargs)
        return (float("nan") if calls["n"] > 8 else value), grads, stats

    monkeypatch.setattr(train_mod, "objective", flaky)
    cfg = TrainConfig(loss=LossConfig(kind="ce"), epochs=3, batch_size=32)
    with pytest.raises(TrainingError) as info:
        train(build_mlp(SMALL, seed=2), beats[0], beats[1], cfg, out_dir=str(tmp_path))
    assert info.value.checkpoint == str(tmp_path / "last_good.json")
    assert "epoch 2" in str(info.value)


def test_config_validation():
    with pytest.raises(ArgumentError):
        TrainConfig(epochs=0)
    with pytest.raises(ArgumentError):
        TrainConfig.from_dict({"epochs": 3, "momentum": 0.9})
    cfg = TrainConfig.from_dict({"loss": {"kind": "loss1", "beta1": 0.3}, "epochs": 2})
    assert cfg.loss.beta1 == 0.3
    assert with_loss(cfg, beta1=0.1).loss.beta1 == 0.1
