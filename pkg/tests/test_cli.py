import json

import pytest

from nsrobust import cli
from nsrobust.cli import default_config, flatten, run_cli


def test_gradcheck_passes_on_fresh_build(capsys):
    assert run_cli(["gradcheck", "--arch", "mlp", "--seed", "7", "--cases", "2000"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out


def test_help_lists_every_config_key(capsys):
    with pytest.raises(SystemExit) as info:
        run_cli(["train", "--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for key, value in flatten(default_config()).items():
        assert f"{key} = {json.dumps(value)}" in out


def test_defaults_follow_training_protocol():
    cfg = cli.load_run_config()
    tcfg = cli.train_cfg(cfg)
    assert (tcfg.epochs, tcfg.lr, tcfg.batch_size) == (50, 0.001, 128)
    assert (tcfg.loss.beta1, tcfg.loss.beta2) == (0.2, 0.5)
    assert cli.pgd_cfg(cfg).steps == 100


def test_flags_override_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"arch": "cnn", "train": {"epochs": 5, "loss": {"kind": "loss1"}}}))
    cfg = cli.load_run_config(str(path), ["train.epochs=7", "seed=3"])
    assert (cfg["arch"], cfg["train"]["epochs"], cfg["seed"]) == ("cnn", 7, 3)
    assert cli.train_cfg(cfg).seed == 3 and cli.method_name(cfg) == "loss1"


@pytest.mark.parametrize("argv", [
    ["train", "--set", "train.bogus=1"],
    ["train", "--set", "arch=rnn"],
    ["train", "--set", "eps_grid=[0.1,0.2]"],
    ["train", "--threads", "0"],
    ["frobnicate"],
])
def test_validation_errors_exit_1_with_one_line(argv, capsys):
    assert run_cli(argv) == 1
    err = capsys.readouterr().err.strip()
    assert "\n" not in err and err.startswith("nsrobust: error: ")


def test_unknown_key_in_config_file(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"lossy": 1}}))
    assert run_cli(["train", "--config", str(path)]) == 1
    assert "train.lossy" in capsys.readouterr().err


def test_threads_env_fallback(monkeypatch):
    monkeypatch.setenv("NSR_THREADS", "3")
    assert cli.resolve_threads(None) == 3
    assert cli.resolve_threads(2) == 2


def test_missing_data_is_a_validation_error(tmp_path):
    assert run_cli(["train", "--set", f'data_dir="{tmp_path}"', "--out", str(tmp_path / "r")]) == 1


def test_training_divergence_exits_2(tmp_path, monkeypatch, capsys):
    from nsrobust.errors import TrainingError

    def boom(*a, **k):
        raise TrainingError("loss diverged at epoch 1, batch 0", checkpoint="x.json")

    monkeypatch.setattr(cli, "train", boom)
    data = tmp_path / "data"
    run_cli(["synth", "--out", str(tmp_path / "raw"), "--per-class", "20"])
    run_cli(["prepare", "--train-csv", str(tmp_path / "raw/mitbih_train.csv"),
             "--test-csv", str(tmp_path / "raw/mitbih_test.csv"), "--out", str(data)])
    assert run_cli(["train", "--set", f'data_dir="{data}"', "--out", str(tmp_path / "r")]) == 2
    assert "last good checkpoint: x.json" in capsys.readouterr().err


def test_pipeline_end_to_end(tmp_path):
    raw, data, runs, reports, figs = (str(tmp_path / d) for d in ("raw", "data", "runs", "reports", "figs"))
    assert run_cli(["synth", "--out", raw, "--per-class", "60"]) == 0
    assert run_cli(["prepare", "--train-csv", f"{raw}/mitbih_train.csv", "--test-csv",
                    f"{raw}/mitbih_test.csv", "--out", data, "--seed", "1"]) == 0
    common = ["--set", f'data_dir="{data}"', "--set", "train.epochs=2", "--set", "mlp_widths=[187,16,5]",
              "--set", "eps_grid=[0,0.05,0.1]", "--threads", "1"]
    for kind in ("ce", "loss2"):
        assert run_cli(["train", *common, "--set", f'train.loss.kind="{kind}"', "--out", f"{runs}/{kind}"]) == 0
        assert run_cli(["attack", *common, "--model", f"{runs}/{kind}/model.json", "--set", "pgd.steps=3",
                        "--out", reports + "/"]) == 0
    assert run_cli(["attack", *common, "--model", f"{runs}/loss2/model.json", "--method", "spsa",
                    "--set", "spsa.iterations=2", "--set", "spsa.pairs=8", "--set", "eval_per_class=2",
                    "--out", reports + "/"]) == 0
    meta = json.loads((tmp_path / "reports" / "mlp_loss2_pgd3.json").read_text())
    assert meta["seed"] == 0 and meta["run_config_digest"]
    run = json.loads((tmp_path / "runs" / "loss2" / "run.json").read_text())
    assert run["config"]["train"]["loss"]["kind"] == "loss2" and run["config_digest"]
    assert run_cli(["report", "--in", reports, "--out", figs]) == 0
    names = {p.name for p in (tmp_path / "figs").iterdir()}
    assert {"mlp_compare_pgd3.csv", "mlp_compare_pgd3_ACC.svg", "mlp_compare_spsa_PREC.svg",
            "mlp_ce_pgd3.csv", "mlp_loss2_pgd3_N_waveforms.svg"} <= names


def test_report_on_empty_dir_is_validation_error(tmp_path):
    assert run_cli(["report", "--in", str(tmp_path), "--out", str(tmp_path / "o")]) == 1


def test_sweep_picks_a_grid_value(tmp_path):
    raw, data = str(tmp_path / "raw"), str(tmp_path / "data")
    run_cli(["synth", "--out", raw, "--per-class", "30"])
    run_cli(["prepare", "--train-csv", f"{raw}/mitbih_train.csv", "--test-csv", f"{raw}/mitbih_test.csv",
             "--out", data])
    argv = ["sweep", "--set", f'data_dir="{data}"', "--set", 'train.loss.kind="loss1"', "--set", "train.epochs=1",
            "--set", "sweep_betas=[0.1,0.3]", "--set", "pgd.steps=2", "--set", "mlp_widths=[187,8,5]",
            "--out", str(tmp_path / "sw")]
    assert run_cli(argv) == 0
    result = json.loads((tmp_path / "sw" / "sweep.json").read_text())
    assert result["key"] == "beta1" and result["best"] in (0.1, 0.3)
    assert run_cli(argv[:3] + ["--set", 'train.loss.kind="ce"']) == 1
