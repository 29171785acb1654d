import csv

import numpy as np
import pytest

from msmamba import autodiff as ad
from msmamba.cli import main, read_config_file
from msmamba.data import load_csv
from msmamba.errors import ConfigError
from msmamba.model import ForecastModel, ModelConfig, cost_report, load_checkpoint, model_forward

TINY = ["--L", "8", "--T", "4", "--d-model", "4", "--d-state", "2", "--scales", "2"]
SYNTH = ["--synthetic", "--synth-length", "300", "--synth-variates", "2"]
FAST = ["--epochs", "2", "--max-steps", "6", "--batch-size", "16", "--lr", "1e-2"]


def rows_of(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("synth", "--out", data, "--synth-length", 300, "--synth-variates", 2, "--synth-seed", 5) == 0
    out = root / "run"
    assert run("train", "--out", out, "--data", data / "synthetic.csv", *TINY, *FAST, "--strategy", "learnable") == 0
    return data / "synthetic.csv", out


def test_train_writes_artifacts(trained):
    _, out = trained
    assert sorted(p.name for p in out.iterdir()) == ["history.csv", "manifest.txt", "model.ckpt", "scales.csv"]
    assert rows_of(out / "scales.csv")[0] == ["step", "scale_1", "scale_2"]
    assert rows_of(out / "history.csv")[0] == ["epoch", "train_mse", "val_mse"]


def test_learnable_smoke_gives_four_scale_columns(tmp_path):
    argv = ["train", "--out", tmp_path, *SYNTH, "--L", 16, "--T", 8, "--d-model", 4, "--d-state", 2]
    assert run(*argv, "--scales", 4, "--strategy", "learnable", "--epochs", 1, "--max-steps", 2) == 0
    assert rows_of(tmp_path / "scales.csv")[0] == ["step", "scale_1", "scale_2", "scale_3", "scale_4"]


def test_fixed_manifest_echoes_alphas(tmp_path, capsys):
    argv = ["train", "--out", tmp_path, *SYNTH, *TINY[:-2], "--scales", 4, "--strategy", "fixed", "--alphas", "1,2,4,8"]
    assert run(*argv, "--epochs", 1, "--max-steps", 1) == 0
    manifest = dict(line.split("=", 1) for line in (tmp_path / "manifest.txt").read_text().splitlines())
    assert tuple(float(a) for a in manifest["alphas"].split(",")) == (1.0, 2.0, 4.0, 8.0)
    assert manifest["strategy"] == "fixed" and manifest["scales"] == "4"
    assert not (tmp_path / "scales.csv").exists()
    assert "scales.csv not written" in capsys.readouterr().out
    model, _ = load_checkpoint(tmp_path / "model.ckpt")
    assert model.config.alphas == (1.0, 2.0, 4.0, 8.0)


def test_manifest_lists_resolved_defaults(trained):
    manifest = dict(line.split("=", 1) for line in (trained[1] / "manifest.txt").read_text().splitlines())
    for key in ("seed", "lr", "batch_size", "patience", "d_state", "dt_min", "split", "unidirectional", "dt_rank"):
        assert key in manifest
    assert "command" not in manifest and "func" not in manifest


def test_missing_data_exits_2(tmp_path, capsys):
    assert run("train", "--out", tmp_path, *TINY) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("msmamba: error=config exit=2 reason=")


def test_unknown_flag_exits_2(tmp_path):
    assert run("train", "--out", tmp_path, "--bogus", 1) == 2


def test_data_error_exits_3(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n3,4\n5,6\nabc,8\n")
    assert run("train", "--out", tmp_path, "--data", bad, *TINY) == 3
    err = capsys.readouterr().err
    assert "error=data exit=3" in err and "row 5" in err


def test_numeric_abort_exits_4(tmp_path, monkeypatch, capsys):
    value, _ = ad.UNARY_RULES["exp"]
    monkeypatch.setitem(ad.UNARY_RULES, "exp", (value, lambda x, y: np.full_like(x, np.inf)))
    assert run("train", "--out", tmp_path, *SYNTH, *TINY, "--epochs", 1, "--max-steps", 1) == 4
    assert "error=numeric exit=4" in capsys.readouterr().err


def test_eval_reproduces_best_val(trained, tmp_path):
    data, out = trained
    _, meta = load_checkpoint(out / "model.ckpt")
    assert run("eval", "--out", tmp_path, "--data", data, "--checkpoint", out / "model.ckpt", "--eval-split", "val") == 0
    rows = rows_of(tmp_path / "metrics.csv")
    assert rows[0] == ["checkpoint", "horizon", "mse", "mae"] and len(rows) == 2
    assert abs(float(rows[1][2]) - meta["best_val_mse"]) <= 1e-12


def test_eval_average_row(trained, tmp_path):
    data, _ = trained
    paths = []
    for horizon in (2, 3, 4, 5):
        out = tmp_path / f"h{horizon}"
        argv = ["train", "--out", out, "--data", data, "--L", 8, "--T", horizon, "--d-model", 4, "--d-state", 2, "--scales", 2]
        assert run(*argv, "--epochs", 1, "--max-steps", 1) == 0
        paths.append(str(out / "model.ckpt"))
    assert run("eval", "--out", tmp_path, "--data", data, "--checkpoint", ",".join(paths), "--denormalized") == 0
    rows = rows_of(tmp_path / "metrics.csv")
    assert len(rows) == 1 + 5
    assert [r[1] for r in rows[1:5]] == ["2", "3", "4", "5"] and rows[5][0] == "Avg"
    for col in range(2, 6):
        assert float(rows[5][col]) == pytest.approx(np.mean([float(r[col]) for r in rows[1:5]]), rel=1e-12)


def test_eval_variate_mismatch_exits_2(trained, tmp_path, capsys):
    _, out = trained
    argv = ["eval", "--out", tmp_path, "--synthetic", "--synth-length", 300, "--synth-variates", 3]
    assert run(*argv, "--checkpoint", out / "model.ckpt") == 2
    err = capsys.readouterr().err
    assert "D=2" in err and "D=3" in err


def test_forecast_round_trip(trained, tmp_path):
    data, out = trained
    raw = load_csv(data)
    model, meta = load_checkpoint(out / "model.ckpt")
    mean, std = np.array(meta["dataset"]["mean"]), np.array(meta["dataset"]["std"])
    for origin in (0, 100, raw.n_timesteps - 8):
        assert run("forecast", "--out", tmp_path, "--data", data, "--checkpoint", out / "model.ckpt", "--origin", origin) == 0
        rows = rows_of(tmp_path / "forecast.csv")
        assert rows[0] == list(raw.names) and len(rows) == 1 + 4
        forecast = np.array(rows[1:], dtype=np.float64)
        expected = model_forward((raw.values[origin : origin + 8] - mean) / std, model).data
        assert np.max(np.abs((forecast - mean) / std - expected)) < 1e-12


def test_forecast_origin_bounds(trained, tmp_path):
    data, out = trained
    last = load_csv(data).n_timesteps - 8
    base = ["forecast", "--out", tmp_path, "--data", data, "--checkpoint", out / "model.ckpt"]
    assert run(*base, "--origin", last) == 0
    first = (tmp_path / "forecast.csv").read_bytes()
    assert run(*base) == 0  # default origin is the last admissible one
    assert (tmp_path / "forecast.csv").read_bytes() == first
    assert run(*base, "--origin", last + 1) == 2
    assert run(*base, "--origin", -1) == 2


def test_train_replay_from_manifest_is_byte_identical(trained, tmp_path):
    _, out = trained
    assert run("train", "--config", out / "manifest.txt", "--out", tmp_path) == 0
    for name in ("model.ckpt", "history.csv", "scales.csv"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nsynthetic=true\nsynth_length=300\nL=8\nT=4\nd-model=4\nd_state=2\nscales=2\nepochs=1\nmax_steps=1\nseed=3\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "o", "--seed", 7) == 0
    manifest = (tmp_path / "o" / "manifest.txt").read_text().splitlines()
    assert "seed=7" in manifest and "L=8" in manifest and "synthetic=True" in manifest


def test_config_file_errors(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("L 8\n")
    with pytest.raises(ConfigError, match="key=value"):
        read_config_file(cfg)
    cfg.write_text("wings=2\n")
    assert run("train", "--config", cfg) == 2
    assert run("train", "--config", tmp_path / "missing.cfg") == 2


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MSMAMBA_OUT", str(tmp_path / "env_out"))
    assert run("synth", "--synth-length", 50) == 0
    assert load_csv(tmp_path / "env_out" / "synthetic.csv").values.shape == (50, 4)


def test_synth_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--out", tmp_path / name, "--synth-length", 200, "--synth-seed", 4) == 0
    assert (tmp_path / "a" / "synthetic.csv").read_bytes() == (tmp_path / "b" / "synthetic.csv").read_bytes()


def test_gradcheck_single_strategy_passes(tmp_path):
    argv = ["gradcheck", "--out", tmp_path, "--strategies", "learnable", "--L", 4, "--T", 2, "--d-model", 4, "--variates", 2]
    assert run(*argv) == 0
    rows = rows_of(tmp_path / "gradcheck.csv")
    assert rows[0] == ["strategy", "group", "max_rel_error", "status"]
    groups = [r[1] for r in rows[1:]]
    assert len(groups) == len(set(groups)) and "scales" in " ".join(groups)
    assert all(r[3] == "ok" for r in rows[1:])


def test_gradcheck_corrupted_rule_exits_5(tmp_path, monkeypatch, capsys):
    value, _ = ad.UNARY_RULES["softplus"]
    monkeypatch.setitem(ad.UNARY_RULES, "softplus", (value, lambda x, y: np.ones_like(x)))
    argv = ["gradcheck", "--out", tmp_path, "--strategies", "fixed", "--L", 4, "--T", 2, "--d-model", 4, "--variates", 2]
    assert run(*argv) == 5
    assert "error=gradcheck exit=5" in capsys.readouterr().err
    assert any(r[3] == "FAIL" for r in rows_of(tmp_path / "gradcheck.csv")[1:])


def test_gradcheck_rejects_large_models(tmp_path):
    assert run("gradcheck", "--out", tmp_path, "--d-model", 256, "--strategies", "fixed") == 2


def test_profile_table(tmp_path):
    argv = ["profile", "--out", tmp_path, "--scales-list", "1,4", "--variates-list", "7,862", "--d-model", 16, "--timing", "--repeats", 1]
    assert run(*argv) == 0
    rows = rows_of(tmp_path / "profile.csv")
    header, body = rows[0], rows[1:]
    assert header[-1] == "forward_ms" and len(body) == 4
    col = {name: i for i, name in enumerate(header)}
    by_key = {(int(r[col["n_scales"]]), int(r[col["n_variates"]])): r for r in body}
    for d in (7, 862):
        assert int(by_key[4, d][col["params"]]) > int(by_key[1, d][col["params"]])
        assert int(by_key[4, d][col["macs"]]) > int(by_key[1, d][col["macs"]])
    assert int(by_key[1, 862][col["macs"]]) > int(by_key[1, 7][col["macs"]])
    for (n, d), row in by_key.items():
        model = ForecastModel.init(ModelConfig(lookback=96, horizon=96, n_variates=d, d_model=16, n_scales=n), 0)
        assert int(row[col["params"]]) == model.num_parameters() == cost_report(model.config).params


def test_sweep_rows_and_reproducibility(tmp_path):
    argv = ["sweep-scales", *SYNTH, *TINY[:-2], "--scales-list", "2,3", "--seeds", "0,1", "--epochs", 1, "--max-steps", 2]
    assert run(*argv, "--out", tmp_path / "a") == 0
    rows = rows_of(tmp_path / "a" / "sweep.csv")
    assert rows[0] == ["n_scales", "seed", "val_mse"] and len(rows) - 1 == 2 * 2 + 2
    assert [r[1] for r in rows[-2:]] == ["median", "median"]
    assert run(*argv, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()
