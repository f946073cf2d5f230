import csv
import filecmp
from dataclasses import replace

import numpy as np
import pytest

from droploss import cli, experiment
from droploss.experiment import ConfigError, dump_config, parse_config
from droploss.gradcheck import VARIANTS


@pytest.fixture
def config_file(tmp_path, tiny_config):
    path = tmp_path / "tiny.txt"
    path.write_text(dump_config(replace(tiny_config, out=str(tmp_path / "runs"))))
    return path


RUN_FILES = ["config.txt", "trainlog.csv", "ledger.csv", "params_final.npz", "params_early.npz",
             "eval.csv", "grad_origin.csv", "bg_scores.csv"]


def test_config_roundtrip(tiny_config):
    assert parse_config(dump_config(tiny_config)) == tiny_config


def test_config_defaults_from_empty_file():
    assert parse_config("# nothing\n") == experiment.ExperimentConfig()


def test_config_lambda_alias_and_comments():
    cfg = parse_config("loss.rule = eql   # tail weighting\nloss.lambda = 0.01\nrun.seeds = 3,4\n")
    assert cfg.loss.rule == "eql" and cfg.loss.lam == "0.01" and cfg.seeds == (3, 4)


@pytest.mark.parametrize("text,line", [
    ("loss.rule = eql\nloss.colour = red\n", 2),
    ("synth.feature_dim = 8\nsynth.feature_dim = 9\n", 2),
    ("\n\nschedule.iterations = many\n", 3),
    ("nonsense\n", 1),
    ("bogus.key = 1\n", 1),
])
def test_config_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "x.txt")
    assert info.value.lineno == line
    assert f"x.txt:{line}" in str(info.value)


def test_config_semantic_errors():
    with pytest.raises(ConfigError):
        parse_config("loss.rule = focal\n")
    with pytest.raises(ConfigError):
        parse_config("synth.near_miss_sigma = 0.1\n")
    with pytest.raises(ConfigError):
        parse_config("eval.threshold = 1.5\n")
    with pytest.raises(ConfigError):
        parse_config("schedule.batch_size = 30\n")


def test_train_writes_all_files(config_file, tmp_path, capsys):
    out = tmp_path / "a"
    assert cli.main(["train", "--config", str(config_file), "--seed", "1", "--out", str(out)]) == 0
    for name in RUN_FILES:
        assert (out / name).exists(), name
    assert "tail=" in capsys.readouterr().out


def test_train_droploss_writes_drop_audit(config_file, tmp_path):
    text = config_file.read_text().replace("loss.rule = bce", "loss.rule = droploss")
    config_file.write_text(text)
    out = tmp_path / "d"
    assert cli.main(["train", "--config", str(config_file), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "drop_audit.csv")))
    assert [r["bin"] for r in rows] == ["rare", "common", "freq"]
    header = (out / "trainlog.csv").read_text().splitlines()[0]
    assert "rare_keep_rate" in header and "mu_tail" in header


def test_train_unknown_key_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("loss.rule = bce\nmodel.depth = 3\n")
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert "bad.txt:2" in capsys.readouterr().err


def test_train_missing_config_exit_2(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "nope.txt")]) == 2


def test_train_non_finite_exit_3(config_file, tmp_path, monkeypatch):
    from droploss.model import NonFiniteLoss

    def boom(cfg, seed):
        raise NonFiniteLoss(17, float("nan"))

    monkeypatch.setattr(cli, "run_one", boom)
    assert cli.main(["train", "--config", str(config_file), "--out", str(tmp_path / "x")]) == 3


def _csvs(d):
    return sorted(p.name for p in d.iterdir() if p.suffix in (".csv", ".txt"))


def test_train_byte_identical(config_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        experiment._world.cache_clear()
        assert cli.main(["train", "--config", str(config_file), "--seed", "0", "--out", str(out)]) == 0
    names = _csvs(a)
    assert names == _csvs(b)
    _, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors
    with np.load(a / "params_final.npz") as pa, np.load(b / "params_final.npz") as pb:
        for k in pa.files:
            np.testing.assert_array_equal(pa[k], pb[k])


def test_diagnose_reproduces_outputs(config_file, tmp_path):
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(config_file), "--out", str(run)]) == 0
    before = (run / "trainlog.csv").read_bytes()
    out = tmp_path / "diag"
    assert cli.main(["diagnose", str(run), "--out", str(out)]) == 0
    for name in ("eval.csv", "grad_origin.csv", "bg_scores.csv"):
        assert (out / name).read_bytes() == (run / name).read_bytes()
    assert (run / "trainlog.csv").read_bytes() == before


def test_diagnose_missing_dir(tmp_path):
    assert cli.main(["diagnose", str(tmp_path / "none")]) in (1, 2)


def _pareto(path):
    return list(csv.DictReader(open(path)))


def test_sweep_single_point_for_eql(config_file, tmp_path):
    out = tmp_path / "s"
    assert cli.main(["sweep", "--config", str(config_file), "--family", "eql", "--out", str(out)]) == 0
    rows = _pareto(out / "pareto.csv")
    assert len(rows) == 1 and rows[0]["param"] == "" and rows[0]["seed_count"] == "2"
    assert rows[0]["on_front"] == "1"


def test_sweep_fixed_drop_five_points(config_file, tmp_path):
    out = tmp_path / "s"
    argv = ["sweep", "--config", str(config_file), "--family", "fixed_drop", "--grid", "0,0.25,0.5,0.75,1",
            "--out", str(out)]
    assert cli.main(argv) == 0
    rows = _pareto(out / "pareto.csv")
    assert [float(r["param"]) for r in rows] == [0, 0.25, 0.5, 0.75, 1]
    assert any(r["on_front"] == "1" for r in rows)


def test_sweep_empty_grid_exit_2(config_file):
    assert cli.main(["sweep", "--config", str(config_file), "--family", "beql"]) == 2
    assert cli.main(["sweep", "--config", str(config_file), "--family", "beql", "--grid", ""]) == 2
    assert cli.main(["sweep", "--config", str(config_file), "--family", "focal"]) == 2


def test_sweep_byte_identical_and_jobs_independent(config_file, tmp_path):
    outs = []
    for i, jobs in enumerate(("1", "1", "2")):
        out = tmp_path / f"s{i}"
        argv = ["sweep", "--config", str(config_file), "--family", "beql", "--grid", "2,5",
                "--out", str(out), "--jobs", jobs]
        assert cli.main(argv) == 0
        outs.append((out / "pareto.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_sweep_failed_point_flagged(config_file, tmp_path, monkeypatch):
    real = experiment.run_one

    def flaky(cfg, seed):
        if cfg.loss.keep_prob == 0.5:
            raise RuntimeError("simulated crash")
        return real(cfg, seed)

    monkeypatch.setattr(experiment, "run_one", flaky)
    out = tmp_path / "s"
    argv = ["sweep", "--config", str(config_file), "--family", "fixed_drop", "--grid", "0.25,0.5,1",
            "--out", str(out)]
    assert cli.main(argv) == 0
    rows = _pareto(out / "pareto.csv")
    assert len(rows) == 3
    assert rows[1]["status"].startswith("failed") and rows[1]["on_front"] == "0"
    assert rows[0]["status"] == "ok" and rows[2]["status"] == "ok"


def test_gradcheck_clean_exit_0(capsys):
    assert cli.main(["gradcheck"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if not l.startswith("gradcheck finished")]
    assert [l.split()[0] for l in lines] == [name for name, _ in VARIANTS]


def test_gradcheck_perturbed_exit_1(capsys):
    assert cli.main(["gradcheck", "--perturb", "1e-3", "--perturb-variant", "beql_b5"]) == 1
    err = capsys.readouterr().err
    assert "beql_b5" in err and "cell" in err
    assert "eql " not in err


def test_gradcheck_unknown_perturb_variant():
    assert cli.main(["gradcheck", "--perturb", "1e-3", "--perturb-variant", "nope"]) == 2
