import numpy as np
import pytest

from connbench import ndcore, training
from connbench.cli import main, report_labels
from connbench.dataio import load_dataset

GEN = "n_subjects = 40\nn_families = 20\nn_regions = 8\n"
RUN = """[run]
models = {models}
modalities = rest, task_wm
[generator]
n_subjects = 60
n_families = 30
n_regions = 8
[training]
trials = 1
max_epochs = 2
patience = 1
hidden = 8
head_width = 8
[search]
lr_min = 1e-3
lr_max = 1e-2
"""


def write(path, text):
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def krr_bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    cfg = write(root / "run.cfg", RUN.format(models="krr"))
    assert main(["bench", "--config", str(cfg), "--out", str(root / "serial")]) == 0
    return root, cfg


def test_gen_is_deterministic(tmp_path, capsys):
    spec = write(tmp_path / "g.cfg", GEN)
    assert main(["gen", "--spec", str(spec), "--out", str(tmp_path / "a")]) == 0
    assert main(["--seed", "0", "gen", "--spec", str(spec), "--out", str(tmp_path / "b")]) == 0
    assert "subjects=40 families=20 N=8" in capsys.readouterr().out
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 81
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert len(load_dataset(tmp_path / "a")) == 40


def test_gen_seed_flag_changes_data(tmp_path):
    spec = write(tmp_path / "g.cfg", GEN)
    main(["gen", "--spec", str(spec), "--out", str(tmp_path / "a")])
    main(["gen", "--spec", str(spec), "--out", str(tmp_path / "b"), "--seed", "3"])
    a, b = load_dataset(tmp_path / "a"), load_dataset(tmp_path / "b")
    assert not np.array_equal(a.subjects[0].ts, b.subjects[0].ts)


def test_gen_bad_value_exits_2(tmp_path, capsys):
    spec = write(tmp_path / "g.cfg", GEN + "rho = 1.2\n")
    assert main(["gen", "--spec", str(spec), "--out", str(tmp_path / "x")]) == 2
    assert "rho" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_missing_spec_exits_2(tmp_path):
    assert main(["gen", "--spec", str(tmp_path / "none.cfg")]) == 2


def test_bench_writes_reports(krr_bench):
    root, _ = krr_bench
    names = sorted(p.name for p in (root / "serial").iterdir())
    assert names == ["report.csv", "report.md", "report_summary.csv", "stats.csv"]
    head = (root / "serial" / "report.csv").read_text().splitlines()[:2]
    assert head[0].startswith("# fold_plan=") and head[1] == "model,modality,fold,metric,value"


def test_bench_parallel_matches_serial(krr_bench):
    root, cfg = krr_bench
    assert main(["bench", "--config", str(cfg), "--out", str(root / "par"), "--jobs", "2"]) == 0
    for name in ("report.csv", "report_summary.csv", "stats.csv", "report.md"):
        assert (root / "serial" / name).read_bytes() == (root / "par" / name).read_bytes()


def test_stats_recomputes_bench_output(krr_bench, tmp_path):
    root, _ = krr_bench
    assert main(["stats", str(root / "serial" / "report.csv"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "stats.csv").read_bytes() == (root / "serial" / "stats.csv").read_bytes()


def test_stats_self_comparison(krr_bench, tmp_path):
    root, _ = krr_bench
    rep = str(root / "serial" / "report.csv")
    assert main(["stats", rep, rep, "--out", str(tmp_path)]) == 0
    rows = [line.split(",") for line in (tmp_path / "stats.csv").read_text().splitlines()[1:]]
    same = [r for r in rows if r[0] == "model" and r[1].split("@")[0] == r[2].split("@")[0]]
    assert same and all(float(r[6]) == 1.0 for r in same)


def test_stats_rejects_other_fold_plan(krr_bench, tmp_path, capsys):
    root, cfg = krr_bench
    assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "other"), "--seed", "5"]) == 0
    code = main(["stats", str(root / "serial" / "report.csv"), str(tmp_path / "other" / "report.csv"),
                 "--out", str(tmp_path)])
    assert code == 4
    assert "fold plan" in capsys.readouterr().err


def test_bench_config_error_exits_2(tmp_path, capsys):
    cfg = write(tmp_path / "bad.cfg", "[training]\nnorm = layer\n")
    assert main(["bench", "--config", str(cfg)]) == 2
    assert "training.norm" in capsys.readouterr().err


def test_bench_training_failure_exits_3(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(training, "joint_loss", lambda p, t, w=(1, 1, 1): ndcore.scale(ndcore.total(p), np.nan))
    cfg = write(tmp_path / "run.cfg", RUN.format(models="gnn_fc"))
    assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    err = capsys.readouterr().err
    assert "model=gnn_fc" in err and "modality=rest" in err and "fold=0" in err


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_gradcheck_catches_broken_rule(monkeypatch, capsys):
    monkeypatch.setattr(ndcore, "_relu_backward", lambda g, a: (g * (a > 0) * 1.5,))
    assert main(["gradcheck"]) == 1
    out = capsys.readouterr().out
    assert "FAIL relu" in out and "worst offender" in out


def test_report_labels():
    from pathlib import Path
    assert report_labels([Path("a/x.csv"), Path("b/y.csv")]) == ["x", "y"]
    assert report_labels([Path("a/r.csv"), Path("b/r.csv")]) == ["a/r", "b/r"]
    assert report_labels([Path("a/r.csv"), Path("a/r.csv")]) == ["a/r#1", "a/r#2"]
