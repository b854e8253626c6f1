from pathlib import Path

import pytest

from connbench.config import load_run_config, parse_run_config
from connbench.dataio import ConfigError, GeneratorConfig


def test_defaults():
    cfg = parse_run_config("")
    assert cfg.models == ["krr", "gnn_fc", "gnn_ts", "trf_gnn"]
    assert [m.name for m in cfg.modalities] == ["rest", "task_wm"]
    assert cfg.training.trials == 20 and cfg.training.search.lr == (1e-4, 1.0)
    assert len(cfg.krr.lambdas) == 16 and cfg.folds == 10


def test_sections_are_applied():
    cfg = parse_run_config("""
[run]
models = krr, gnn_fc
modalities = rest, task_lang
seed = 7
[generator]
n_subjects = 60
n_families = 30
[modality.task_lang]
snr = 3.5
[training]
trials = 2
loss_weights = 1, 0.5, 2
[search]
lr_max = 1e-2
n_layers = 3
[krr]
lambda_count = 4
""")
    rest, lang = cfg.modalities
    assert cfg.models == ["krr", "gnn_fc"] and cfg.seed == 7
    assert rest.generator.n_subjects == 60 and lang.generator.snr == 3.5
    assert lang.generator.modality == "task_lang"
    assert cfg.training.loss_weights == (1.0, 0.5, 2.0)
    assert cfg.training.search.lr == (1e-4, 1e-2) and cfg.training.search.n_layers == (3,)
    assert len(cfg.krr.lambdas) == 4


def test_generator_follows_run_seed():
    cfg = parse_run_config("[run]\nseed = 11\nmodalities = rest\n[generator]\nn_subjects = 20\nn_families = 10\n")
    assert cfg.datasets()["rest"].subjects == parse_run_config(
        "[run]\nmodalities = rest\n[generator]\nn_subjects = 20\nn_families = 10\nseed = 11\n").datasets()["rest"].subjects


@pytest.mark.parametrize("text,key", [
    ("[run]\nmodels = svm", "run.models"),
    ("[run]\nmodels = krr, krr", "run.models"),
    ("[run]\njobs = 0", "run.jobs"),
    ("[run]\nfolds = x", "run.folds"),
    ("[run]\ncolour = red", "run.colour"),
    ("[plots]\nx = 1", "plots"),
    ("[modality.rest]\nrho = 1.2", "modality.rest.rho"),
    ("[modality.fmri]\nsnr = 1", "modality.fmri"),
    ("[modality.rest]\nwidth = 3", "modality.rest.width"),
    ("[generator]\nwidth = 3", "generator.width"),
    ("[training]\nnorm = layer", "training.norm"),
    ("[training]\nbatch_size = 1", "training.batch_size"),
    ("[training]\nloss_weights = 1, 1", "training.loss_weights"),
    ("[search]\nlr_min = 0", "search.lr_min"),
    ("[search]\nhead_depth = 4", "search.head_depth"),
    ("[krr]\nlambda_count = 0", "krr.lambda_count"),
    ("[run\n", "file"),
])
def test_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as info:
        parse_run_config(text)
    assert info.value.key == key
    assert str(info.value).startswith(key)


def test_path_modality(tmp_path):
    with pytest.raises(ConfigError, match="modality.rest.path"):
        parse_run_config("[modality.rest]\npath = nowhere", tmp_path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="no such file"):
        load_run_config(tmp_path / "absent.cfg")


def test_generator_spec_without_header(tmp_path):
    p = tmp_path / "g.cfg"
    p.write_text("n_subjects = 40\nn_families = 20\nrho = 0.5\n")
    assert GeneratorConfig.from_file(p) == GeneratorConfig(n_subjects=40, n_families=20, rho=0.5)


def test_shipped_acceptance_config_parses():
    path = Path(__file__).resolve().parents[1] / "configs" / "acceptance.cfg"
    cfg = load_run_config(path)
    assert cfg.models == ["krr", "gnn_fc", "gnn_ts", "trf_gnn"]
    assert all(m.generator.n_subjects == 300 and m.generator.n_regions == 30 for m in cfg.modalities)
