"""Run configuration: an INI-style file with ``[section]`` headers.

Every key is optional. Defaults::

    [run]
    models = krr, gnn_fc, gnn_ts, trf_gnn   ; any subset of the four families
    modalities = rest, task_wm               ; names of the datasets to compare
    seed = 0                                 ; master seed for folds, trials and batches
    jobs = 1                                 ; worker processes
    out = results                            ; output directory
    folds = 10                               ; outer folds

    [generator]                              ; shared synthetic-data keys (see GeneratorConfig)
    n_subjects = 300
    n_regions = 30

    [modality.<name>]                        ; per-modality override
    path = data/rest                         ; load a saved dataset instead of generating
    snr = 0.5                                ; or any generator key

    [training]
    trials = 20
    max_epochs = 1000
    patience = 50
    batch_size = 32
    weight_decay = 0.01
    cheb_order = 3
    hidden = 64
    head_width = 128
    norm = graph                             ; graph, batch or identity
    loss_weights = 1, 1, 1                   ; MAE, MSE, 1 - r

    [search]
    lr_min = 1e-4
    lr_max = 1.0
    dropout_min = 0.05
    dropout_max = 0.5
    n_layers = 3, 4
    head_depth = 5, 6, 7, 8, 9

    [krr]
    lambda_min = 1e-6
    lambda_max = 1e4
    lambda_count = 16
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .chebgnn import NORM_MODES
from .dataio import MODALITIES, ConfigError, Dataset, GeneratorConfig, generate_synthetic, load_dataset
from .evalstats.crossval import KrrConfig
from .training import MODEL_FAMILIES, SearchSpace, TrainConfig


@dataclass
class ModalitySource:
    name: str
    path: Path | None = None
    generator: GeneratorConfig | None = None
    follows_run_seed: bool = False

    def load(self) -> Dataset:
        if self.path is not None:
            return load_dataset(self.path)
        return generate_synthetic(self.generator.resolved())


@dataclass
class RunConfig:
    models: list[str] = field(default_factory=lambda: list(MODEL_FAMILIES))
    modalities: list[ModalitySource] = field(default_factory=list)
    seed: int = 0
    jobs: int = 1
    out: Path = Path("results")
    folds: int = 10
    training: TrainConfig = field(default_factory=TrainConfig)
    krr: KrrConfig = field(default_factory=KrrConfig)

    def datasets(self) -> dict[str, Dataset]:
        for m in self.modalities:
            if m.follows_run_seed:
                m.generator.seed = self.seed
        return {m.name: m.load() for m in self.modalities}


def _split(raw: str) -> list[str]:
    return [part.strip() for part in raw.split(",") if part.strip()]


def _parse(key: str, raw: str, kind):
    try:
        if kind is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return kind(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r}") from None


def _check_keys(section, allowed: set[str], prefix: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{prefix}.{key}", "unknown key")


def _training(section) -> TrainConfig:
    tc = TrainConfig()
    simple = {"trials": int, "max_epochs": int, "patience": int, "batch_size": int,
              "weight_decay": float, "cheb_order": int, "hidden": int, "head_width": int, "norm": str}
    _check_keys(section, set(simple) | {"loss_weights"}, "training")
    for key, kind in simple.items():
        if key in section:
            setattr(tc, key, _parse(f"training.{key}", section[key], kind))
    if "loss_weights" in section:
        w = [_parse("training.loss_weights", x, float) for x in _split(section["loss_weights"])]
        if len(w) != 3:
            raise ConfigError("training.loss_weights", "needs three weights (MAE, MSE, 1 - r)")
        tc.loss_weights = tuple(w)
    if tc.norm not in NORM_MODES:
        raise ConfigError("training.norm", f"must be one of {', '.join(NORM_MODES)}")
    for key in ("trials", "max_epochs", "patience", "batch_size", "hidden", "head_width"):
        if getattr(tc, key) < 1:
            raise ConfigError(f"training.{key}", "must be at least 1")
    if tc.batch_size < 2:
        raise ConfigError("training.batch_size", "must be at least 2 (Pearson needs two samples)")
    return tc


def _search(section) -> SearchSpace:
    keys = {"lr_min", "lr_max", "dropout_min", "dropout_max", "n_layers", "head_depth"}
    _check_keys(section, keys, "search")
    base = SearchSpace()
    lr = (_parse("search.lr_min", section.get("lr_min", str(base.lr[0])), float),
          _parse("search.lr_max", section.get("lr_max", str(base.lr[1])), float))
    dropout = (_parse("search.dropout_min", section.get("dropout_min", str(base.dropout[0])), float),
               _parse("search.dropout_max", section.get("dropout_max", str(base.dropout[1])), float))
    n_layers = tuple(_parse("search.n_layers", x, int) for x in _split(section["n_layers"])) \
        if "n_layers" in section else base.n_layers
    head_depth = tuple(_parse("search.head_depth", x, int) for x in _split(section["head_depth"])) \
        if "head_depth" in section else base.head_depth
    if not 0 < lr[0] <= lr[1]:
        raise ConfigError("search.lr_min", "need 0 < lr_min <= lr_max")
    if not 0 <= dropout[0] <= dropout[1] < 1:
        raise ConfigError("search.dropout_min", "need 0 <= dropout_min <= dropout_max < 1")
    if not n_layers or any(n not in (3, 4) for n in n_layers):
        raise ConfigError("search.n_layers", "layer counts must be 3 or 4")
    if not head_depth or any(not 5 <= h <= 9 for h in head_depth):
        raise ConfigError("search.head_depth", "head depths must lie in 5..9")
    return SearchSpace(lr=lr, dropout=dropout, n_layers=n_layers, head_depth=head_depth)


def _krr(section) -> KrrConfig:
    _check_keys(section, {"lambda_min", "lambda_max", "lambda_count"}, "krr")
    lo = _parse("krr.lambda_min", section.get("lambda_min", "1e-6"), float)
    hi = _parse("krr.lambda_max", section.get("lambda_max", "1e4"), float)
    n = _parse("krr.lambda_count", section.get("lambda_count", "16"), int)
    if not 0 < lo <= hi:
        raise ConfigError("krr.lambda_min", "need 0 < lambda_min <= lambda_max")
    if n < 1:
        raise ConfigError("krr.lambda_count", "must be at least 1")
    return KrrConfig(tuple(float(x) for x in np.logspace(np.log10(lo), np.log10(hi), n)))


def parse_run_config(text: str, base_dir: Path | str = ".") -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError("file", str(err).splitlines()[0]) from None
    base_dir = Path(base_dir)
    known = {"run", "generator", "training", "search", "krr"}
    for name in parser.sections():
        if name not in known and not name.startswith("modality."):
            raise ConfigError(name, "unknown section")

    cfg = RunConfig()
    run = parser["run"] if parser.has_section("run") else {}
    _check_keys(run, {"models", "modalities", "seed", "jobs", "out", "folds"}, "run")
    if "models" in run:
        cfg.models = _split(run["models"])
    for m in cfg.models:
        if m not in MODEL_FAMILIES:
            raise ConfigError("run.models", f"unknown model family {m!r}")
    if not cfg.models or len(set(cfg.models)) != len(cfg.models):
        raise ConfigError("run.models", "needs distinct model families")
    for key in ("seed", "jobs", "folds"):
        if key in run:
            setattr(cfg, key, _parse(f"run.{key}", run[key], int))
    if cfg.jobs < 1:
        raise ConfigError("run.jobs", "must be at least 1")
    if cfg.folds < 2:
        raise ConfigError("run.folds", "must be at least 2")
    if "out" in run:
        cfg.out = base_dir / run["out"]

    names = _split(run["modalities"]) if "modalities" in run else ["rest", "task_wm"]
    if not names or len(set(names)) != len(names):
        raise ConfigError("run.modalities", "needs distinct modality names")
    for section in parser.sections():
        if section.startswith("modality.") and section[len("modality."):] not in names:
            raise ConfigError(section, "modality is not listed in run.modalities")
    shared = dict(parser["generator"]) if parser.has_section("generator") else {}
    try:
        shared_gen = GeneratorConfig.from_mapping(shared)
    except ConfigError as err:
        raise ConfigError(f"generator.{err.key}", err.message) from None
    for name in names:
        section = dict(parser[f"modality.{name}"]) if parser.has_section(f"modality.{name}") else {}
        if "path" in section:
            extra = set(section) - {"path"}
            if extra:
                raise ConfigError(f"modality.{name}.{sorted(extra)[0]}", "cannot combine with path")
            path = base_dir / section["path"]
            if not (path / "manifest.csv").exists():
                raise ConfigError(f"modality.{name}.path", f"no dataset at {path}")
            cfg.modalities.append(ModalitySource(name, path=path))
            continue
        if name not in MODALITIES and "modality" not in section:
            raise ConfigError(f"modality.{name}", f"generated modality must be one of {', '.join(MODALITIES)} "
                              "or set 'modality'")
        try:
            own = GeneratorConfig.from_mapping(section)
        except ConfigError as err:
            raise ConfigError(f"modality.{name}.{err.key}", err.message) from None
        gen = replace(shared_gen, **{f.name: getattr(own, f.name) for f in fields(GeneratorConfig) if f.name in section})
        if "modality" not in section:
            gen.modality = name
        follows = "seed" not in section and "seed" not in shared
        try:
            gen.resolved()
        except ConfigError as err:
            raise ConfigError(f"modality.{name}.{err.key}", err.message) from None
        cfg.modalities.append(ModalitySource(name, generator=gen, follows_run_seed=follows))

    if parser.has_section("training"):
        cfg.training = _training(parser["training"])
    if parser.has_section("search"):
        cfg.training.search = _search(parser["search"])
    if parser.has_section("krr"):
        cfg.krr = _krr(parser["krr"])
    return cfg


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"no such file {path}")
    return parse_run_config(path.read_text(encoding="utf-8"), path.parent)
