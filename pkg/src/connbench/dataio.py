"""Subjects, datasets, preprocessing math and the synthetic connectome generator.

On-disk layout of a dataset directory::

    manifest.csv        id,family_id,age,sex,behavior,n_regions,n_timepoints,modality
    sc/<id>.mat64       N×N structural connectivity (fiber-count-like weights)
    ts/<id>.mat64       N×d regional time-series

``.mat64`` files are ``b"CBM1"``, then little-endian uint32 rows and cols,
then rows*cols little-endian float64 values in row-major order.
"""

from __future__ import annotations

import configparser
import csv
import io
import math
import os
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .ndcore import make_rng

MODALITIES = ("rest", "task_wm", "task_lang")
MANIFEST_HEADER = ["id", "family_id", "age", "sex", "behavior", "n_regions", "n_timepoints", "modality"]
MAT_MAGIC = b"CBM1"


class DataError(ValueError):
    pass


class DegenerateSeriesError(DataError):
    pass


class CollinearityError(DataError):
    pass


class ParseError(DataError):
    pass


class ConfigError(ValueError):
    """A configuration value is invalid; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message


# ------------------------------------------------------------------ types

@dataclass(eq=False)
class Subject:
    id: str
    family_id: str
    age: float
    sex: int
    sc: np.ndarray
    ts: np.ndarray
    behavior: float

    def __eq__(self, other) -> bool:
        if not isinstance(other, Subject):
            return NotImplemented
        return (self.id == other.id and self.family_id == other.family_id
                and self.age == other.age and self.sex == other.sex
                and self.behavior == other.behavior
                and np.array_equal(self.sc, other.sc) and np.array_equal(self.ts, other.ts))


@dataclass(eq=False)
class Dataset:
    subjects: list[Subject]
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r}")
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise DataError(f"duplicate subject id {dup!r}")
        if self.subjects:
            n, d = self.n_regions, self.n_timepoints
            for s in self.subjects:
                if s.sc.shape != (n, n) or s.ts.shape != (n, d):
                    raise DataError(f"subject {s.id!r}: sc {s.sc.shape} / ts {s.ts.shape} "
                                    f"inconsistent with N={n}, d={d}")

    @property
    def n_regions(self) -> int:
        return self.subjects[0].sc.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.subjects[0].ts.shape[1]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    def __len__(self) -> int:
        return len(self.subjects)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.modality == other.modality and self.subjects == other.subjects


# ---------------------------------------------------------- preprocessing

def zscore_ts(ts: np.ndarray) -> np.ndarray:
    """Per-region z-score across time with the population (1/d) standard deviation."""
    ts = np.asarray(ts, dtype=np.float64)
    mu = ts.mean(axis=1, keepdims=True)
    sd = ts.std(axis=1, keepdims=True)
    bad = np.flatnonzero(sd[:, 0] <= 1e-12)
    if bad.size:
        raise DegenerateSeriesError(f"region {int(bad[0])} has a constant time-series")
    return (ts - mu) / sd


def compute_fc(ts: np.ndarray) -> np.ndarray:
    """Pearson correlation between every pair of regional time courses."""
    ts = np.asarray(ts, dtype=np.float64)
    if ts.shape[1] < 3:
        raise DegenerateSeriesError(f"need at least 3 time points, got {ts.shape[1]}")
    z = zscore_ts(ts)
    fc = (z @ z.T) / ts.shape[1]
    fc = 0.5 * (fc + fc.T)
    np.fill_diagonal(fc, 1.0)
    return np.clip(fc, -1.0, 1.0)


def vectorize_lower(fc: np.ndarray) -> np.ndarray:
    """Strict lower triangle in row-major order: (1,0), (2,0), (2,1), ..."""
    rows, cols = np.tril_indices(fc.shape[0], k=-1)
    return fc[rows, cols]


def devectorize_lower(vec: np.ndarray, diagonal: float = 1.0) -> np.ndarray:
    p = len(vec)
    n = int(round((1 + math.sqrt(1 + 8 * p)) / 2))
    if n * (n - 1) // 2 != p:
        raise DataError(f"length {p} is not a triangular number")
    out = np.zeros((n, n))
    rows, cols = np.tril_indices(n, k=-1)
    out[rows, cols] = vec
    out[cols, rows] = vec
    np.fill_diagonal(out, diagonal)
    return out


def decile_bins(values: np.ndarray, bins: int = 10) -> np.ndarray:
    """Bin index in ``0..bins-1`` from the empirical quantiles of ``values``."""
    values = np.asarray(values, dtype=np.float64)
    edges = np.quantile(values, np.linspace(0, 1, bins + 1)[1:-1])
    return np.searchsorted(edges, values, side="right")


@dataclass
class TargetTransform:
    """Age/sex residualizer plus standardizer, both fit on training subjects only."""

    coef: np.ndarray  # intercept, age, sex
    mean: float
    std: float
    fitted_on: tuple[str, ...] = field(default_factory=tuple)

    def residualize(self, age, sex, y) -> np.ndarray:
        design = np.column_stack([np.ones(np.size(y)), np.atleast_1d(age), np.atleast_1d(sex)])
        return np.atleast_1d(np.asarray(y, dtype=np.float64)) - design @ self.coef

    def apply(self, age, sex, y) -> np.ndarray:
        return (self.residualize(age, sex, y) - self.mean) / self.std

    def invert_standardization(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def apply_subjects(self, subjects: list[Subject]) -> np.ndarray:
        return self.apply(*_covariates(subjects))

    def residualize_subjects(self, subjects: list[Subject]) -> np.ndarray:
        return self.residualize(*_covariates(subjects))


def _covariates(subjects: list[Subject]):
    return (np.array([s.age for s in subjects], dtype=np.float64),
            np.array([s.sex for s in subjects], dtype=np.float64),
            np.array([s.behavior for s in subjects], dtype=np.float64))


def fit_target_transform(train: list[Subject]) -> TargetTransform:
    """OLS of behavior on [1, age, sex], then mean/std of the training residuals."""
    if len(train) < 3:
        raise DataError(f"need at least 3 training subjects, got {len(train)}")
    age, sex, y = _covariates(train)
    design = np.column_stack([np.ones(len(y)), age, sex])
    if np.linalg.matrix_rank(design) < 3:
        raise CollinearityError("design [1, age, sex] is rank deficient on the training subjects")
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    std = float(resid.std())
    if std <= 1e-12 * max(1.0, float(np.abs(y).max())):
        raise DataError("residualized training targets have zero variance")
    return TargetTransform(coef=coef, mean=float(resid.mean()), std=std,
                           fitted_on=tuple(s.id for s in train))


# -------------------------------------------------------------- generator

MODE_GAIN = 0.5

_MODALITY_DEFAULTS = {
    "rest": {"snr": 0.5, "n_timepoints": 256},
    "task_wm": {"snr": 4.0, "n_timepoints": 128},
    "task_lang": {"snr": 4.0, "n_timepoints": 96},
}


@dataclass
class GeneratorConfig:
    n_subjects: int = 300
    n_regions: int = 30
    n_timepoints: int | None = None
    n_families: int = 150
    rho: float = 0.8
    snr: float | None = None
    modality: str = "rest"
    seed: int = 0
    n_communities: int = 4

    def resolved(self) -> "GeneratorConfig":
        """Fill modality-dependent defaults (task: higher SNR, fewer time points)."""
        if self.modality not in MODALITIES:
            raise ConfigError("modality", f"unknown modality {self.modality!r}")
        defaults = _MODALITY_DEFAULTS[self.modality]
        out = GeneratorConfig(**{f.name: getattr(self, f.name) for f in fields(self)})
        if out.snr is None:
            out.snr = defaults["snr"]
        if out.n_timepoints is None:
            out.n_timepoints = defaults["n_timepoints"]
        out.validate()
        return out

    def validate(self) -> None:
        if self.n_regions < 4:
            raise ConfigError("n_regions", "must be at least 4")
        if self.n_timepoints is not None and self.n_timepoints < 32:
            raise ConfigError("n_timepoints", "must be at least 32")
        if self.n_families < 2:
            raise ConfigError("n_families", "must be at least 2")
        if not (self.n_families <= self.n_subjects <= 4 * self.n_families):
            raise ConfigError("n_families", "family sizes 1-4 cannot sum to n_subjects")
        if not (0.0 <= self.rho < 1.0):
            raise ConfigError("rho", f"must lie in [0, 1) for a stable process, got {self.rho}")
        if self.snr is not None and not self.snr > 0:
            raise ConfigError("snr", "must be positive (inf allowed)")
        if not (1 <= self.n_communities <= self.n_regions):
            raise ConfigError("n_communities", "must lie in [1, n_regions]")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "GeneratorConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(key, "unknown generator key")
            try:
                if key == "modality":
                    kwargs[key] = raw.strip()
                elif key in ("rho", "snr"):
                    kwargs[key] = float(raw)
                else:
                    kwargs[key] = int(raw)
            except ValueError:
                raise ConfigError(key, f"cannot parse {raw!r}") from None
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | os.PathLike, section: str = "generator") -> "GeneratorConfig":
        text = Path(path).read_text(encoding="utf-8")
        parser = configparser.ConfigParser()
        if not text.lstrip().startswith("["):
            text = f"[{section}]\n" + text
        try:
            parser.read_string(text)
        except configparser.Error as err:
            raise ConfigError("file", str(err).splitlines()[0]) from None
        if not parser.has_section(section):
            raise ConfigError(section, "missing section")
        return cls.from_mapping(dict(parser[section]))


def _family_sizes(rng: np.random.Generator, n_subjects: int, n_families: int) -> np.ndarray:
    sizes = np.ones(n_families, dtype=int)
    for _ in range(n_subjects - n_families):
        open_ = np.flatnonzero(sizes < 4)
        sizes[open_[rng.integers(len(open_))]] += 1
    return sizes


def _symmetric_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    z = rng.standard_normal((n, n))
    return (z + z.T) / math.sqrt(2.0)


def stationary_fc(sc: np.ndarray, rho: float) -> np.ndarray:
    """Correlation matrix of the stationary law of x' = rho*W x + noise, W row-normalized SC."""
    w = sc / sc.sum(axis=1, keepdims=True)
    cov = solve_discrete_lyapunov(rho * w, np.eye(len(sc)))
    sd = np.sqrt(np.diag(cov))
    fc = cov / np.outer(sd, sd)
    fc = 0.5 * (fc + fc.T)
    np.fill_diagonal(fc, 1.0)
    return fc


def simulate_ts(rng: np.random.Generator, sc: np.ndarray, rho: float, n_timepoints: int) -> np.ndarray:
    n = len(sc)
    a = rho * sc / sc.sum(axis=1, keepdims=True)
    cov = solve_discrete_lyapunov(a, np.eye(n))
    x = np.linalg.cholesky(0.5 * (cov + cov.T)) @ rng.standard_normal(n)
    noise = rng.standard_normal((n_timepoints, n))
    out = np.empty((n, n_timepoints))
    for t in range(n_timepoints):
        out[:, t] = x
        x = a @ x + noise[t]
    return out


def planted_weights(fc_edges: np.ndarray) -> np.ndarray:
    """Leading principal direction of the between-subject FC variation, sign-fixed."""
    centered = fc_edges - fc_edges.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    w = vt[0]
    return w if w[np.argmax(np.abs(w))] > 0 else -w


def generate_synthetic(config: GeneratorConfig) -> Dataset:
    """Family-structured connectomes with behavior planted in the true FC edges.

    Everything except the time-series length and the noise scale is drawn
    before the time-series, so datasets generated with the same seed but
    different modalities share subjects, families, SC and covariates.
    """
    cfg = config.resolved()
    rng = make_rng(cfg.seed)
    n, n_sub = cfg.n_regions, cfg.n_subjects

    sizes = _family_sizes(rng, n_sub, cfg.n_families)
    family_of = np.repeat(np.arange(cfg.n_families), sizes)
    ages = rng.integers(22, 37, size=n_sub).astype(np.float64)
    sexes = rng.integers(0, 2, size=n_sub)

    community = np.arange(n) * cfg.n_communities // n
    same = community[:, None] == community[None, :]
    template = np.where(same, 3.0, 0.2) * np.exp(_symmetric_noise(rng, n))
    # one shared mode of structural variation, expressed per family and per subject
    mode = _symmetric_noise(rng, n)
    family_load = rng.standard_normal(cfg.n_families)
    ring = np.zeros((n, n))
    idx = np.arange(n)
    ring[idx, (idx + 1) % n] = ring[(idx + 1) % n, idx] = 1.0
    scs = []
    for i in range(n_sub):
        load = family_load[family_of[i]] + 0.5 * rng.standard_normal()
        s = template * np.exp(MODE_GAIN * load * mode + 0.3 * _symmetric_noise(rng, n))
        s = np.maximum(np.round(s), ring)
        np.fill_diagonal(s, 0.0)
        scs.append(s)

    z_noise = rng.standard_normal(n_sub)
    fc_true = np.array([vectorize_lower(stationary_fc(s, cfg.rho)) for s in scs])
    weights = planted_weights(fc_true)
    signal = fc_true @ weights
    spread = signal.std()
    signal = (signal - signal.mean()) / spread if spread > 0 else signal - signal.mean()
    noise_sd = 0.0 if math.isinf(cfg.snr) else math.sqrt(1.0 / cfg.snr)
    behavior = signal + noise_sd * z_noise

    subjects = []
    for i in range(n_sub):
        ts = simulate_ts(rng, scs[i], cfg.rho, cfg.n_timepoints)
        subjects.append(Subject(id=f"sub{i:04d}", family_id=f"fam{family_of[i]:04d}",
                                age=float(ages[i]), sex=int(sexes[i]), sc=scs[i], ts=ts,
                                behavior=float(behavior[i])))
    return Dataset(subjects=subjects, modality=cfg.modality)


# -------------------------------------------------------------------- I/O

def encode_mat64(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    if arr.ndim != 2:
        raise DataError(f"mat64 holds 2-D matrices, got shape {arr.shape}")
    return MAT_MAGIC + struct.pack("<II", *arr.shape) + arr.tobytes()


def decode_mat64(buf: bytes, offset: int = 0, source: str = "<buffer>") -> tuple[np.ndarray, int]:
    """Decode one matrix starting at ``offset``; returns it and the end offset."""
    if buf[offset:offset + 4] != MAT_MAGIC:
        raise ParseError(f"{source}: bad magic at byte {offset}")
    if len(buf) < offset + 12:
        raise ParseError(f"{source}: truncated header at byte {len(buf)}")
    rows, cols = struct.unpack_from("<II", buf, offset + 4)
    start = offset + 12
    end = start + 8 * rows * cols
    if len(buf) < end:
        raise ParseError(f"{source}: truncated data at byte {len(buf)}, expected {end} bytes")
    arr = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=start).reshape(rows, cols)
    return arr.astype(np.float64), end


def write_mat64(path: str | os.PathLike, arr: np.ndarray) -> None:
    atomic_write(path, encode_mat64(arr))


def read_mat64(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_mat64(buf, 0, str(path))
    if end != len(buf):
        raise ParseError(f"{path}: {len(buf) - end} trailing bytes at byte {end}")
    return arr


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a sibling temp file and rename, so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    if isinstance(data, str):
        data = data.encode("utf-8")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    root = Path(path)
    (root / "sc").mkdir(parents=True, exist_ok=True)
    (root / "ts").mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for s in ds.subjects:
        writer.writerow([s.id, s.family_id, repr(float(s.age)), s.sex, repr(float(s.behavior)),
                         ds.n_regions, ds.n_timepoints, ds.modality])
        write_mat64(root / "sc" / f"{s.id}.mat64", s.sc)
        write_mat64(root / "ts" / f"{s.id}.mat64", s.ts)
    atomic_write(root / "manifest.csv", buf.getvalue())


def load_dataset(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"missing manifest {manifest}")
    with open(manifest, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != MANIFEST_HEADER:
        raise ParseError(f"{manifest}: header must be {','.join(MANIFEST_HEADER)}")
    subjects, modalities = [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(MANIFEST_HEADER):
            raise ParseError(f"{manifest}:{lineno}: expected {len(MANIFEST_HEADER)} fields")
        sid, fam, age, sex, beh, n, d, modality = row
        n, d = int(n), int(d)
        for kind, shape in (("sc", (n, n)), ("ts", (n, d))):
            f = root / kind / f"{sid}.mat64"
            if not f.exists():
                raise DataError(f"subject {sid!r}: missing file {f}")
        sc = read_mat64(root / "sc" / f"{sid}.mat64")
        ts = read_mat64(root / "ts" / f"{sid}.mat64")
        if sc.shape != (n, n):
            raise DataError(f"subject {sid!r}: sc is {sc.shape[0]}x{sc.shape[1]}, manifest says N={n}")
        if ts.shape != (n, d):
            raise DataError(f"subject {sid!r}: ts is {ts.shape[0]}x{ts.shape[1]}, manifest says {n}x{d}")
        modalities.add(modality)
        subjects.append(Subject(id=sid, family_id=fam, age=float(age), sex=int(sex),
                                sc=sc, ts=ts, behavior=float(beh)))
    if len(modalities) > 1:
        raise DataError(f"{manifest}: mixed modalities {sorted(modalities)}")
    return Dataset(subjects=subjects, modality=modalities.pop() if modalities else "rest")
