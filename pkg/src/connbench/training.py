"""Mini-batch training, early stopping and random hyperparameter search for the deep models."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import ndcore as nd
from .chebgnn import GnnConfig, GnnModel, normalize_sc, normalized_laplacian, rescale_laplacian
from .dataio import Dataset, compute_fc, zscore_ts
from .evalstats.metrics import joint_loss
from .trfgnn import TrfConfig, TrfGnnModel, structural_eigvecs

DEEP_FAMILIES = ("gnn_fc", "gnn_ts", "trf_gnn")
MODEL_FAMILIES = ("krr",) + DEEP_FAMILIES


class TrainingError(RuntimeError):
    """Every trial diverged; carries the failing (model, modality, fold, trial)."""

    def __init__(self, message: str, model: str = "", modality: str = "", fold: int = -1, trial: int = -1):
        super().__init__(message)
        self.model, self.modality, self.fold, self.trial = model, modality, fold, trial

    def __reduce__(self):
        return (type(self), (str(self), self.model, self.modality, self.fold, self.trial))


@dataclass
class SearchSpace:
    lr: tuple[float, float] = (1e-4, 1.0)
    dropout: tuple[float, float] = (0.05, 0.5)
    n_layers: tuple[int, ...] = (3, 4)
    head_depth: tuple[int, ...] = (5, 6, 7, 8, 9)

    def sample(self, rng: np.random.Generator) -> dict:
        lo, hi = math.log(self.lr[0]), math.log(self.lr[1])
        return {"lr": float(math.exp(rng.uniform(lo, hi))),
                "dropout": float(rng.uniform(*self.dropout)),
                "n_layers": int(rng.choice(self.n_layers)),
                "head_depth": int(rng.choice(self.head_depth))}


@dataclass
class TrainConfig:
    trials: int = 20
    max_epochs: int = 1000
    patience: int = 50
    batch_size: int = 32
    weight_decay: float = 0.01
    cheb_order: int = 3
    hidden: int = 64
    head_width: int = 128
    norm: str = "graph"
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    search: SearchSpace = field(default_factory=SearchSpace)


class PreparedData:
    """Per-dataset model inputs, computed once: rescaled Laplacians, FC, z-scored series, eigvecs."""

    def __init__(self, dataset: Dataset, eig_k: int = 16):
        self.dataset = dataset
        self.eig_k = eig_k
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rescaled = [rescale_laplacian(normalized_laplacian(normalize_sc(s.sc))) for s in dataset.subjects]
        self.lap = np.stack([r.matrix for r in rescaled])
        self.fallbacks = [s.id for s, r in zip(dataset.subjects, rescaled) if r.fallback]
        if self.fallbacks:
            warnings.warn(f"{len(self.fallbacks)} subject(s) used lambda_max = 2 after power iteration "
                          f"stalled (first: {self.fallbacks[0]})", RuntimeWarning)
        self.ts = np.stack([zscore_ts(s.ts) for s in dataset.subjects])
        self.fc = np.stack([compute_fc(s.ts) for s in dataset.subjects])
        self._eig: np.ndarray | None = None

    @property
    def eig(self) -> np.ndarray:
        if self._eig is None:
            k = min(self.eig_k, self.n_regions - 1)
            self._eig = np.stack([structural_eigvecs(s.sc, k) for s in self.dataset.subjects])
        return self._eig

    @property
    def n_regions(self) -> int:
        return self.lap.shape[1]

    @property
    def n_timepoints(self) -> int:
        return self.ts.shape[2]


def build_model(family: str, data: PreparedData, trial: dict, config: TrainConfig, seed: int):
    n = data.n_regions
    width = {"gnn_fc": n, "gnn_ts": data.n_timepoints, "trf_gnn": n}[family]
    gnn = GnnConfig(in_width=width, n_layers=trial["n_layers"], cheb_order=config.cheb_order,
                    hidden=config.hidden, head_depth=trial["head_depth"],
                    head_width=config.head_width, dropout=trial["dropout"], norm=config.norm)
    if family == "trf_gnn":
        # Small graphs have fewer usable eigenvectors; the positional block keeps the token width.
        eig_k = min(data.eig_k, n - 1)
        pos_dim = TrfConfig.pos_dim + data.eig_k - eig_k
        return TrfGnnModel(TrfConfig(n_regions=n, n_timepoints=data.n_timepoints, eig_k=eig_k,
                                     pos_dim=pos_dim, dropout=trial["dropout"], gnn=gnn), seed=seed)
    return GnnModel(gnn, seed=seed)


def forward(family: str, model, data: PreparedData, idx: np.ndarray, training: bool = False,
            rng: np.random.Generator | None = None) -> nd.Tensor:
    lap = data.lap[idx]
    if family == "gnn_fc":
        return model.forward(lap, data.fc[idx], training, rng)
    if family == "gnn_ts":
        return model.forward(lap, data.ts[idx], training, rng)
    if family == "trf_gnn":
        return model.forward(lap, data.ts[idx], data.eig[idx], training, rng)
    raise ValueError(f"unknown deep model family {family!r}")


def predict(family: str, model, data: PreparedData, idx: np.ndarray) -> np.ndarray:
    return forward(family, model, data, np.asarray(idx)).value.reshape(-1)


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    out = [order[i:i + size] for i in range(0, len(order), size)]
    if len(out) > 1 and len(out[-1]) < 2:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


@dataclass
class TrialResult:
    params: dict
    best_val_loss: float
    best_epoch: int
    epochs_run: int
    state: list[np.ndarray] | None
    buffers: dict[str, np.ndarray] | None


def train_trial(family: str, data: PreparedData, train_idx: np.ndarray, y_train: np.ndarray,
                val_idx: np.ndarray, y_val: np.ndarray, trial: dict, config: TrainConfig,
                seed: int, params_subset=None) -> tuple[object, TrialResult]:
    """Train one configuration; keeps the weights of the epoch with the lowest validation loss.

    A non-finite training loss ends the trial with an infinite validation loss.
    """
    model = build_model(family, data, trial, config, seed)
    rng = nd.make_rng(nd.derive_seed(seed, "batches"))
    params = model.parameters() if params_subset is None else params_subset(model)
    opt = nd.AdamW(params, lr=trial["lr"], weight_decay=config.weight_decay)
    best = TrialResult(trial, math.inf, -1, 0, None, None)
    stale = 0
    y_train = np.asarray(y_train, dtype=np.float64)
    for epoch in range(config.max_epochs):
        perm = rng.permutation(len(train_idx))
        diverged = False
        for batch in _batches(perm, config.batch_size):
            out = forward(family, model, data, train_idx[batch], training=True, rng=rng)
            loss = joint_loss(out, y_train[batch], config.loss_weights)
            if not np.isfinite(loss.value).all():
                diverged = True
                break
            opt.zero_grad()
            nd.backward(loss)
            opt.step()
        best.epochs_run = epoch + 1
        if diverged:
            break
        val_pred = predict(family, model, data, val_idx)
        if not np.all(np.isfinite(val_pred)):
            break
        val_loss = float(joint_loss(val_pred, y_val, config.loss_weights).value.item())
        if val_loss < best.best_val_loss:
            best.best_val_loss, best.best_epoch = val_loss, epoch
            best.state = [p.value.copy() for p in model.parameters()]
            best.buffers = {k: v.copy() for k, v in model.buffers().items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best.state is not None:
        for p, v in zip(model.parameters(), best.state):
            p.value = v
        model.set_buffers(best.buffers)
    return model, best


def fit_deep(family: str, data: PreparedData, train_idx, y_train, val_idx, y_val,
             config: TrainConfig, seed: int) -> tuple[object, list[TrialResult]]:
    """Random search over the configured space; returns the model with the best validation loss."""
    train_idx, val_idx = np.asarray(train_idx), np.asarray(val_idx)
    results, best_model, best_loss = [], None, math.inf
    for t in range(config.trials):
        trial_seed = nd.derive_seed(seed, "trial", t)
        trial = config.search.sample(nd.make_rng(trial_seed))
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            model, res = train_trial(family, data, train_idx, y_train, val_idx, y_val,
                                     trial, config, trial_seed)
        results.append(res)
        if res.best_val_loss < best_loss:
            best_model, best_loss = model, res.best_val_loss
    if best_model is None:
        raise TrainingError(f"all {config.trials} trials diverged", model=family,
                            trial=config.trials - 1)
    return best_model, results
