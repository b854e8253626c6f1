"""Chebyshev spectral graph convolutions over structural connectivity.

A :class:`GnnModel` stacks ChebConv layers over the rescaled normalized
Laplacian of a subject's SC graph, pools node embeddings (mean and max,
concatenated) and regresses the standardized behavior score with an MLP.
Node features are either FC rows (``gnn_fc``), z-scored time-series rows
(``gnn_ts``) or a learned FC (see :mod:`connbench.trfgnn`).
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .dataio import Subject, atomic_write, compute_fc, decode_mat64, encode_mat64, zscore_ts
from .ndcore import ShapeError, Tensor

CHECKPOINT_MAGIC = b"CBG1"


class DegreeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# ------------------------------------------------------------ spectral

def normalize_sc(sc: np.ndarray) -> np.ndarray:
    """Scale fiber counts into [0, 1] by the largest edge weight."""
    sc = np.asarray(sc, dtype=np.float64)
    top = sc.max()
    if not top > 0:
        raise DegreeError("structural connectivity is all zero")
    return sc / top


def normalized_laplacian(adjacency: np.ndarray) -> np.ndarray:
    """I - D^-1/2 A D^-1/2; isolated nodes are rejected rather than patched."""
    a = np.asarray(adjacency, dtype=np.float64)
    deg = a.sum(axis=1)
    isolated = np.flatnonzero(deg <= 0)
    if isolated.size:
        raise DegreeError(f"node {int(isolated[0])} has zero degree")
    inv_sqrt = 1.0 / np.sqrt(deg)
    lap = np.eye(len(a)) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    return 0.5 * (lap + lap.T)


def estimate_lambda_max(lap: np.ndarray, tol: float = 1e-6, max_iter: int = 1000) -> tuple[float, bool]:
    """Largest eigenvalue by power iteration; converged once the eigen-residual is below ``tol``.

    Iterates on ``L - I/2``: the spectrum of a connected normalized Laplacian
    tops out above 1, so the shift keeps the top eigenvalue dominant while
    shrinking the ratio that governs convergence.
    """
    n = len(lap)
    shifted = lap - 0.5 * np.eye(n)
    v = nd.make_rng(0).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = lap @ v
        lam = float(v @ w)
        if np.linalg.norm(w - lam * v) <= tol * max(lam, 1e-6):
            return max(lam, 1e-6), True
        u = shifted @ v
        v = u / np.linalg.norm(u)
    return max(lam, 1e-6), False


@dataclass
class RescaledLaplacian:
    matrix: np.ndarray
    lambda_max: float
    fallback: bool = False


def rescale_laplacian(lap: np.ndarray) -> RescaledLaplacian:
    """(2 / lambda_max) L - I; falls back to lambda_max = 2 if power iteration stalls."""
    lam, ok = estimate_lambda_max(lap)
    if not ok:
        warnings.warn("power iteration did not converge; using lambda_max = 2", RuntimeWarning)
        lam = 2.0
    return RescaledLaplacian((2.0 / lam) * lap - np.eye(len(lap)), lam, fallback=not ok)


def cheb_basis(lap_tilde, x, order: int) -> list[Tensor]:
    """[T_0(L~)X, ..., T_K(L~)X] by the three-term recursion, never forming T_k(L~)."""
    if order < 1:
        raise ValueError(f"Chebyshev order must be at least 1, got {order}")
    lt = nd.as_tensor(lap_tilde)
    x = nd.as_tensor(x)
    if lt.shape[-1] != x.shape[-2]:
        raise ShapeError(f"cheb_basis: Laplacian {lt.shape} vs features {x.shape}")
    basis = [x, nd.matmul(lt, x)]
    for _ in range(2, order + 1):
        basis.append(nd.scale(nd.matmul(lt, basis[-1]), 2.0) - basis[-2])
    return basis


# ------------------------------------------------------------- samples

@dataclass
class GraphSample:
    adjacency: np.ndarray
    node_features: np.ndarray
    target: float = 0.0
    _rescaled: RescaledLaplacian | None = field(default=None, repr=False)

    def __post_init__(self):
        a = self.adjacency
        if a.shape[0] != a.shape[1] or not np.allclose(a, a.T, atol=1e-12) or (a < 0).any() \
                or np.any(np.diag(a) != 0):
            raise ValueError("adjacency must be square, symmetric, nonnegative, zero-diagonal")
        if self.node_features.shape[0] != a.shape[0]:
            raise ShapeError(f"{self.node_features.shape[0]} feature rows for {a.shape[0]} nodes")

    @property
    def rescaled(self) -> RescaledLaplacian:
        if self._rescaled is None:
            self._rescaled = rescale_laplacian(normalized_laplacian(self.adjacency))
        return self._rescaled


def build_fc_sample(subject: Subject, target: float = 0.0) -> GraphSample:
    return GraphSample(normalize_sc(subject.sc), compute_fc(subject.ts), target)


def build_ts_sample(subject: Subject, target: float = 0.0) -> GraphSample:
    return GraphSample(normalize_sc(subject.sc), zscore_ts(subject.ts), target)


# -------------------------------------------------------------- layers

NORM_MODES = ("graph", "batch", "identity")


class ChebLayer:
    """sigma(Norm(sum_k T_k(L~) X theta_k)) with K + 1 weight matrices."""

    def __init__(self, f_in: int, f_out: int, order: int, rng: np.random.Generator,
                 norm: str = "graph", activation: str = "relu", name: str = "cheb",
                 momentum: float = 0.1):
        if order < 1:
            raise ValueError("Chebyshev order must be at least 1")
        if norm not in NORM_MODES:
            raise ValueError(f"unknown norm mode {norm!r}")
        self.order, self.norm, self.activation = order, norm, activation
        self.f_in, self.f_out = f_in, f_out
        self.theta = [nd.glorot(rng, f_in, f_out, f"{name}.theta{k}") for k in range(order + 1)]
        self.gain = nd.ones_param((1, f_out), f"{name}.gain")
        self.bias = nd.zeros_param((1, f_out), f"{name}.bias")
        self.running_mean = np.zeros((1, f_out))
        self.running_var = np.ones((1, f_out))
        self.momentum = momentum
        self.name = name

    def parameters(self) -> list[Tensor]:
        return [*self.theta, self.gain, self.bias]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def _normalize(self, h: Tensor, training: bool) -> Tensor:
        if self.norm == "identity":
            return h
        if self.norm == "graph":
            z = nd.standardize(h, axes=-2)
        elif training:
            axes = tuple(range(h.value.ndim - 1))
            mu = h.value.mean(axis=axes).reshape(1, -1)
            var = h.value.var(axis=axes).reshape(1, -1)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu
            self.running_var = (1 - m) * self.running_var + m * var
            z = nd.standardize(h, axes=axes)
        else:
            z = nd.mul_row(nd.add_row(h, -self.running_mean), 1.0 / np.sqrt(self.running_var + 1e-5))
        return nd.add_row(nd.mul_row(z, self.gain), self.bias)

    def forward(self, lap_tilde, x, training: bool = False) -> Tensor:
        x = nd.as_tensor(x)
        if x.shape[-1] != self.f_in:
            raise ShapeError(f"{self.name}: expected {self.f_in} input features, got {x.shape[-1]}")
        basis = cheb_basis(lap_tilde, x, self.order)
        h = nd.matmul(basis[0], self.theta[0])
        for tk, theta in zip(basis[1:], self.theta[1:]):
            h = h + nd.matmul(tk, theta)
        h = self._normalize(h, training)
        return nd.relu(h) if self.activation == "relu" else h


class Dense:
    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator, name: str):
        self.weight = nd.glorot(rng, f_in, f_out, f"{name}.weight")
        self.bias = nd.zeros_param((1, f_out), f"{name}.bias")

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x) -> Tensor:
        return nd.add_row(nd.matmul(x, self.weight), self.bias)


@dataclass
class GnnConfig:
    in_width: int
    n_layers: int = 3
    cheb_order: int = 3
    hidden: int = 64
    head_depth: int = 5
    head_width: int = 128
    dropout: float = 0.1
    norm: str = "graph"

    def validate(self) -> None:
        if self.n_layers not in (3, 4):
            raise ValueError(f"ChebConv layer count must be 3 or 4, got {self.n_layers}")
        if not 5 <= self.head_depth <= 9:
            raise ValueError(f"head depth must lie in 5..9, got {self.head_depth}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


class GnnModel:
    """ChebConv stack, mean and max pooling concatenated, MLP regression head."""

    def __init__(self, config: GnnConfig, seed: int = 0, strict: bool = True):
        if strict:
            config.validate()
        self.config = config
        rng = nd.make_rng(seed)
        widths = [config.in_width] + [config.hidden] * config.n_layers
        self.layers = [ChebLayer(widths[i], widths[i + 1], config.cheb_order, rng,
                                 norm=config.norm, name=f"gnn.cheb{i}")
                       for i in range(config.n_layers)]
        head_in = 2 * config.hidden
        dims = [head_in] + [config.head_width] * (config.head_depth - 1) + [1]
        self.head = [Dense(dims[i], dims[i + 1], rng, f"gnn.head{i}") for i in range(config.head_depth)]

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        for dense in self.head:
            out.extend(dense.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def set_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for layer in self.layers:
            layer.running_mean = np.array(buffers.get(f"{layer.name}.running_mean", layer.running_mean))
            layer.running_var = np.array(buffers.get(f"{layer.name}.running_var", layer.running_var))

    def embed(self, lap_tilde, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Graph-level representation: mean-pool and max-pool of the final node embeddings."""
        h = nd.as_tensor(x)
        for layer in self.layers:
            h = layer.forward(lap_tilde, h, training)
            h = nd.dropout(h, self.config.dropout, rng, training)
        return nd.concat([nd.pool(h, "mean"), nd.pool(h, "max")], axis=-1)

    def forward(self, lap_tilde, x, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """Predicted standardized score per graph; a batch axis in ``x`` gives a vector."""
        x = nd.as_tensor(x)
        if x.shape[-1] != self.config.in_width:
            raise ShapeError(f"model expects node features of width {self.config.in_width}, "
                             f"got {x.shape[-1]}")
        h = self.embed(lap_tilde, x, training, rng)
        for i, dense in enumerate(self.head):
            h = dense(h)
            if i < len(self.head) - 1:
                h = nd.dropout(nd.relu(h), self.config.dropout, rng, training)
        return nd.reshape(h, h.shape[:-2] or (1,))


def gnn_forward(model: GnnModel, sample: GraphSample) -> float:
    out = model.forward(sample.rescaled.matrix, sample.node_features)
    return float(out.value.reshape(-1)[0])


# ---------------------------------------------------------- checkpoints

def state_dict(model) -> dict[str, np.ndarray]:
    state = {p.name: p.value for p in model.parameters()}
    state.update(model.buffers())
    return state


def load_state_dict(model, state: dict[str, np.ndarray]) -> None:
    params = {p.name: p for p in model.parameters()}
    for name, value in state.items():
        if name in params:
            if params[name].shape != value.shape:
                raise CheckpointError(f"{name}: shape {value.shape} vs {params[name].shape}")
            params[name].value = np.array(value, dtype=np.float64)
    model.set_buffers({k: v for k, v in state.items() if k not in params})
    missing = set(params) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")


def write_checkpoint(path, sections: dict[str, dict[str, np.ndarray]], header: dict) -> None:
    """``CBG1`` container: u32 header length, JSON header, then mat64 matrices in header order."""
    # the JSON header sorts keys, so write sections in that same order
    layout = {tag: list(sections[tag]) for tag in sorted(sections)}
    meta = json.dumps({**header, "sections": layout}, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(meta)), meta]
    for tag, names in layout.items():
        for name in names:
            chunks.append(encode_mat64(np.atleast_2d(sections[tag][name])))
    atomic_write(path, b"".join(chunks))


def read_checkpoint(path) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a CBG1 checkpoint")
    (size,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8:8 + size].decode("utf-8"))
    offset = 8 + size
    sections: dict[str, dict[str, np.ndarray]] = {}
    for tag, names in header.pop("sections").items():
        sections[tag] = {}
        for name in names:
            arr, offset = decode_mat64(buf, offset, str(path))
            sections[tag][name] = arr
    return header, sections


def save_gnn(path, model: GnnModel) -> None:
    header = {"kind": "gnn", "config": asdict(model.config),
              "layer_count": model.config.n_layers, "K": model.config.cheb_order,
              "widths": [model.config.in_width] + [model.config.hidden] * model.config.n_layers}
    write_checkpoint(path, {"gnn": state_dict(model)}, header)


def load_gnn(path) -> GnnModel:
    header, sections = read_checkpoint(path)
    if header.get("kind") != "gnn":
        raise CheckpointError(f"{path}: holds a {header.get('kind')!r} model")
    model = GnnModel(GnnConfig(**header["config"]), strict=False)
    load_state_dict(model, sections["gnn"])
    return model
