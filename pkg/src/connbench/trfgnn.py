"""Transformer-GNN: region tokens -> Transformer encoder -> cosine FC -> ChebConv GNN.

Each region's token concatenates an MLP projection of its time-series, its
coordinates in the leading structural eigenvectors, and a learned
positional embedding. The encoder output rows are compared by cosine
similarity, and that learned FC feeds the GNN as node features. The whole
pipeline trains end to end.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import ndcore as nd
from .chebgnn import (CheckpointError, Dense, GnnConfig, GnnModel, build_ts_sample,
                      load_state_dict, normalize_sc, normalized_laplacian, read_checkpoint,
                      write_checkpoint)
from .ndcore import ShapeError, Tensor


class EigenAmbiguityError(ValueError):
    pass


def structural_eigvecs(sc: np.ndarray, k: int = 16, tie_tol: float = 1e-8) -> np.ndarray:
    """Eigenvectors of the SC normalized Laplacian for the ``k`` smallest eigenvalues.

    Columns ascend by eigenvalue and are sign-fixed so each column's
    largest-magnitude entry is positive. Disconnected graphs and eigenvalue
    ties inside the kept block raise instead of returning an arbitrary basis.
    """
    n = len(sc)
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of regions {n}")
    vals, vecs = np.linalg.eigh(normalized_laplacian(normalize_sc(sc)))
    if np.sum(vals < tie_tol) > 1:
        raise EigenAmbiguityError("graph is disconnected: eigenvalue 0 is repeated")
    gaps = np.diff(vals[:k + 1])
    if np.any(gaps < tie_tol):
        j = int(np.argmax(gaps < tie_tol))
        raise EigenAmbiguityError(f"eigenvalues {j} and {j + 1} tie within {tie_tol}")
    out = vecs[:, :k].copy()
    pivot = np.argmax(np.abs(out), axis=0)
    signs = np.sign(out[pivot, np.arange(k)])
    return out * signs


@dataclass
class TrfConfig:
    n_regions: int
    n_timepoints: int
    proj_hidden: int = 256
    proj_out: int = 64
    eig_k: int = 16
    pos_dim: int = 16
    heads: int = 4
    head_dim: int = 24
    mlp_hidden: int = 192
    n_blocks: int = 2
    dropout: float = 0.1
    gnn: GnnConfig | None = None

    @property
    def token_width(self) -> int:
        return self.proj_out + self.eig_k + self.pos_dim

    def validate(self) -> None:
        if self.heads * self.head_dim != self.token_width:
            raise ShapeError(f"heads*head_dim = {self.heads * self.head_dim} must equal the token "
                             f"width {self.proj_out}+{self.eig_k}+{self.pos_dim} = {self.token_width}")


class EncoderBlock:
    """Post-norm block: X <- LN(X + MHA(X)); X <- LN(X + MLP(X))."""

    def __init__(self, width: int, heads: int, head_dim: int, mlp_hidden: int,
                 rng: np.random.Generator, name: str):
        self.heads, self.head_dim = heads, head_dim
        self.wq = [nd.glorot(rng, width, head_dim, f"{name}.h{h}.wq") for h in range(heads)]
        self.wk = [nd.glorot(rng, width, head_dim, f"{name}.h{h}.wk") for h in range(heads)]
        self.wv = [nd.glorot(rng, width, head_dim, f"{name}.h{h}.wv") for h in range(heads)]
        self.wo = nd.glorot(rng, heads * head_dim, width, f"{name}.wo")
        self.ln1 = (nd.ones_param((1, width), f"{name}.ln1.gain"), nd.zeros_param((1, width), f"{name}.ln1.bias"))
        self.fc1 = Dense(width, mlp_hidden, rng, f"{name}.mlp0")
        self.fc2 = Dense(mlp_hidden, width, rng, f"{name}.mlp1")
        self.ln2 = (nd.ones_param((1, width), f"{name}.ln2.gain"), nd.zeros_param((1, width), f"{name}.ln2.bias"))

    def parameters(self) -> list[Tensor]:
        return [*self.wq, *self.wk, *self.wv, self.wo, *self.ln1,
                *self.fc1.parameters(), *self.fc2.parameters(), *self.ln2]

    def attention(self, x: Tensor) -> Tensor:
        """Multi-head self-attention over the token rows, before the residual."""
        scale = 1.0 / math.sqrt(self.head_dim)
        outs = []
        for wq, wk, wv in zip(self.wq, self.wk, self.wv):
            q, k, v = nd.matmul(x, wq), nd.matmul(x, wk), nd.matmul(x, wv)
            attn = nd.softmax_rows(nd.scale(nd.matmul(q, nd.transpose(k)), scale))
            outs.append(nd.matmul(attn, v))
        return nd.matmul(nd.concat(outs, axis=-1), self.wo)

    def __call__(self, x: Tensor, dropout: float = 0.0, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        a = nd.dropout(self.attention(x), dropout, rng, training)
        x = nd.layernorm(x + a, *self.ln1)
        m = self.fc2(nd.relu(self.fc1(x)))
        m = nd.dropout(m, dropout, rng, training)
        return nd.layernorm(x + m, *self.ln2)


class TrfGnnModel:
    def __init__(self, config: TrfConfig, seed: int = 0, strict: bool = True):
        config.validate()
        if config.gnn is None:
            config.gnn = GnnConfig(in_width=config.n_regions)
        if config.gnn.in_width != config.n_regions:
            raise ShapeError("GNN input width must equal the number of regions (learned FC rows)")
        self.config = config
        rng = nd.make_rng(seed)
        self.proj = [Dense(config.n_timepoints, config.proj_hidden, rng, "trf.proj0"),
                     Dense(config.proj_hidden, config.proj_out, rng, "trf.proj1")]
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(config.n_regions, config.pos_dim)),
                          requires_grad=True, name="trf.pos")
        self.blocks = [EncoderBlock(config.token_width, config.heads, config.head_dim,
                                    config.mlp_hidden, rng, f"trf.block{b}")
                       for b in range(config.n_blocks)]
        self.gnn = GnnModel(config.gnn, seed=int(rng.integers(2 ** 62)), strict=strict)

    def transformer_parameters(self) -> list[Tensor]:
        out = [*self.proj[0].parameters(), *self.proj[1].parameters(), self.pos]
        for block in self.blocks:
            out.extend(block.parameters())
        return out

    def parameters(self) -> list[Tensor]:
        return self.transformer_parameters() + self.gnn.parameters()

    def buffers(self) -> dict[str, np.ndarray]:
        return self.gnn.buffers()

    def set_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        self.gnn.set_buffers(buffers)

    def assemble_tokens(self, ts, eig) -> Tensor:
        """Row n = [MLP(ts row n), eigvec row n, pos row n]; the MLP is shared across regions."""
        ts, eig = nd.as_tensor(ts), nd.as_tensor(eig)
        cfg = self.config
        if ts.shape[-1] != cfg.n_timepoints or ts.shape[-2] != cfg.n_regions:
            raise ShapeError(f"time-series {ts.shape} does not match N={cfg.n_regions}, d={cfg.n_timepoints}")
        if eig.shape[-1] != cfg.eig_k:
            raise ShapeError(f"expected {cfg.eig_k} eigenvector columns, got {eig.shape[-1]}")
        x = self.proj[1](nd.relu(self.proj[0](ts)))
        return nd.concat([x, eig, self.pos], axis=-1)

    def encode(self, tokens, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        x = nd.as_tensor(tokens)
        for block in self.blocks:
            x = block(x, self.config.dropout, training, rng)
        return x

    def forward(self, lap_tilde, ts, eig, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        emb = self.encode(self.assemble_tokens(ts, eig), training, rng)
        return self.gnn.forward(lap_tilde, trf_fc(emb), training, rng)


def trf_fc(embedding) -> Tensor:
    """Learned FC: cosine similarity between region embeddings."""
    return nd.cosine_similarity_matrix(embedding)


def trfgnn_forward(model: TrfGnnModel, subject, eig: np.ndarray | None = None) -> float:
    sample = build_ts_sample(subject)
    if eig is None:
        eig = structural_eigvecs(subject.sc, model.config.eig_k)
    out = model.forward(sample.rescaled.matrix, sample.node_features, eig)
    return float(out.value.reshape(-1)[0])


def save_trfgnn(path, model: TrfGnnModel) -> None:
    cfg = asdict(model.config)
    params = {p.name: p.value for p in model.parameters()}
    trf = {name: params[name] for name in (p.name for p in model.transformer_parameters())}
    gnn = {p.name: p.value for p in model.gnn.parameters()}
    gnn.update(model.gnn.buffers())
    header = {"kind": "trf_gnn", "config": cfg, "layer_count": model.config.gnn.n_layers,
              "K": model.config.gnn.cheb_order}
    write_checkpoint(path, {"trf": trf, "gnn": gnn}, header)


def load_trfgnn(path) -> TrfGnnModel:
    header, sections = read_checkpoint(path)
    if header.get("kind") != "trf_gnn":
        raise CheckpointError(f"{path}: holds a {header.get('kind')!r} model")
    cfg = dict(header["config"])
    cfg["gnn"] = GnnConfig(**cfg["gnn"])
    model = TrfGnnModel(TrfConfig(**cfg), strict=False)
    load_state_dict(model, {**sections["trf"], **sections["gnn"]})
    return model
