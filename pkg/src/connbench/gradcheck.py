"""Central finite-difference checks for every differentiable op and the end-to-end models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ndcore as nd
from .chebgnn import ChebLayer, GnnConfig, GnnModel, cheb_basis, normalized_laplacian, rescale_laplacian
from .evalstats.metrics import joint_loss
from .ndcore import Tensor
from .trfgnn import EncoderBlock, TrfConfig, TrfGnnModel, structural_eigvecs, trf_fc

OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass(frozen=True)
class CheckResult:
    op: str
    rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.rel_err <= self.tol)


def _leaf(rng, *shape, away_from_zero: bool = False) -> Tensor:
    v = rng.normal(size=shape)
    if away_from_zero:
        v = np.sign(v) * (0.2 + np.abs(v))
    return Tensor(v, requires_grad=True)


def _project(out: Tensor, rng) -> Tensor:
    """Scalar loss <out, W> with a fixed random W, so every output entry is exercised."""
    w = Tensor(rng.normal(size=out.shape))
    return nd.total(nd.elementwise("mul", out, w))


def check(op: str, build: Callable[[], Tensor], leaves: list[Tensor], tol: float = OP_TOL) -> CheckResult:
    """Compare reverse-mode gradients of ``build()`` against central differences on ``leaves``."""
    grads = nd.backward(build())
    worst = 0.0
    for leaf in leaves:
        analytic = grads.get(leaf, np.zeros_like(leaf.value))
        numeric = nd.numerical_grad(lambda: float(build().value.sum()), leaf.value)
        worst = max(worst, nd.relative_error(analytic, numeric))
    return CheckResult(op, worst, tol)


def _random_graph(rng, n: int) -> np.ndarray:
    w = rng.uniform(0.5, 1.5, size=(n, n)) * (rng.random((n, n)) < 0.5)
    w = np.triu(w, 1)
    w = w + w.T
    for i in range(n):
        j = (i + 1) % n
        w[i, j] = w[j, i] = max(w[i, j], 1.0)
    return w


def _jitter_biases(params: list[Tensor], rng) -> list[Tensor]:
    """Zero-initialized biases can sit a ReLU exactly on its kink; nudge them off it."""
    for p in params:
        if p.name and p.name.endswith(".bias"):
            p.value = p.value + rng.normal(0.0, 0.1, size=p.shape)
    return params


def _checks(seed: int):
    rng = nd.make_rng(seed)

    def simple(op, fn, *shapes, away=False, tol=OP_TOL):
        leaves = [_leaf(rng, *s, away_from_zero=away) for s in shapes]
        proj_rng_seed = int(rng.integers(2 ** 31))
        return op, lambda: _project(fn(*leaves), nd.make_rng(proj_rng_seed)), leaves, tol

    yield simple("matmul", nd.matmul, (3, 4), (4, 5))
    yield simple("matmul_batched", nd.matmul, (2, 3, 4), (4, 5))
    yield simple("add", lambda a, b: a + b, (3, 4), (3, 4))
    yield simple("sub", lambda a, b: a - b, (3, 4), (3, 4))
    yield simple("mul", lambda a, b: a * b, (3, 4), (3, 4))
    yield simple("relu", nd.relu, (3, 4), away=True)
    yield simple("abs", lambda a: nd.elementwise("abs", a), (3, 4), away=True)
    yield simple("square", lambda a: nd.elementwise("square", a), (3, 4))
    yield simple("scale", lambda a: nd.scale(a, -1.7), (3, 4))
    yield simple("add_row", nd.add_row, (2, 3, 4), (1, 4))
    yield simple("mul_row", nd.mul_row, (2, 3, 4), (1, 4))
    yield simple("add_broadcast", nd.add_broadcast, (2, 3, 4), (3, 4))
    yield simple("transpose", nd.transpose, (2, 3, 4))
    yield simple("reshape", lambda a: nd.reshape(a, (4, 6)), (2, 3, 4))
    yield simple("concat", lambda a, b: nd.concat([a, b], axis=-1), (2, 3, 4), (3, 2))
    yield simple("take_cols", lambda a: nd.take_cols(a, 1, 3), (3, 4))
    yield simple("total", nd.total, (3, 4))
    yield simple("mean_all", nd.mean_all, (3, 4))
    yield simple("softmax_rows", nd.softmax_rows, (2, 3, 4))
    yield simple("standardize_rows", lambda a: nd.standardize(a, axes=-1), (3, 5))
    yield simple("standardize_nodes", lambda a: nd.standardize(a, axes=-2), (2, 5, 3))
    yield simple("layernorm", nd.layernorm, (3, 5), (1, 5), (1, 5))
    yield simple("pool_mean", lambda a: nd.pool(a, "mean"), (2, 5, 3))
    yield simple("pool_max", lambda a: nd.pool(a, "max"), (2, 5, 3))
    yield simple("cosine_similarity", nd.cosine_similarity_matrix, (2, 5, 3))
    drop_seed = int(rng.integers(2 ** 31))
    yield simple("dropout", lambda a: nd.dropout(a, 0.3, nd.make_rng(drop_seed), True), (3, 4))

    n = 6
    lap = np.stack([rescale_laplacian(normalized_laplacian(_random_graph(rng, n))).matrix for _ in range(2)])
    yield simple("cheb_basis", lambda x: nd.concat(cheb_basis(lap, x, 3), axis=-1), (2, n, 3))
    for norm in ("graph", "identity"):
        layer = ChebLayer(3, 4, 3, rng, norm=norm, activation="none", name="chk")
        x = _leaf(rng, 2, n, 3)
        seed_p = int(rng.integers(2 ** 31))
        yield (f"chebconv_forward[{norm}]",
               lambda layer=layer, x=x, s=seed_p: _project(layer.forward(lap, x), nd.make_rng(s)),
               [x, *layer.parameters()], OP_TOL)

    block = EncoderBlock(8, 2, 4, 6, rng, "chk")
    tokens = _leaf(rng, 2, n, 8)
    seed_p = int(rng.integers(2 ** 31))
    yield ("encode", lambda: _project(block(tokens), nd.make_rng(seed_p)), [tokens, *block.parameters()], OP_TOL)
    yield simple("trf_fc", trf_fc, (2, n, 4))

    pred = _leaf(rng, 8)
    target = rng.normal(size=8)
    yield "joint_loss", lambda: joint_loss(pred, target), [pred], OP_TOL

    graphs = [_random_graph(rng, n) for _ in range(3)]
    lap3 = np.stack([rescale_laplacian(normalized_laplacian(g)).matrix for g in graphs])
    y = rng.normal(size=3)
    gnn = GnnModel(GnnConfig(in_width=n, hidden=4, head_width=4, dropout=0.0), seed=seed)
    feats = rng.normal(size=(3, n, n))
    yield ("gnn_end_to_end", lambda: joint_loss(gnn.forward(lap3, feats), y),
           _jitter_biases(gnn.parameters(), rng), MODEL_TOL)

    ts = rng.normal(size=(3, n, 10))
    eig = np.stack([structural_eigvecs(g, 2) for g in graphs])
    cfg = TrfConfig(n_regions=n, n_timepoints=10, proj_hidden=6, proj_out=4, eig_k=2, pos_dim=2,
                    heads=2, head_dim=4, mlp_hidden=6, n_blocks=2, dropout=0.0,
                    gnn=GnnConfig(in_width=n, hidden=4, head_width=4, dropout=0.0))
    trf = TrfGnnModel(cfg, seed=seed)
    yield ("trf_gnn_end_to_end", lambda: joint_loss(trf.forward(lap3, ts, eig), y),
           _jitter_biases(trf.parameters(), rng), MODEL_TOL)


def run_gradcheck(seed: int = 0) -> list[CheckResult]:
    with np.errstate(divide="raise", invalid="raise"):
        return [check(op, build, leaves, tol) for op, build, leaves, tol in _checks(seed)]


def worst_offender(results: list[CheckResult]) -> CheckResult:
    """The check with the largest error relative to its own tolerance."""
    return max(results, key=lambda r: r.rel_err / r.tol)
