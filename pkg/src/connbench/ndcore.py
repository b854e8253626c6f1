"""Dense reverse-mode differentiation over float64 numpy arrays.

Values are ndarrays whose last two axes are the matrix axes; any leading
axes are a batch of same-shaped per-subject matrices. Every op records a
backward rule, and :func:`backward` sweeps the graph in reverse
topological order, accumulating gradients additively where a node feeds
more than one consumer.

Backward rules are module-level functions looked up at call time so test
harnesses can swap one out (the gradcheck negative control relies on it).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters; after
    :func:`backward` their ``grad`` has the same shape as ``value``.
    """

    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 parents: tuple["Tensor", ...] = (), backward_rule: Callable | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.value.shape})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(value)
    return Tensor(value, parents=parents, backward_rule=rule)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------- matmul

def _matmul_backward(g, a, b, need_a=True, need_b=True):
    ga = gb = None
    if need_a:
        ga = _unbroadcast(g @ _swap(b), a.shape)
    if need_b:
        if b.ndim == 2 and a.ndim > 2:
            # fold the batch into one GEMM instead of summing per-sample products
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(_swap(a) @ g, b.shape)
    return ga, gb


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}") from exc
    av, bv = a.value, b.value
    need_a, need_b = a.requires_grad, b.requires_grad
    return _node(out, (a, b), lambda g: _matmul_backward(g, av, bv, need_a, need_b))


# ----------------------------------------------------------- elementwise

def _add_backward(g, a, b):
    return g, g


def _sub_backward(g, a, b):
    return g, -g


def _mul_backward(g, a, b):
    return g * b, g * a


def _relu_backward(g, a):
    return (g * (a > 0),)


def _abs_backward(g, a):
    return (g * np.sign(a),)


def _square_backward(g, a):
    return (2.0 * g * a,)


_BINARY = {
    "add": (np.add, "_add_backward"),
    "sub": (np.subtract, "_sub_backward"),
    "mul": (np.multiply, "_mul_backward"),
}
_UNARY = {
    "relu": (lambda x: np.maximum(x, 0.0), "_relu_backward"),
    "abs": (np.abs, "_abs_backward"),
    "square": (np.square, "_square_backward"),
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Entrywise ``add``/``sub``/``mul`` (equal shapes) or ``relu``/``abs``/``square``."""
    a = as_tensor(a)
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} takes one operand")
        fn, rule_name = _UNARY[op]
        av = a.value
        return _node(fn(av), (a,), lambda g: globals()[rule_name](g, av))
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    fn, rule_name = _BINARY[op]
    av, bv = a.value, b.value
    return _node(fn(av, bv), (a, b), lambda g: globals()[rule_name](g, av, bv))


def relu(a) -> Tensor:
    return elementwise("relu", a)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def add_row(a, row) -> Tensor:
    """Add a 1×cols row (a bias) to every row of ``a``, across any batch axes."""
    a, row = as_tensor(a), as_tensor(row)
    if row.value.ndim != 2 or row.shape[0] != 1 or row.shape[1] != a.shape[-1]:
        raise ShapeError(f"add_row: row {row.shape} does not fit {a.shape}")
    shape = row.shape
    return _node(a.value + row.value, (a, row), lambda g: (g, _unbroadcast(g, shape)))


def mul_row(a, row) -> Tensor:
    """Scale column j of ``a`` by ``row[0, j]``."""
    a, row = as_tensor(a), as_tensor(row)
    if row.value.ndim != 2 or row.shape[0] != 1 or row.shape[1] != a.shape[-1]:
        raise ShapeError(f"mul_row: row {row.shape} does not fit {a.shape}")
    av, rv = a.value, row.value
    return _node(av * rv, (a, row), lambda g: (g * rv, _unbroadcast(g * av, rv.shape)))


def add_broadcast(a, b) -> Tensor:
    """Addition with numpy broadcasting (e.g. a shared N×f parameter over a batch)."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _node(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


# ------------------------------------------------------- structural ops

def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(_swap(a.value), (a,), lambda g: (_swap(g),))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; leading batch axes broadcast across parts."""
    parts = [as_tensor(p) for p in parts]
    ndim = max(p.value.ndim for p in parts)
    axis = axis % ndim
    vals = [p.value.reshape((1,) * (ndim - p.value.ndim) + p.value.shape) for p in parts]
    common = list(np.broadcast_shapes(*[v.shape[:axis] + (1,) + v.shape[axis + 1:] for v in vals]))
    try:
        vals = [np.broadcast_to(v, tuple(common[:axis]) + (v.shape[axis],) + tuple(common[axis + 1:]))
                for v in vals]
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from exc
    out = np.concatenate(vals, axis=axis)
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    shapes = [p.shape for p in parts]

    def rule(g):
        pieces = np.split(g, cuts, axis=axis)
        return tuple(_unbroadcast(piece, s) for piece, s in zip(pieces, shapes))

    return _node(out, parts, rule)


def take_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _node(a.value[..., start:stop], (a,), rule)


def total(a) -> Tensor:
    """Sum of all entries as a 1×1 tensor."""
    a = as_tensor(a)
    shape = a.shape
    return _node(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g.item()),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return scale(total(a), 1.0 / a.value.size)


# --------------------------------------------------------------- softmax

def _softmax_backward(g, s):
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _node(s, (a,), lambda g: _softmax_backward(g, s))


# ------------------------------------------------------------ normalizers

def _standardize_backward(g, xhat, inv_std, axes):
    gm = g.mean(axis=axes, keepdims=True)
    gx = (g * xhat).mean(axis=axes, keepdims=True)
    return (inv_std * (g - gm - xhat * gx),)


def standardize(a, axes: int | tuple[int, ...] = -1, eps: float = 1e-5) -> Tensor:
    """Zero mean, unit (population) variance over ``axes``; eps sits inside the sqrt."""
    a = as_tensor(a)
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    mu = a.value.mean(axis=axes, keepdims=True)
    xc = a.value - mu
    var = (xc ** 2).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return _node(xhat, (a,), lambda g: _standardize_backward(g, xhat, inv_std, axes))


def layernorm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalization followed by a learned per-column affine map."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    if gain.value.size != a.shape[-1] or bias.value.size != a.shape[-1]:
        raise ShapeError(f"layernorm: gain {gain.shape} / bias {bias.shape} vs {a.shape}")
    return add_row(mul_row(standardize(a, -1, eps), gain), bias)


# ------------------------------------------------------------------ pool

def _mean_pool_backward(g, rows):
    return (np.repeat(g / rows, rows, axis=-2),)


def _max_pool_backward(g, shape, idx):
    full = np.zeros(shape)
    np.put_along_axis(full, idx, g, axis=-2)
    return (full,)


def pool(a, mode: str = "mean") -> Tensor:
    """Reduce over rows to a 1×cols result. Max ties route to the lowest row."""
    a = as_tensor(a)
    if a.value.ndim < 2 or a.shape[-2] == 0:
        raise ShapeError(f"pool: empty input {a.shape}")
    rows = a.shape[-2]
    if mode == "mean":
        return _node(a.value.mean(axis=-2, keepdims=True), (a,),
                     lambda g: _mean_pool_backward(g, rows))
    if mode == "max":
        idx = np.argmax(a.value, axis=-2)[..., None, :]
        out = np.take_along_axis(a.value, idx, axis=-2)
        shape = a.shape
        return _node(out, (a,), lambda g: _max_pool_backward(g, shape, idx))
    raise ValueError(f"unknown pool mode {mode!r}")


# ---------------------------------------------------- cosine similarity

def _cosine_backward(g, x, norms, u):
    gs = g + _swap(g)
    gu = gs @ u
    # project out the radial component for rows where the norm was active
    radial = (gu * u).sum(axis=-1, keepdims=True)
    active = norms > 1e-12
    gx = np.where(active, (gu - radial * u) / np.maximum(norms, 1e-12), gu / 1e-12)
    return (gx,)


def cosine_similarity_matrix(a) -> Tensor:
    """Pairwise cosine similarity of rows; row norms are floored at 1e-12."""
    a = as_tensor(a)
    x = a.value
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    u = x / np.maximum(norms, 1e-12)
    out = u @ _swap(u)
    return _node(out, (a,), lambda g: _cosine_backward(g, x, norms, u))


# --------------------------------------------------------------- dropout

def dropout(a, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-p) in training, identity otherwise."""
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _node(a.value * mask, (a,), lambda g: (g * mask,))


# -------------------------------------------------------------- backward

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns gradients of parameter leaves.

    Leaf ``grad`` attributes accumulate, so reset them (``zero_grad``)
    between independent sweeps.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_rule is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node.backward_rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


# ---------------------------------------------------------------- AdamW

def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict,
               lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.01) -> tuple[list[np.ndarray], dict]:
    """One AdamW update; returns new parameter arrays and the new state.

    Decay is decoupled: ``p *= 1 - lr*wd`` happens before the
    bias-corrected adaptive step.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    b1, b2 = betas
    t = state.get("t", 0) + 1
    ms = state.get("m") or [np.zeros_like(p) for p in params]
    vs = state.get("v") or [np.zeros_like(p) for p in params]
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, ms, vs):
        if p.shape != g.shape:
            raise ShapeError(f"adamw: param {p.shape} vs grad {g.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        q = p * (1 - lr * weight_decay)
        q = q - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_p.append(q)
        new_m.append(m)
        new_v.append(v)
    return new_p, {"t": t, "m": new_m, "v": new_v}


class AdamW:
    """Stateful wrapper around :func:`adamw_step` for a fixed parameter list."""

    def __init__(self, params: Iterable[Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        live = [p for p in self.params if p.grad is not None]
        if len(live) != len(self.params):
            for p in self.params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.value)
        new, self.state = adamw_step([p.value for p in self.params],
                                     [p.grad for p in self.params], self.state,
                                     self.lr, self.betas, self.eps, self.weight_decay)
        for p, v in zip(self.params, new):
            p.value = v


# ------------------------------------------------------------ randomness

def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seed gives an identical stream everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(master: int, *keys) -> int:
    """Stable 63-bit seed from a master seed and a tuple of ints/strings."""
    words = [int(master) & 0xFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            words.extend(k.encode("utf-8"))
        else:
            words.append(int(k) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(2, np.uint32).astype(np.uint64)
               .dot(np.array([1, 1 << 32], dtype=np.uint64)) & ((1 << 63) - 1))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name: str | None = None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name=name)


def zeros_param(shape: tuple[int, ...], name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones_param(shape: tuple[int, ...], name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


# ------------------------------------------------------- finite differences

def numerical_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        hi = f()
        x[i] = old - step
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max entrywise deviation scaled by the larger gradient magnitude."""
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)
