"""Dense numpy-backed tensors with a small reverse-mode autodiff engine.

Only the primitives the language model needs are provided. Every op records a
closure that maps the upstream gradient to one gradient per input; the engine
walks the graph once in reverse topological order and then discards it.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Iterator, Sequence

import numpy as np
from scipy.special import ndtr

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar loss, reused graph, ...)."""


class NonDeterministicError(RuntimeError):
    pass


def get_default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class _Node:
    __slots__ = ("op", "parents", "backward_fn", "consumed")

    def __init__(self, op: str, parents: tuple[Tensor, ...], backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """An n-d float array that can take part in a reverse-mode graph.

    Leaves created with ``requires_grad=True`` own a zero-initialised ``grad``
    buffer; non-leaf results carry a ``_node`` back-reference instead.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ShapeError("tensors must have positive extents")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node: _Node | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence[Tensor], op: str,
                backward_fn: Callable) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._node = _Node(op, tuple(parents), backward_fn) if needs else None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad and self._node is None:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self, order: str = "dfs") -> None:
        backward(self, order=order)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_dfs(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def _topo_kahn(root: Tensor) -> list[Tensor]:
    # Consumers-first ordering built from in-degrees; reversed at the end so
    # the result has the same orientation as _topo_dfs.
    nodes: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        if t._node is not None:
            stack.extend(p for p in t._node.parents if p.requires_grad)
    consumers = {k: 0 for k in nodes}
    for t in nodes.values():
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad:
                    consumers[id(p)] += 1
    ready = [root]
    out: list[Tensor] = []
    while ready:
        t = ready.pop(0)
        out.append(t)
        if t._node is not None:
            for p in t._node.parents:
                if not p.requires_grad:
                    continue
                consumers[id(p)] -= 1
                if consumers[id(p)] == 0:
                    ready.append(p)
    out.reverse()
    return out


def backward(loss: Tensor, order: str = "dfs") -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires grad.

    The graph is consumed: saved activations are dropped and a second call on
    the same loss raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise GraphError("loss is not produced by a live graph")
    if loss._node.consumed:
        raise GraphError("graph already consumed by a previous backward pass")
    if order == "dfs":
        topo = _topo_dfs(loss)
    elif order == "kahn":
        topo = _topo_kahn(loss)
    else:
        raise ValueError(f"unknown topological order {order!r}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(topo):
        g = grads.pop(id(t), None)
        node = t._node
        if node is None:
            if g is not None and t.requires_grad:
                t.grad += g
            continue
        if node.consumed:
            raise GraphError(f"graph node '{node.op}' already consumed")
        if g is not None:
            pgrads = node.backward_fn(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                if prev is None:
                    grads[id(p)] = np.array(pg, dtype=p.dtype, copy=True)
                else:
                    prev += pg
        node.consumed = True
        node.backward_fn = None


# ---------------------------------------------------------------------------
# binary elementwise ops
# ---------------------------------------------------------------------------

def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.data.size == 1 and b.ndim <= 1:
        return "b_scalar"
    if a.data.size == 1 and a.ndim <= 1:
        return "a_scalar"
    if b.ndim == 1 and a.shape[-1] == b.shape[0]:
        return "b_vector"
    if a.ndim == 1 and b.shape[-1] == a.shape[0]:
        return "a_vector"
    raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 1 and shape[0] == 1:
        return np.array([g.sum()], dtype=g.dtype)
    return g.reshape(-1, shape[-1]).sum(axis=0)


def _out_shape(a: Tensor, b: Tensor, kind: str) -> tuple[int, ...]:
    return b.shape if kind in ("a_scalar", "a_vector") else a.shape


def _binary_data(a: Tensor, b: Tensor, kind: str) -> tuple[np.ndarray, np.ndarray]:
    ad, bd = a.data, b.data
    if kind == "b_scalar":
        bd = bd.reshape(())
    elif kind == "a_scalar":
        ad = ad.reshape(())
    return ad, bd


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    kind = _broadcast_kind(a, b)
    ad, bd = _binary_data(a, b, kind)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return Tensor._result(ad + bd, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    kind = _broadcast_kind(a, b)
    ad, bd = _binary_data(a, b, kind)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), -_reduce_to(g, sb)

    return Tensor._result(ad - bd, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    """Hadamard product (with scalar / trailing-vector broadcasting)."""
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    kind = _broadcast_kind(a, b)
    ad, bd = _binary_data(a, b, kind)
    sa, sb = a.shape, b.shape

    def bw(g):
        ga = _reduce_to(g * bd, sa) if a.requires_grad else None
        gb = _reduce_to(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return Tensor._result(ad * bd, (a, b), "mul", bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return Tensor._result(x.data * c, (x,), "scale", lambda g: (g * c,))


# ---------------------------------------------------------------------------
# unary elementwise ops
# ---------------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free and much faster than masked exp
    half = z.dtype.type(0.5)
    return half * (1 + np.tanh(half * z))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data

    def bw(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return Tensor._result(xd * s, (x,), "silu", bw)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = ndtr(xd).astype(xd.dtype, copy=False)

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) / xd.dtype.type(_SQRT_2PI)
        return (g * (cdf + xd * pdf),)

    return Tensor._result(xd * cdf, (x,), "gelu", bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._result(y, (x,), "tanh", lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._result(y, (x,), "exp", lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._result(np.log(xd), (x,), "log", lambda g: (g / xd,))


def elementwise(op_tag: str, x: Tensor, y: Tensor | float | None = None) -> Tensor:
    """Dispatch an elementwise op by name."""
    unary = {"silu": silu, "gelu": gelu, "tanh": tanh, "exp": exp, "log": log}
    if op_tag in unary:
        if y is not None:
            raise ValueError(f"{op_tag} is unary")
        return unary[op_tag](x)
    if op_tag == "scalar_mul":
        return scale(x, float(y))
    binary = {"add": add, "sub": sub, "mul": mul, "hadamard": mul}
    if op_tag not in binary:
        raise ValueError(f"unknown elementwise op {op_tag!r}")
    if y is None:
        raise ValueError(f"{op_tag} needs two operands")
    return binary[op_tag](x, y)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        out = np.array([x.data.sum()], dtype=x.dtype)

        def bw(g):
            return (np.full(shape, g.reshape(-1)[0], dtype=x.dtype),)
    else:
        out = x.data.sum(axis=axis)
        if out.ndim == 0:
            out = out.reshape(1)

        def bw(g):
            return (np.broadcast_to(np.expand_dims(g.reshape(out.shape), axis), shape),)

    return Tensor._result(out, (x,), "sum", bw)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return Tensor._result(out, (x,), "reshape", lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._result(x.data.transpose(axes), (x,), "transpose",
                          lambda g: (g.transpose(inv),))


def take_positions(x: Tensor, positions) -> Tensor:
    """Select x[b, positions[b]] for a (B, T, d) tensor, giving (B, d)."""
    pos = np.asarray(positions, dtype=np.int64)
    if x.ndim != 3 or pos.shape != (x.shape[0],):
        raise ShapeError(f"take_positions expects (B,T,d) and (B,), got {x.shape}, {pos.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=x.dtype)
        gx[rows, pos] = g
        return (gx,)

    return Tensor._result(x.data[rows, pos], (x,), "take_positions", bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), "matmul", bw)


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """x @ weight.T with weight stored as (out, in); x may have leading axes."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear dimension mismatch: {x.shape} with weight {weight.shape}")
    xd, wd = x.data, weight.data
    lead = x.shape[:-1]

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = g.reshape(-1, wd.shape[0]).T @ xd.reshape(-1, wd.shape[1])
        return gx, gw

    out = (xd.reshape(-1, wd.shape[1]) @ wd.T).reshape(*lead, wd.shape[0])
    return Tensor._result(out, (x, weight), "linear", bw)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab, dim = weight.shape

    def bw(g):
        gw = np.zeros((vocab, dim), dtype=weight.dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, dim))
        return (gw,)

    return Tensor._result(weight.data[ids], (weight,), "embedding", bw)


# ---------------------------------------------------------------------------
# normalisation / attention helpers
# ---------------------------------------------------------------------------

def causal_mask(n: int) -> np.ndarray:
    """Boolean (n, n) mask, True where attention is allowed."""
    return np.tril(np.ones((n, n), dtype=bool))


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (True = keep) covers the last two axes."""
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if xd.ndim < 2 or mask.shape != xd.shape[-2:]:
            raise ShapeError(f"mask shape {mask.shape} does not match trailing dims of {xd.shape}")
        if not mask.any(axis=-1).all():
            raise ValueError("degenerate attention row: every entry is masked")
        xd = np.where(mask, xd, -np.inf)
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._result(y, (x,), "softmax", bw)


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    return softmax(x, mask)


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(xd - m).sum(axis=-1, keepdims=True))
    y = xd - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(y, (x,), "log_softmax", bw)


def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    xd, gd = x.data, gain.data
    d = xd.shape[-1]
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + xd.dtype.type(eps))
    xhat = xd * r

    def bw(g):
        u = g * gd
        gx = r * (u - xhat * (u * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        return gx, gg

    return Tensor._result(xhat * gd, (x, gain), "rmsnorm", bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    xd, gd = x.data, gain.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    r = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + xd.dtype.type(eps))
    xhat = xc * r

    def bw(g):
        u = g * gd
        gx = r * (u - u.mean(axis=-1, keepdims=True)
                  - xhat * (u * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None
        return gx, gg, gb

    return Tensor._result(xhat * gd + bias.data, (x, gain, bias), "layernorm", bw)


def rope_tables(positions, head_dim: int, theta: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    if head_dim % 2:
        raise ValueError(f"RoPE needs an even head_dim, got {head_dim}")
    pos = np.asarray(positions, dtype=np.float64)
    freqs = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.outer(pos, freqs)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope(x: Tensor, positions, theta: float) -> Tensor:
    """Rotate consecutive pairs of the last axis by pos * theta^(-2i/d).

    ``x`` has shape (..., T, head_dim) and ``positions`` has length T.
    """
    hd = x.shape[-1]
    cos, sin = rope_tables(positions, hd, theta, x.dtype)
    if cos.shape[0] != x.shape[-2]:
        raise ShapeError(f"{cos.shape[0]} positions for sequence length {x.shape[-2]}")
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def bw(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = go * cos - ge * sin
        return (gx,)

    return Tensor._result(out, (x,), "rope", bw)


def cross_entropy(logits: Tensor, targets, smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed cross-entropy over rows of (N, V) logits.

    The true class gets 1 - smoothing, every other class smoothing / (V - 1).
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ShapeError(f"logits {logits.shape} and targets {targets.shape} length mismatch")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {smoothing}")
    n, v = logits.shape
    ld = logits.data
    m = ld.max(axis=-1, keepdims=True)
    z = ld - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    off = smoothing / (v - 1)
    on = 1.0 - smoothing
    nll_true = -logp[rows, targets]
    if smoothing:
        total = on * nll_true + off * (-logp.sum(axis=-1) + logp[rows, targets])
    else:
        total = nll_true
    loss = np.array([total.mean()], dtype=ld.dtype)

    def bw(g):
        p = np.exp(logp)
        q = np.full_like(p, off)
        q[rows, targets] = on
        return ((p - q) * (g.reshape(-1)[0] / n),)

    return Tensor._result(loss, (logits,), "cross_entropy", bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      eps_div: float = 1e-6, relative_step: bool = True,
                      indices: Sequence[int] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps ``x`` to a scalar tensor; it may also read ``x`` through a
    closure since ``x.data`` is perturbed in place. Each coordinate uses step
    ``h * max(1, |x_i|)`` when ``relative_step`` is set. The error for one
    coordinate is ``|analytic - numeric| / (|numeric| + eps_div)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if not x.requires_grad or not x.is_leaf:
        raise ValueError("x must be a leaf tensor with requires_grad=True")

    def value() -> float:
        with no_grad():
            return float(f(x).data.reshape(-1)[0])

    base = value()
    if value() != base:
        raise NonDeterministicError("f returned different values for identical input")

    x.zero_grad()
    out = f(x)
    if out.data.size != 1:
        raise GraphError("f must return a scalar tensor")
    out.backward()
    analytic = x.grad.reshape(-1).astype(np.float64, copy=True)

    flat = x.data.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        orig = flat[i]
        step = h * max(1.0, abs(float(orig))) if relative_step else h
        flat[i] = orig + step
        up = value()
        flat[i] = orig - step
        down = value()
        flat[i] = orig
        numeric = (up - down) / (2.0 * step)
        err = abs(analytic[i] - numeric) / (abs(numeric) + eps_div)
        worst = max(worst, err)
    return worst
