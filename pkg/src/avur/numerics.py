"""Matrix-level reverse-mode differentiation on float64 numpy arrays.

Every value is a 2-D array (time-major, row-major). Scalars are 1x1.
Broadcasting is limited to the three shapes the models need: a (1, m)
row, an (n, 1) column, or a (1, 1) scalar against an (n, m) matrix.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class GraphError(RuntimeError):
    """Raised for malformed computation records (e.g. cycles)."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation receives or produces NaN/Inf."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording a computation graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {arr.shape}")
    return arr


class Tensor:
    """A node in the computation record."""

    __slots__ = ("value", "grad", "requires_grad", "stop_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = _as_matrix(value)
        self.requires_grad = requires_grad
        self.stop_grad = False
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError("item() requires a 1x1 tensor")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Param(Tensor):
    """A trainable (or frozen) leaf with a gradient buffer."""

    __slots__ = ()

    def __init__(self, value, requires_grad: bool = True, name: str = ""):
        super().__init__(value, requires_grad=requires_grad, name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


def tensor(value, requires_grad: bool = False) -> Tensor:
    return Tensor(value, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values")


def _make(value: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.stop_grad = False
    out.name = ""
    live = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = live
    if live:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(a: tuple[int, int], b: tuple[int, int], op: str) -> None:
    for da, db in zip(a, b):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"{op}: incompatible shapes {a} and {b}")


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape, "mul")
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _make(a.value.T.copy(), (a,), lambda g: (g.T,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = 1.0 - np.finfo(np.float64).epsneg


def _sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function kept strictly inside (0, 1) where float64 would round to an endpoint."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _SIG_LO, _SIG_HI)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.value)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU (smooth, so finite differences behave)."""
    x = a.value
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(y, (a,), back)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.value)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.value
    if np.any(x <= 0):
        raise NonFiniteError("log: non-positive input")
    return _make(np.log(x), (a,), lambda g: (g / x,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    n = a.value.size
    shape = a.shape
    return _make(np.array([[a.value.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),))


def sum_rows(a: Tensor) -> Tensor:
    """Column vector of per-row sums."""
    shape = a.shape
    return _make(a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_rows(a: Tensor) -> Tensor:
    """Row vector that averages over rows (pooling over time)."""
    n, m = a.shape
    return _make(a.value.mean(axis=0, keepdims=True), (a,), lambda g: (np.broadcast_to(g / n, (n, m)).copy(),))


# structural ops

def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_lift(p) for p in parts]
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=0), parts, back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_lift(p) for p in parts]
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=1), parts, back)


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows (embedding lookup); backward scatter-adds."""
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), back)


class StopGradTape:
    """Records stop-gradient values so a later evaluation can replay them.

    A finite-difference oracle for a function containing stop-gradient
    edges must hold the stopped values fixed, otherwise it measures a
    different derivative than the one backpropagation defines.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.replaying = False
        self._cursor = 0

    def _take(self, value: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.values.append(value.copy())
            return value
        if self._cursor >= len(self.values):
            raise GraphError("stop-gradient replay ran past the recorded tape")
        saved = self.values[self._cursor]
        if saved.shape != value.shape:
            raise GraphError("stop-gradient replay shape mismatch")
        self._cursor += 1
        return saved

    @contextlib.contextmanager
    def replay(self) -> Iterator[None]:
        global _tape
        prev = _tape
        self.replaying, self._cursor = True, 0
        _tape = self
        try:
            yield
        finally:
            _tape = prev
            self.replaying = False


_tape: StopGradTape | None = None


@contextlib.contextmanager
def record_stop_grads() -> Iterator[StopGradTape]:
    global _tape
    prev = _tape
    tape = StopGradTape()
    _tape = tape
    try:
        yield tape
    finally:
        _tape = prev


def stop_grad(a: Tensor) -> Tensor:
    """Forward identity; the result has no recorded producers."""
    value = a.value if _tape is None else _tape._take(a.value)
    out = Tensor(value)
    out.stop_grad = True
    return out


# normalisation and attention

def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(m, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax, stabilised by row-max subtraction.

    Entries where the boolean ``mask`` is False get probability exactly 0.
    """
    m = _lift(m)
    _check_finite(m.value, "softmax_rows")
    if isinstance(mask, BlockMask):
        mask = mask.dense()
    if mask is None:
        y = _softmax(m.value)
    else:
        z = np.where(mask, m.value, -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _make(y, (m,), back)


def log_softmax_rows(m: Tensor) -> Tensor:
    _check_finite(m.value, "log_softmax_rows")
    z = m.value - m.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def back(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(y, (m,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalisation followed by a (1, D) affine map."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    d = x.shape[1]
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise ValueError("layer_norm: gain/bias must be (1, D)")
    mu = x.value.mean(axis=1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value

    def back(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _make(xhat * gv + bias.value, (x, gain, bias), back)


def row_entropy(p: Tensor) -> Tensor:
    """Column vector of -sum p log p per row, with 0 log 0 := 0."""
    pv = p.value
    if np.any(pv < 0):
        raise ValueError("row_entropy: negative probability")
    logp = np.log(np.where(pv > 0, pv, 1.0))
    h = -(pv * logp).sum(axis=1, keepdims=True)

    def back(g):
        return (np.where(pv > 0, -(logp + 1.0), 0.0) * g,)

    return _make(h, (p,), back)


def _attend_dense(qv, kv, vv, num_heads, mask):
    """Attention on (..., T, D) arrays; leading axes are independent batches."""
    *lead, tq, d = qv.shape
    tk = kv.shape[-2]
    dh = d // num_heads
    qh = qv.reshape(*lead, tq, num_heads, dh).swapaxes(-2, -3)
    kh = kv.reshape(*lead, tk, num_heads, dh).swapaxes(-2, -3)
    vh = vv.reshape(*lead, tk, num_heads, dh).swapaxes(-2, -3)
    c = 1.0 / math.sqrt(dh)
    s = (qh @ kh.swapaxes(-1, -2)) * c
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = (p @ vh).swapaxes(-2, -3).reshape(*lead, tq, d)

    def back(g):
        gh = g.reshape(*lead, tq, num_heads, dh).swapaxes(-2, -3)
        dv = p.swapaxes(-1, -2) @ gh
        dp = gh @ vh.swapaxes(-1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * c
        dq = ds @ kh
        dk = ds.swapaxes(-1, -2) @ qh
        return (dq.swapaxes(-2, -3).reshape(*lead, tq, d), dk.swapaxes(-2, -3).reshape(*lead, tk, d),
                dv.swapaxes(-2, -3).reshape(*lead, tk, d))

    return out, back


def attend(q: Tensor, k: Tensor, v: Tensor, num_heads: int, mask=None) -> Tensor:
    """Multi-head scaled dot-product attention on already-projected rows.

    Heads are contiguous column blocks; scale is 1/sqrt(D/H). ``mask`` is a
    boolean (Tq, Tk) array of allowed positions, or a :class:`BlockMask`
    when rows only ever see keys inside their own block. Every row must
    allow at least one key.
    """
    tq, d = q.shape
    tk = k.shape[0]
    if k.shape[1] != d or v.shape != (tk, d):
        raise ValueError(f"attend: shapes {q.shape}, {k.shape}, {v.shape} disagree")
    if d % num_heads:
        raise ValueError("model dim must be divisible by num_heads")
    if not isinstance(mask, BlockMask):
        out, back = _attend_dense(q.value, k.value, v.value, num_heads, mask)
        return _make(out, (q, k, v), back)
    if mask.shape != (tq, tk):
        raise ValueError(f"block mask shape {mask.shape} does not match ({tq}, {tk})")
    uniform = mask.uniform_diagonal()
    if uniform is not None:
        nb, lq, lk, inner = uniform
        out, b = _attend_dense(q.value.reshape(nb, lq, d), k.value.reshape(nb, lk, d),
                               v.value.reshape(nb, lk, d), num_heads, inner)

        def back_uniform(g):
            gq, gk, gv = b(g.reshape(nb, lq, d))
            return gq.reshape(tq, d), gk.reshape(tk, d), gv.reshape(tk, d)

        return _make(out.reshape(tq, d), (q, k, v), back_uniform)
    out = np.empty((tq, d))
    backs = []
    for q0, q1, k0, k1, sub in mask.blocks():
        o, b = _attend_dense(q.value[q0:q1], k.value[k0:k1], v.value[k0:k1], num_heads, sub)
        out[q0:q1] = o
        backs.append(b)

    def back(g):
        dq = np.zeros((tq, d))
        dk = np.zeros((tk, d))
        dv = np.zeros((tk, d))
        for (q0, q1, k0, k1, _), b in zip(mask.blocks(), backs):
            gq, gk, gv = b(g[q0:q1])
            dq[q0:q1] = gq
            dk[k0:k1] += gk
            dv[k0:k1] += gv
        return dq, dk, dv

    return _make(out, (q, k, v), back)


class BlockMask:
    """Sparse attention pattern: each query range sees one key range.

    ``blocks`` holds (q0, q1, k0, k1) with disjoint query ranges covering
    every query row; key ranges may repeat (several beams sharing one
    memory). Optional ``inner`` boolean masks apply within each block.
    """

    def __init__(self, blocks, shape, inner=None):
        self._blocks = [tuple(int(x) for x in b) for b in blocks]
        self.shape = (int(shape[0]), int(shape[1]))
        self.inner = inner

    @classmethod
    def diagonal(cls, q_bounds, k_bounds, inner=None) -> "BlockMask":
        if len(q_bounds) != len(k_bounds):
            raise ValueError("query and key segment counts differ")
        blocks = [(q_bounds[i], q_bounds[i + 1], k_bounds[i], k_bounds[i + 1]) for i in range(len(q_bounds) - 1)]
        return cls(blocks, (q_bounds[-1], k_bounds[-1]), inner)

    def uniform_diagonal(self):
        """(count, q_len, k_len, inner) when blocks tile both axes in equal steps and share one inner mask."""
        if self.inner is not None and any(m is not self.inner[0] for m in self.inner):
            return None
        nb = len(self._blocks)
        lq = self.shape[0] // nb if nb else 0
        lk = self.shape[1] // nb if nb else 0
        for i, (q0, q1, k0, k1) in enumerate(self._blocks):
            if (q0, q1, k0, k1) != (i * lq, (i + 1) * lq, i * lk, (i + 1) * lk):
                return None
        return nb, lq, lk, None if self.inner is None else self.inner[0]

    def blocks(self):
        for i, (q0, q1, k0, k1) in enumerate(self._blocks):
            yield q0, q1, k0, k1, None if self.inner is None else self.inner[i]

    def dense(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        for q0, q1, k0, k1, sub in self.blocks():
            m[q0:q1, k0:k1] = True if sub is None else sub
        return m


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean token-level negative log-likelihood of integer targets."""
    tgt = np.asarray(targets, dtype=np.intp)
    n = logits.shape[0]
    if tgt.shape != (n,):
        raise ValueError("cross_entropy: one target per row")
    _check_finite(logits.value, "cross_entropy")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), tgt].mean()

    def back(g):
        d = np.exp(logp)
        d[np.arange(n), tgt] -= 1.0
        return (d * (g[0, 0] / n),)

    return _make(np.array([[loss]]), (logits,), back)


# reverse sweep

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        key = id(node)
        if i == 0:
            st = state.get(key)
            if st == 2:
                continue
            if st == 1:
                raise GraphError("cycle in computation record")
            state[key] = 1
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if parent.requires_grad:
                pst = state.get(id(parent))
                if pst == 1:
                    raise GraphError("cycle in computation record")
                if pst is None:
                    stack.append((parent, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable Param."""
    if loss.shape != (1, 1):
        raise ValueError("backward requires a scalar (1x1) loss")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if isinstance(node, Param):
                node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_diff_grad(f: Callable[[], float | Tensor], params: Iterable[Param], step: float = 1e-5,
                     tape: StopGradTape | None = None) -> list[np.ndarray]:
    """Central-difference gradient estimate for every scalar of ``params``.

    Pass the ``tape`` recorded during the analytic pass when ``f`` contains
    stop-gradient edges.
    """
    if step <= 0:
        raise ValueError("step must be positive")

    def evaluate() -> float:
        with no_grad(), (tape.replay() if tape is not None else contextlib.nullcontext()):
            val = f()
        val = val.item() if isinstance(val, Tensor) else float(val)
        if not math.isfinite(val):
            raise NonFiniteError("finite_diff_grad: non-finite function value")
        return val

    out = []
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = evaluate()
            flat[i] = orig - step
            fm = evaluate()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12,
                       scale: float | None = None) -> float:
    """Largest entry-wise deviation relative to the larger gradient's max-norm.

    ``scale`` overrides the normaliser, e.g. with the max-norm of the whole
    gradient when a block is structurally zero (a key bias under softmax).
    """
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    if not a.size:
        return 0.0
    if scale is None:
        scale = max(float(np.abs(a).max()), float(np.abs(n).max()))
    return float(np.abs(a - n).max() / max(scale, floor))


def check_gradients(f: Callable[[], Tensor], params: Sequence[Param], step: float = 1e-5) -> dict[str, float]:
    """Backprop vs stop-gradient-consistent central differences, per param.

    Errors are relative to the max-norm over all checked gradients.
    """
    for p in params:
        p.zero_grad()
    with record_stop_grads() as tape:
        loss = f()
    backward(loss)
    numeric = finite_diff_grad(f, params, step, tape)
    scale = max(max(float(np.abs(p.grad).max()), float(np.abs(n).max())) for p, n in zip(params, numeric))
    return {p.name or f"param{i}": max_relative_error(p.grad, n, scale=scale)
            for i, (p, n) in enumerate(zip(params, numeric))}


# modules and parameters

def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, int]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Attribute-walking parameter container."""

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Param):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_params(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{name}.{i}.")
                    elif isinstance(item, Param):
                        yield f"{name}.{i}", item

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def trainable(self) -> list[Param]:
        return [p for p in self.params() if p.requires_grad]

    def freeze(self) -> "Module":
        for p in self.params():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.params():
            p.requires_grad = True
        return self

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_params()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_params())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != p.value.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.value.shape}")
            p.value = arr.copy()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Param(uniform_init(rng, d_in, (d_in, d_out)))
        self.bias = Param(np.zeros((1, d_out))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Param(np.ones((1, d)))
        self.shift = Param(np.zeros((1, d)))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift, self.eps)


class FeedForward(Module):
    """Two-layer perceptron with GELU."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int

    def __post_init__(self):
        if self.num_heads < 1:
            raise ValueError("num_heads must be >= 1")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


class MultiHeadAttention(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        d = cfg.model_dim
        self.cfg = cfg
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.o_proj = Linear(d, d, rng)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return mha(q, k, v, self.cfg, self, mask)


def mha(q, k, v, cfg: AttentionConfig, params: MultiHeadAttention, mask: np.ndarray | None = None) -> Tensor:
    """Project, attend per head, concatenate and output-project."""
    q, k, v = _lift(q), _lift(k), _lift(v)
    d = cfg.model_dim
    if q.shape[1] != d or k.shape[1] != d or v.shape[1] != d:
        raise ValueError(f"mha: feature dims {q.shape[1]}, {k.shape[1]}, {v.shape[1]} != {d}")
    if k.shape[0] != v.shape[0]:
        raise ValueError("mha: keys and values need the same length")
    heads = attend(params.q_proj(q), params.k_proj(k), params.v_proj(v), cfg.num_heads, mask)
    return params.o_proj(heads)


class AdamW:
    """Decoupled weight-decay Adam with optional global-norm clipping.

    ``lr_scale`` gives each param a multiplier on the step size.
    """

    def __init__(self, params: Sequence[Param], lr: float = 1e-3, betas=(0.9, 0.98), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_norm: float | None = 1.0, lr_scale: Sequence[float] | None = None):
        self.params = list(params)
        self.lr_scale = [1.0] * len(self.params) if lr_scale is None else [float(c) for c in lr_scale]
        if len(self.lr_scale) != len(self.params):
            raise ValueError("one lr multiplier per param")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        grads = [p.grad for p in self.params]
        if self.clip_norm is not None:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if total > self.clip_norm:
                grads = [g * (self.clip_norm / total) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v, c in zip(self.params, grads, self.m, self.v, self.lr_scale):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.value.shape[0] > 1 and p.value.shape[1] > 1:
                update = update + self.weight_decay * p.value
            p.value = p.value - lr * c * update


def cosine_lr(step: int, total: int, base: float, warmup: int = 0, floor: float = 0.0) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    frac = min(1.0, (step - warmup) / max(1, total - warmup))
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * frac))


def segment_mask(seg_q, seg_k) -> np.ndarray | None:
    """Allow attention only within the same segment; None if one segment."""
    seg_q = np.asarray(seg_q)
    seg_k = np.asarray(seg_k)
    if seg_q.size and seg_k.size and seg_q.min() == seg_q.max() == seg_k.min() == seg_k.max():
        return None
    return seg_q[:, None] == seg_k[None, :]


def causal_mask(seg, pos) -> np.ndarray:
    seg = np.asarray(seg)
    pos = np.asarray(pos)
    return (seg[:, None] == seg[None, :]) & (pos[None, :] <= pos[:, None])
