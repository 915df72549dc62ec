"""A small tape-based reverse-mode autodiff over float64 numpy arrays.

Only what the graph network needs: dense 2-D ops, row gathers, segment
reductions keyed by a target index, and a weighted cross-entropy. Ops record a
backward closure on the active :class:`Tape`; with no tape active they just
compute values.
"""
from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor({self.name or ''}shape={self.shape}, requires_grad={self.requires_grad})"


def _acc(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Accumulate ``g`` into ``t.grad``; ``fresh`` arrays are owned by nobody else and can be adopted."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.reshape(t.value.shape) if fresh else np.array(g, dtype=np.float64, copy=True).reshape(t.value.shape)
    else:
        t.grad += g.reshape(t.value.shape)


class Tape:
    """Ordered record of backward closures; use as a context manager."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[Callable[[], None]] = []
        self.visits = 0

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None

    def backward(self, loss: Tensor) -> None:
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.value)
        for rec in reversed(self.records):
            rec()
            self.visits += 1
        self.records.clear()


def _out(value: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    tape = Tape.active()
    need = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=need)
    if need:
        tape.records.append(lambda: backward(out) if out.grad is not None else None)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# dense primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(o):
        if a.requires_grad:
            _acc(a, o.grad @ b.value.T, True)
        if b.requires_grad:
            _acc(b, a.value.T @ o.grad, True)

    return _out(a.value @ b.value, (a, b), bw)


def linear_relu(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``relu(x @ w + b)`` storing only the output."""
    if x.value.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (1, w.shape[1]):
        raise ShapeError(f"linear_relu shape mismatch {x.shape} @ {w.shape} + {b.shape}")
    v = x.value @ w.value
    v += b.value
    np.maximum(v, 0.0, out=v)

    def bw(o):
        g = o.grad * (o.value > 0)
        if x.requires_grad:
            _acc(x, g @ w.value.T, True)
        if w.requires_grad:
            _acc(w, x.value.T @ g, True)
        if b.requires_grad:
            _acc(b, g.sum(axis=0, keepdims=True), True)

    return _out(v, (x, w, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        v = a.value + b.value
    except ValueError as exc:
        raise ShapeError(f"add shape mismatch {a.shape} + {b.shape}") from exc

    def bw(o):
        # each gradient buffer has one owner; ``o`` is finished, so ``a`` may adopt its buffer
        ga = _unbroadcast(o.grad, a.shape)
        gb = _unbroadcast(o.grad, b.shape)
        _acc(a, ga, True)
        _acc(b, gb, gb is not ga)

    return _out(v, (a, b), bw)


def add_n(ts: list[Tensor]) -> Tensor:
    if len(ts) == 1:
        return ts[0]
    shape = ts[0].shape
    for t in ts:
        if t.shape != shape:
            raise ShapeError(f"add_n shape mismatch {[x.shape for x in ts]}")
    v = ts[0].value.copy()
    for t in ts[1:]:
        v += t.value

    def bw(o):
        for k, t in enumerate(ts):
            _acc(t, o.grad, k == 0)

    return _out(v, tuple(ts), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    try:
        v = a.value * b.value
    except ValueError as exc:
        raise ShapeError(f"mul shape mismatch {a.shape} * {b.shape}") from exc

    def bw(o):
        if a.requires_grad:
            _acc(a, _unbroadcast(o.grad * b.value, a.shape), True)
        if b.requires_grad:
            _acc(b, _unbroadcast(o.grad * a.value, b.shape), True)

    return _out(v, (a, b), bw)


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a constant (scalar or array broadcastable to ``a``)."""
    c = np.asarray(c, dtype=np.float64)
    return _out(a.value * c, (a,), lambda o: _acc(a, _unbroadcast(o.grad * c, a.shape), True))


def concat(ts: list[Tensor], axis: int = 1) -> Tensor:
    try:
        v = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shape mismatch {[t.shape for t in ts]}") from exc
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(o):
        for t, g in zip(ts, np.split(o.grad, cuts, axis=axis)):
            _acc(t, g, True)

    return _out(v, tuple(ts), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _out(np.where(mask, a.value, 0.0), (a,), lambda o: _acc(a, o.grad * mask, True))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    k = np.where(a.value > 0, 1.0, slope)
    return _out(a.value * k, (a,), lambda o: _acc(a, o.grad * k, True))


def total(a: Tensor) -> Tensor:
    return _out(np.array(a.value.sum()), (a,), lambda o: _acc(a, np.broadcast_to(o.grad, a.shape)))


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]

    def bw(o):
        if not a.requires_grad:
            return
        g = o.grad.reshape(len(idx), -1)
        # transpose of the gather as a sparse product; deterministic order
        s = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n, len(idx)))
        _acc(a, (s @ g).reshape((n,) + a.shape[1:]), True)

    return _out(a.value[idx], (a,), bw)


def scatter_rows(a: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Place row i of ``a`` at row ``idx[i]`` of an ``n``-row zero matrix (``idx`` unique)."""
    idx = np.asarray(idx, dtype=np.int64)
    v = np.zeros((n,) + a.shape[1:])
    v[idx] = a.value
    return _out(v, (a,), lambda o: _acc(a, o.grad[idx], True))


def scatter_sum(parts: list[tuple[Tensor, np.ndarray]], n: int, width: int) -> Tensor:
    """Sum of ``scatter_rows(a, idx, n)`` over ``parts`` without the per-part zero matrices."""
    v = np.zeros((n, width))
    for a, idx in parts:
        v[idx] += a.value

    def bw(o):
        for a, idx in parts:
            _acc(a, o.grad[idx], True)

    return _out(v, tuple(a for a, _ in parts), bw)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or not training."""
    if not train or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _out(a.value * keep, (a,), lambda o: _acc(a, o.grad * keep, True))


# ---------------------------------------------------------------------------
# segment (per-target) reductions


class Segments:
    """Grouping of ``E`` items into ``n`` segments by ``seg[e]``.

    The sum operator is kept as a CSR matrix so that reductions are sparse
    products with a fixed summation order.
    """

    def __init__(self, seg: np.ndarray, n: int):
        self.seg = np.asarray(seg, dtype=np.int64)
        self.n = int(n)
        e = len(self.seg)
        if e and (self.seg.min() < 0 or self.seg.max() >= n):
            raise ShapeError(f"segment ids out of range [0, {n})")
        self.S = sp.csr_matrix((np.ones(e), (self.seg, np.arange(e))), shape=(self.n, e))
        self.counts = np.bincount(self.seg, minlength=self.n).astype(np.float64)
        self.order = np.argsort(self.seg, kind="stable")
        self.sorted = bool(np.all(np.diff(self.seg) >= 0))
        ss = self.seg[self.order]
        self._starts = np.concatenate([[0], np.nonzero(np.diff(ss))[0] + 1]) if e else np.empty(0, np.int64)
        self._heads = ss[self._starts] if e else np.empty(0, np.int64)

    def __len__(self) -> int:
        return len(self.seg)

    def nonempty(self) -> np.ndarray:
        return np.nonzero(self.counts > 0)[0]

    def reduce_max(self, x: np.ndarray) -> np.ndarray:
        out = np.full(self.n, -np.inf)
        if len(x) == 0:
            return out
        out[self._heads] = np.maximum.reduceat(x if self.sorted else x[self.order], self._starts)
        return out


def segment_sum(x: Tensor, segs: Segments) -> Tensor:
    if x.shape[0] != len(segs):
        raise ShapeError(f"segment_sum: {x.shape[0]} rows vs {len(segs)} segment ids")
    v = segs.S @ x.value.reshape(len(segs), -1)
    return _out(v.reshape((segs.n,) + x.shape[1:]), (x,), lambda o: _acc(x, o.grad[segs.seg], True))


def segment_mean(x: Tensor, segs: Segments) -> Tensor:
    inv = np.divide(1.0, segs.counts, out=np.zeros(segs.n), where=segs.counts > 0)
    s = segment_sum(x, segs)
    return scale(s, inv.reshape((-1,) + (1,) * (x.value.ndim - 1)))


def segment_softmax(scores: Tensor, segs: Segments) -> Tensor:
    """Softmax of a per-item score vector within each segment."""
    s = scores.value.reshape(-1)
    if len(s) != len(segs):
        raise ShapeError(f"segment_softmax: {len(s)} scores vs {len(segs)} segment ids")
    mx = segs.reduce_max(s)
    ex = np.exp(s - mx[segs.seg]) if len(s) else s.copy()
    den = segs.S @ ex
    alpha = ex / den[segs.seg] if len(s) else ex

    def bw(o):
        g = o.grad.reshape(-1)
        dot = segs.S @ (alpha * g)
        _acc(scores, alpha * (g - dot[segs.seg]), True)

    return _out(alpha.reshape(scores.shape), (scores,), bw)


def _transpose(a: sp.csr_matrix) -> sp.csr_matrix:
    at = getattr(a, "_cached_t", None)
    if at is None:
        at = a.T.tocsr()
        a._cached_t = at
    return at


def spmm(a: sp.spmatrix, x: Tensor) -> Tensor:
    """Product with a fixed sparse matrix."""
    if a.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm shape mismatch {a.shape} @ {x.shape}")
    return _out(a @ x.value, (x,), lambda o: _acc(x, _transpose(a) @ o.grad, True))


# ---------------------------------------------------------------------------
# fused edge ops: per-edge (E x H) intermediates live only inside one chunk and
# are recomputed in the backward pass

EDGE_CHUNK = 1 << 15
EDGE_CACHE = 1 << 22  # per-edge activations up to this many floats are kept for backward


def _chunks(n: int):
    for lo in range(0, n, EDGE_CHUNK):
        yield lo, min(lo + EDGE_CHUNK, n)


_PATTERNS: OrderedDict = OrderedDict()
_PATTERN_SLOTS = 256


def _pattern(rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int]):
    """CSR structure of (rows, cols) plus the item order, cached per index-array pair.

    Entries keep references to the arrays, so their ids stay valid while cached.
    Returns None when (rows, cols) has duplicate pairs.
    """
    key = (id(rows), id(cols), shape)
    hit = _PATTERNS.get(key)
    if hit is not None and hit[0] is rows and hit[1] is cols:
        _PATTERNS.move_to_end(key)
        return hit[2]
    m = sp.csr_matrix((np.arange(1, len(rows) + 1, dtype=np.float64), (rows, cols)), shape=shape)
    pat = None
    if m.nnz == len(rows):
        pat = (m.indptr, m.indices, m.data.astype(np.int64) - 1)
    _PATTERNS[key] = (rows, cols, pat)
    if len(_PATTERNS) > _PATTERN_SLOTS:
        _PATTERNS.popitem(last=False)
    return pat


def _csr(values: np.ndarray, rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int]) -> sp.csr_matrix:
    pat = _pattern(rows, cols, shape)
    if pat is None:
        return sp.csr_matrix((values, (rows, cols)), shape=shape)
    indptr, indices, order = pat
    return sp.csr_matrix((values[order], indices, indptr), shape=shape)


def _scatter_add(out: np.ndarray, idx: np.ndarray, g: np.ndarray) -> None:
    """``out[idx[k]] += g[k]`` via a sparse product (fixed summation order)."""
    order = np.argsort(idx, kind="stable")
    indptr = np.zeros(out.shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(idx, minlength=out.shape[0]), out=indptr[1:])
    out += sp.csr_matrix((np.ones(len(idx)), order, indptr), shape=(out.shape[0], len(idx))) @ g


def gatv2_scores(xs: Tensor, xd: Tensor, w_edge: Tensor, att: Tensor, src: np.ndarray, dst: np.ndarray,
                 e: np.ndarray, slope: float) -> Tensor:
    """``s_k = att . leaky(xs[src_k] + xd[dst_k] + e_k w_edge)`` for every edge ``k``; shape (E, 1)."""
    e = np.asarray(e, dtype=np.float64).reshape(-1, 1)
    n_e = len(src)
    keep = n_e * xs.shape[1] <= EDGE_CACHE

    def z_of(lo, hi):
        z = xs.value[src[lo:hi]]
        z += xd.value[dst[lo:hi]]
        z += e[lo:hi] * w_edge.value
        return z

    v = np.empty((n_e, 1))
    cache = []
    for lo, hi in _chunks(n_e):
        z = z_of(lo, hi)
        v[lo:hi] = np.where(z > 0, z, slope * z) @ att.value
        if keep:
            cache.append(z)

    def bw(o):
        g_xs, g_xd = np.zeros_like(xs.value), np.zeros_like(xd.value)
        g_w, g_att = np.zeros_like(w_edge.value), np.zeros_like(att.value)
        for k, (lo, hi) in enumerate(_chunks(n_e)):
            z = cache[k] if keep else z_of(lo, hi)
            d = np.where(z > 0, 1.0, slope)
            gs = o.grad[lo:hi]
            z *= d  # z now holds leaky(z); the cache is not needed again
            g_att += z.T @ gs
            d *= gs
            d *= att.value.T  # d now holds dL/dz
            g_w += e[lo:hi].T @ d
            _scatter_add(g_xs, src[lo:hi], d)
            _scatter_add(g_xd, dst[lo:hi], d)
        for t, g in ((xs, g_xs), (xd, g_xd), (w_edge, g_w), (att, g_att)):
            _acc(t, g, True)

    return _out(v, (xs, xd, w_edge, att), bw)


def weighted_sum(alpha: Tensor, x: Tensor, src: np.ndarray, seg, n: int) -> Tensor:
    """``out[i] = sum over edges k with seg[k] == i of alpha_k x[src_k]``.

    ``seg`` is an index array or a ``Segments``; small edge sets given as
    ``Segments`` reuse its fixed sum operator.
    """
    if isinstance(seg, Segments):
        if len(src) <= EDGE_CHUNK and seg.n == n:
            return _weighted_sum_small(alpha, x, src, seg)
        seg = seg.seg
    a = _csr(alpha.value.reshape(-1), seg, src, (n, x.shape[0]))

    def bw(o):
        if x.requires_grad:
            _acc(x, a.T @ o.grad, True)
        if alpha.requires_grad:
            ga = np.empty(len(src))
            for lo, hi in _chunks(len(src)):
                ga[lo:hi] = np.einsum("ij,ij->i", o.grad[seg[lo:hi]], x.value[src[lo:hi]])
            _acc(alpha, ga.reshape(alpha.shape), True)

    return _out(a @ x.value, (alpha, x), bw)


def _weighted_sum_small(alpha: Tensor, x: Tensor, src: np.ndarray, segs: Segments) -> Tensor:
    al = alpha.value.reshape(-1, 1)
    xs = x.value[src]

    def bw(o):
        g = o.grad[segs.seg]
        if x.requires_grad:
            gx = np.zeros_like(x.value)
            _scatter_add(gx, src, al * g)
            _acc(x, gx, True)
        if alpha.requires_grad:
            _acc(alpha, np.einsum("ij,ij->i", g, xs).reshape(alpha.shape), True)

    return _out(segs.S @ (al * xs), (alpha, x), bw)


def gine_sum(xs: Tensor, w_edge: Tensor, src: np.ndarray, seg: np.ndarray, e: np.ndarray, n: int) -> Tensor:
    """``out[i] = sum over edges k into i of relu(xs[src_k] + e_k w_edge)``."""
    e = np.asarray(e, dtype=np.float64).reshape(-1, 1)
    n_e = len(src)
    v = np.zeros((n, xs.shape[1]))
    for lo, hi in _chunks(n_e):
        _scatter_add(v, seg[lo:hi], np.maximum(xs.value[src[lo:hi]] + e[lo:hi] * w_edge.value, 0.0))

    def bw(o):
        g_xs, g_w = np.zeros_like(xs.value), np.zeros_like(w_edge.value)
        for lo, hi in _chunks(n_e):
            z = xs.value[src[lo:hi]] + e[lo:hi] * w_edge.value
            gz = o.grad[seg[lo:hi]] * (z > 0)
            g_w += e[lo:hi].T @ gz
            _scatter_add(g_xs, src[lo:hi], gz)
        _acc(xs, g_xs, True)
        _acc(w_edge, g_w, True)

    return _out(v, (xs, w_edge), bw)


# ---------------------------------------------------------------------------
# loss


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean over rows of ``w[y] * -log softmax(logits)[y]``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} vs logits {logits.shape}")
    w = np.ones(c) if weights is None else np.asarray(weights, dtype=np.float64)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    wy = w[labels]
    loss = float(-(wy * logp[rows, labels]).sum() / max(n, 1))

    def bw(o):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        _acc(logits, o.grad * p * (wy / max(n, 1))[:, None])

    return _out(np.array(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# verification


def _five_point(f, flat: np.ndarray, i: int, h: float, force: bool = False, kink_tol: float = 1e-3):
    """Fourth-order derivative estimate along ``flat[i]``; None when the loss looks non-smooth.

    The central differences at ``h`` and ``2h`` agree up to O(h^2) on a smooth
    function. A larger gap means a ReLU-type kink lies inside the stencil.
    """
    old = flat[i]
    vals = []
    for step in (2.0, 1.0, -1.0, -2.0):
        flat[i] = old + step * h
        vals.append(float(f().value))
    flat[i] = old
    d1 = (vals[1] - vals[2]) / (2.0 * h)
    d2 = (vals[0] - vals[3]) / (4.0 * h)
    # round-off in the loss values bounds how well d1 and d2 can agree
    noise = 64.0 * np.finfo(np.float64).eps * max(abs(v) for v in vals) / h
    if not force and abs(d1 - d2) > kink_tol * max(abs(d1), abs(d2), 1e-6) + noise:
        return None
    return (4.0 * d1 - d2) / 3.0


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-4,
               max_entries: int | None = None, seed: int = 0, atol: float = 1e-6) -> float:
    """Maximum relative error between tape gradients and five-point central differences.

    ``f`` rebuilds the scalar loss from the current parameter values. With
    ``max_entries`` only that many randomly chosen entries per tensor are probed.
    Entries whose analytic and numeric gradients are both below ``atol`` count
    as exact (finite-difference round-off on true zeros). The fourth-order
    stencil allows a larger ``h``, which keeps round-off small when the loss is
    large compared with individual gradient entries; entries whose stencil
    crosses a kink are re-probed with ``h / 10``.
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params.values():
        flat = p.value.reshape(-1)
        ana = np.zeros_like(flat) if p.grad is None else p.grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        for i in idx:
            old = flat[i]
            num = _five_point(f, flat, i, h)
            if num is None:
                # the stencil straddles a kink; a narrower one usually does not
                num = _five_point(f, flat, i, h / 10.0, force=True)
            a = ana[i]
            if abs(a) < atol and abs(num) < atol:
                continue
            worst = max(worst, abs(a - num) / (abs(a) + abs(num) + 1e-12))
    return worst


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None], state: AdamState,
              lr: float) -> dict[str, np.ndarray]:
    """In-place bias-corrected ADAM update; missing gradients count as zero."""
    for k, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass
class OneCycleSchedule:
    max_lr: float = 0.001
    total_steps: int = 600
    warmup: float = 0.3
    div_start: float = 25.0
    div_final: float = 1e4

    def __post_init__(self):
        if self.total_steps < 1 or self.max_lr <= 0:
            raise ValueError("total_steps must be >= 1 and max_lr > 0")


def _cos(start: float, end: float, frac: float) -> float:
    return end + (start - end) * (1 + math.cos(math.pi * frac)) / 2


def one_cycle_lr(s: OneCycleSchedule, step: int) -> float:
    lo = s.max_lr / s.div_start
    final = s.max_lr / s.div_final
    if step < 0 or step >= s.total_steps:
        return final
    peak = max(int(round(s.warmup * s.total_steps)) - 1, 0)
    if step <= peak:
        return _cos(lo, s.max_lr, step / peak) if peak else s.max_lr
    span = s.total_steps - 1 - peak
    return _cos(s.max_lr, final, (step - peak) / span)


# ---------------------------------------------------------------------------
# parameter checkpoints

_CKPT_MAGIC = b"HGPARAM\x01"


def save_params(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Versioned binary: magic, u32 count, then per entry name/shape/float64 data (little endian)."""
    import json

    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(meta_b)))
        fh.write(meta_b)
        fh.write(struct.pack("<I", len(params)))
        for k in sorted(params):
            a = np.ascontiguousarray(params[k], dtype="<f8")
            kb = k.encode()
            fh.write(struct.pack("<H", len(kb)) + kb)
            fh.write(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(a.tobytes())


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    import json

    buf = Path(path).read_bytes()
    if buf[:8] != _CKPT_MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic at byte 0)")
    off = 8

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(buf):
            raise ValueError(f"truncated checkpoint at byte {off}")
        vals = struct.unpack_from(fmt, buf, off)
        off += size
        return vals

    (ml,) = take("<I")
    meta = json.loads(buf[off:off + ml].decode())
    off += ml
    (n,) = take("<I")
    out = {}
    for _ in range(n):
        (kl,) = take("<H")
        key = buf[off:off + kl].decode()
        off += kl
        (nd,) = take("<I")
        shape = take(f"<{nd}Q") if nd else ()
        count = int(np.prod(shape)) if nd else 1
        if off + 8 * count > len(buf):
            raise ValueError(f"truncated data for {key!r} at byte {off}")
        out[key] = np.frombuffer(buf, "<f8", count, off).reshape(shape).astype(np.float64)
        off += 8 * count
    return out, meta
