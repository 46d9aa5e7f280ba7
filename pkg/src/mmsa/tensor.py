"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs requires gradients.  Gradients are obtained with
:func:`backward`, which replays the tape in reverse.

    with Tape() as tape:
        loss = (x @ w).sum()
    grads = backward(tape, loss)
    grads[w]
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(ValueError):
    pass


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of differentiable operations executed while active."""

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)


class no_tape:
    """Suspend recording (forward-only evaluation inside an active tape)."""

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(None)

    def __exit__(self, *exc):
        _local.stack.pop()
        return False


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.records.append(_Record(out, inputs, vjp))
        else:
            out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to leaf tensors on ``tape``.

    Returns a mapping keyed by tensor identity.  Leaves that appear on the
    tape but do not influence ``loss`` map to zeros; tensors in ``wrt`` that
    never appeared on the tape also map to zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(r.out) for r in tape.records}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves.setdefault(id(t), t)
            continue
        parts = rec.vjp(g)
        for t, gi in zip(rec.inputs, parts):
            if not t.requires_grad:
                continue
            if id(t) not in produced:
                leaves.setdefault(id(t), t)
            if gi is None:
                continue
            gi = _unbroadcast(np.asarray(gi, dtype=np.float64), t.shape)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    out: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        out[t] = grads.get(key, np.zeros_like(t.data))
    if loss.requires_grad and not tape.records and id(loss) in grads:
        out[loss] = grads[id(loss)]
    for t in wrt or ():
        if t not in out:
            out[t] = np.zeros_like(t.data)
    return out


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _softplus_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    hi, lo = x > 30.0, x < -30.0
    mid = ~(hi | lo)
    out[hi] = x[hi]
    out[lo] = np.exp(x[lo])
    out[mid] = np.log1p(np.exp(x[mid]))
    return out


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a) -> Tensor:
    """ln(1 + e^x), branched at |x| > 30 to avoid overflow."""
    a = as_tensor(a)
    sig = sigmoid_np(a.data)
    return _make(_softplus_np(a.data), (a,), lambda g: (g * sig,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


# --------------------------------------------------------------------------
# reductions and shape


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), vjp)


def take_rows(a, index: np.ndarray) -> Tensor:
    """Row gather ``a[index]`` for a 2-D tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]

    def vjp(g):
        full = np.zeros((n,) + g.shape[1:])
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    return _make(
        np.stack([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))),
    )


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def spmm(m: sp.spmatrix, x) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    x = as_tensor(x)
    if m.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm inner dimensions differ: {m.shape} @ {x.shape}")
    m = sp.csr_matrix(m)
    mt = m.T.tocsr()
    return _make(np.asarray(m @ x.data), (x,), lambda g: (np.asarray(mt @ g),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.data.size == 0 or a.shape[axis] == 0:
        raise DomainError("softmax of an empty vector")
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp)


def norm(a, axis=None, keepdims=False, eps: float = 0.0) -> Tensor:
    """Euclidean norm; the gradient at a zero vector is taken as zero.

    With ``eps > 0`` the result is floored at ``eps`` (gradient zero below it).
    """
    a = as_tensor(a)
    ad = a.data
    n = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=True))
    out = np.maximum(n, eps) if eps > 0 else n
    active = n > eps if eps > 0 else n > 0
    safe = np.where(active, n, 1.0)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None and not keepdims:
            g = np.reshape(g, (1,) * ad.ndim)
        return (g * np.where(active, ad / safe, 0.0),)

    res = out if keepdims else (np.squeeze(out, axis=axis) if axis is not None else out.reshape(()))
    return _make(res, (a,), vjp)


def cosine_similarity(u, v) -> Tensor:
    """dot(u, v) / (|u| |v|) for two vectors."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity shapes differ: {u.shape} vs {v.shape}")
    if not np.any(u.data) or not np.any(v.data):
        raise DomainError("cosine similarity of a zero vector")
    return (u * v).sum() / (norm(u) * norm(v))


def row_normalize(a, eps: float = 1e-12) -> Tensor:
    return a / norm(a, axis=1, keepdims=True, eps=eps)


def cosine_matrix(a, b, eps: float = 1e-12) -> Tensor:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    return row_normalize(a, eps) @ row_normalize(b, eps).T


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution on NHWC input with an (kh, kw, cin, cout) kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d shapes incompatible: x {x.shape}, w {w.shape}")
    n, hgt, wid, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (hgt + 2 * pad - kh) // stride + 1
    wo = (wid + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # win: (n, H', W', cin, kh, kw) -> strided output positions
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        inputs = (x, w, b)

    def vjp(g):
        g2 = g.reshape(n * ho * wo, cout)
        dw = (cols.T @ g2).reshape(kh, kw, cin, cout)
        dcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, pad : pad + hgt, pad : pad + wid, :]
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    return _make(out, inputs, vjp)


# --------------------------------------------------------------------------
# verification and optimisation


@dataclass
class GradCheckResult:
    max_rel_error: float
    param_index: int | None = None
    element_index: tuple[int, ...] | None = None
    finite: bool = True

    def __float__(self):
        return self.max_rel_error


def finite_diff_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                      elements: int | None = None, seed: int = 0) -> GradCheckResult:
    """Compare taped gradients of ``f(params)`` with central differences.

    Error per element is |analytic - numeric| / max(1e-8, |numeric|); the
    worst element is reported.  Non-finite evaluations are reported as a
    failure carrying the offending parameter index.  With ``elements`` set,
    only that many seeded random entries of each parameter are probed.
    """
    pick = np.random.default_rng(seed)
    params = list(params)
    with Tape() as tape:
        loss = f(params)
    if not np.all(np.isfinite(loss.data)):
        return GradCheckResult(float("inf"), None, None, finite=False)
    grads = backward(tape, loss, wrt=params)
    worst = GradCheckResult(0.0)
    for pi, p in enumerate(params):
        analytic = grads[p]
        base = p.data
        indices = list(np.ndindex(base.shape))
        if elements is not None and elements < len(indices):
            indices = [indices[i] for i in sorted(pick.choice(len(indices), elements, replace=False))]
        for idx in indices:
            orig = base[idx]
            plus = base.copy()
            plus[idx] = orig + eps
            p.data = plus
            with no_tape():
                fp = float(f(params).data)
            minus = base.copy()
            minus[idx] = orig - eps
            p.data = minus
            with no_tape():
                fm = float(f(params).data)
            p.data = base
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckResult(float("inf"), pi, idx, finite=False)
            numeric = (fp - fm) / (2 * eps)
            err = abs(analytic[idx] - numeric) / max(1e-8, abs(numeric))
            if err > worst.max_rel_error:
                worst = GradCheckResult(err, pi, idx)
    return worst


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> list[Tensor]:
    """One bias-corrected Adam update; parameter arrays are replaced, not mutated."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return list(params)
