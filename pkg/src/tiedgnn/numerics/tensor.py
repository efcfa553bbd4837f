"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least
one input requires a gradient; outside a tape everything runs as plain
numpy, which is what inference uses.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .. import kernels


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to Tensor's reflected op

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records differentiable ops in execution order.

    Use as a context manager; ``backward`` may be called once per tape.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()
        self._leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
        self._spent = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        if self._spent:
            raise TapeError("tape already consumed by backward(); start a new tape")
        self._records.append((out, parents, backward))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        if self._spent:
            raise TapeError("backward() called twice on the same tape")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._records:
            raise TapeError("nothing recorded on this tape")
        self._spent = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in self._produced:
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
                else:
                    prev = self._leaf_grads.get(key)
                    self._leaf_grads[key] = (p, pg if prev is None else prev[1] + pg)
        for t, g in self._leaf_grads.values():
            t.grad = np.ascontiguousarray(g, dtype=np.float64).reshape(t.shape)
        self._records.clear()
        self._produced.clear()

    def gradients(self, params: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients for ``params``; parameters that did not participate get zeros."""
        if not self._spent:
            raise TapeError("call backward() first")
        out = []
        for p in params:
            hit = self._leaf_grads.get(id(p))
            out.append(hit[1].reshape(p.shape) if hit is not None else np.zeros_like(p.data))
        return out


def backward(loss: Tensor, params: Sequence[Tensor], tape: Tape) -> list[np.ndarray]:
    tape.backward(loss)
    return tape.gradients(params)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg and _TAPES:
        _TAPES[-1].record(out, parents, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise binary ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


# linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need at least two dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ in {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        # collapse leading dims into one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), bw2)

    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def dot(a, b) -> Tensor:
    """Inner product over the last axis."""
    return sum_(mul(a, b), axis=-1)


# unary -------------------------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = -np.logaddexp(0.0, -ad)
    return _make(out, (a,), lambda g: (g * _sigmoid_np(-ad),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# reductions and shape ----------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return div(sum_(a, axis, keepdims), float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, slice)) or p is None or p is Ellipsis for p in parts)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat along {axis}: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _make(out, ts, lambda g: tuple(np.split(g, cuts, axis=ax)))


def broadcast_add(a, b) -> Tensor:
    return add(a, b)


# normalisation -----------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = a.data / denom
    live = norm > eps

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(live, (g - out * proj) / denom, g / denom),)

    return _make(out, (a,), bw)


# index ops ---------------------------------------------------------------


def _width(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape[1:], dtype=np.int64))


def gather(a, idx: np.ndarray) -> Tensor:
    """Rows of ``a`` along axis 0; the adjoint of :func:`segment_sum`."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape
    out = np.take(a.data, idx, axis=0)

    def bw(g):
        flat = kernels.segment_sum(g.reshape(len(idx), _width(shape)), idx, shape[0])
        return (flat.reshape(shape),)

    return _make(out, (a,), bw)


def segment_sum(a, ids: np.ndarray, n: int) -> Tensor:
    """Sum rows of ``a`` (axis 0) into ``n`` buckets."""
    a = as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) != a.shape[0]:
        raise ShapeError(f"segment_sum: {len(ids)} ids for leading dim of {a.shape}")
    tail = a.shape[1:]
    out = kernels.segment_sum(a.data.reshape(a.shape[0], _width(a.shape)), ids, n).reshape((n,) + tail)
    return _make(out, (a,), lambda g: (np.take(g, ids, axis=0),))


def segment_mean(a, ids: np.ndarray, n: int) -> Tensor:
    counts = np.bincount(np.asarray(ids, dtype=np.int64), minlength=n).astype(np.float64)
    counts = np.maximum(counts, 1.0).reshape((n,) + (1,) * (as_tensor(a).ndim - 1))
    return div(segment_sum(a, ids, n), counts)


def segment_softmax(logits, ids: np.ndarray, n: int) -> Tensor:
    """Softmax along axis 0 within each bucket, columns independent."""
    logits = as_tensor(logits)
    ids = np.asarray(ids, dtype=np.int64)
    flat = logits.data.reshape(logits.shape[0], _width(logits.shape))
    shift = kernels.segment_max(flat, ids, n)[ids].reshape(logits.shape)
    e = exp(sub(logits, shift))
    z = segment_sum(e, ids, n)
    return div(e, gather(z, ids))


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return as_tensor(a)
    keep = (rng.random(as_tensor(a).shape) >= rate) / (1.0 - rate)
    return mul(a, keep)


# fused edge ops ------------------------------------------------------------


def edge_attention_logits(A, u, ptab, q, src: np.ndarray, w: np.ndarray, pidx: np.ndarray, slope: float) -> Tensor:
    """Per-edge, per-factor score ``q . leaky_relu(A[src] + w * u + ptab[pidx])``.

    Equivalent to gathering ``A`` per edge and composing the elementwise ops,
    without materialising the ``[E, K, D]`` intermediates.
    """
    A, u, ptab, q = (as_tensor(t) for t in (A, u, ptab, q))
    src = np.asarray(src, dtype=np.int64)
    w = np.asarray(w, dtype=np.float64)
    pidx = np.asarray(pidx, dtype=np.int64)
    if A.ndim != 3 or u.shape != (A.shape[2],) or q.shape != (A.shape[2],) or ptab.ndim != 2:
        raise ShapeError(f"edge_attention_logits: A {A.shape} u {u.shape} ptab {ptab.shape} q {q.shape}")
    out = kernels.edge_logits(A.data, src, w, pidx, u.data, ptab.data, q.data, slope)

    def bw(g):
        return kernels.edge_logits_backward(g, A.data, src, w, pidx, u.data, ptab.data, q.data, slope)

    return _make(out, (A, u, ptab, q), bw)


def weighted_gather_sum(theta, X, src: np.ndarray, dst: np.ndarray, n: int) -> Tensor:
    """``out[dst[e], k] += theta[e, k] * X[src[e], k]`` with ``X`` of shape ``[R, K, F]``."""
    theta, X = as_tensor(theta), as_tensor(X)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if X.ndim != 3 or theta.shape != (len(src), X.shape[1]):
        raise ShapeError(f"weighted_gather_sum: theta {theta.shape} X {X.shape}")
    out = kernels.weighted_gather_sum(theta.data, X.data, src, dst, n)

    def bw(g):
        return kernels.weighted_gather_sum_backward(g, theta.data, X.data, src, dst)

    return _make(out, (theta, X), bw)
