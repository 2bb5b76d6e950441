"""Minimal reverse-mode autodiff over float64 numpy arrays.

Each differentiable primitive appends an entry to the calling thread's
:class:`Tape`; :func:`backward` replays those entries in reverse recording
order.  Broadcasting is limited to scalar-with-tensor.  Anything else
(bias add, per-sample conditioning) goes through an explicit primitive such as
:func:`linear` or :func:`expand` so every adjoint rule stays small.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import kernels


class DiffError(Exception):
    pass


class ShapeError(DiffError, ValueError):
    pass


class RankError(DiffError, ValueError):
    pass


class DegenerateMaskError(DiffError, ValueError):
    pass


class DeterminismError(DiffError, RuntimeError):
    pass


class NonFiniteError(DiffError, FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class _Entry:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of primitive applications for one thread."""

    def __init__(self):
        self.entries: list[_Entry] = []

    def __len__(self):
        return len(self.entries)

    def clear(self):
        self.entries.clear()


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def reset_tape():
    current_tape().clear()


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of a primitive.

    ``backward(g)`` must return one gradient (or ``None``) per parent, each in
    that parent's shape.  Public so callers can register custom primitives.
    """
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        current_tape().entries.append(_Entry(out, tuple(parents), backward))
    return out


def backward(loss: Tensor, params: Sequence[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves seen on the tape but not on the path to ``loss`` (and any tensor in
    ``params`` without a gradient) receive zeros.  The tape is consumed.
    """
    if loss.data.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    entries = tape.entries
    produced = {id(e.out) for e in entries}
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss
    for e in reversed(entries):
        g = adj.pop(id(e.out), None)
        if g is None:
            for p in e.parents:
                if p.requires_grad and id(p) not in produced:
                    leaves[id(p)] = p
            continue
        grads = e.backward(g)
        for p, gp in zip(e.parents, grads):
            if not p.requires_grad:
                continue
            k = id(p)
            if k not in produced:
                leaves[k] = p
            if gp is None:
                continue
            prev = adj.get(k)
            adj[k] = gp if prev is None else prev + gp
    for k, leaf in leaves.items():
        g = adj.get(k)
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        if g is not None:
            leaf.grad = leaf.grad + g
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    tape.clear()


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor):
    if a.shape == b.shape:
        return None
    if a.ndim == 0:
        return "a"
    if b.ndim == 0:
        return "b"
    raise ShapeError(f"shapes {a.shape} and {b.shape} differ (only scalar broadcasting is supported)")


def _reduce_for(kind, which, g):
    return g.sum() if kind == which else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _binary_shapes(a, b)
    return record_op(a.data + b.data, (a, b), lambda g: (_reduce_for(kind, "a", g), _reduce_for(kind, "b", g)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _binary_shapes(a, b)
    return record_op(a.data - b.data, (a, b), lambda g: (_reduce_for(kind, "a", g), -_reduce_for(kind, "b", g)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _binary_shapes(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _reduce_for(kind, "a", g * bd) if a.requires_grad else None
        gb = _reduce_for(kind, "b", g * ad) if b.requires_grad else None
        return ga, gb

    return record_op(ad * bd, (a, b), bw)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return record_op(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def abs_(x: Tensor) -> Tensor:
    xd = x.data
    return record_op(np.abs(xd), (x,), lambda g: (np.sign(xd) * g,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return record_op(y, (x,), lambda g: (y * g,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record_op(y, (x,), lambda g: ((1.0 - y * y) * g,))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-xd))
    return record_op(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    y, dy = kernels.gelu(x.data)
    return record_op(y, (x,), lambda g: (g * dy,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return record_op(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[..., k] @ w[k, n] (+ b[n])``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {w.shape}")
    xd, wd = x.data, w.data
    k, n = wd.shape
    y = xd @ wd
    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        if b.shape != (n,):
            raise ShapeError(f"linear: bias shape {b.shape}, expected {(n,)}")
        y = y + b.data

    def bw(g):
        g2 = g.reshape(-1, n)
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, k).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return record_op(y, parents, bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over identical leading dims: ``(..., m, k) @ (..., k, n)``."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return record_op(ad @ bd, (a, b), bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return record_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return record_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record_op(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    adv = _is_advanced(idx)

    def bw(g):
        out = np.zeros(shape)
        if adv:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return record_op(x.data[idx], (x,), bw)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; gradients scatter-add back (duplicates sum)."""
    indices = np.asarray(indices, dtype=np.int64)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0) if indices.ndim == 1 else g)
        return (out,)

    if indices.ndim != 1:
        if axis != 0:
            raise ShapeError("take with multi-dim indices supports axis=0 only")
    return record_op(np.take(x.data, indices, axis=axis), (x,), bw)


def expand(x: Tensor, axis: int, size: int) -> Tensor:
    """Insert ``axis`` and repeat ``size`` times (explicit broadcast)."""
    y = np.repeat(np.expand_dims(x.data, axis), size, axis=axis)
    return record_op(y, (x,), lambda g: (g.sum(axis=axis),))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record_op(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# fused transformer primitives
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance (no affine)."""
    y, inv = kernels.layernorm_fwd(x.data, eps)
    return record_op(y, (x,), lambda g: (kernels.layernorm_bwd(y, inv, g),))


def masked_softmax(logits: Tensor, visible: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``visible`` entries.

    ``visible`` is a constant boolean array broadcastable to ``logits``.
    Masked entries come out as exact zeros and receive exact-zero gradient.
    """
    visible = np.asarray(visible, dtype=bool)
    try:
        full = np.broadcast_to(visible, logits.shape)
    except ValueError as exc:
        raise ShapeError(f"mask {visible.shape} does not fit logits {logits.shape}") from exc
    if not visible.any(axis=-1).all():
        raise DegenerateMaskError("a softmax row has no visible entry")
    p = kernels.masked_softmax_fwd(logits.data, full)
    return record_op(p, (logits,), lambda g: (kernels.softmax_bwd(p, g),))


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate channel pairs (2c, 2c+1) by the angles encoded in ``cos``/``sin``.

    ``cos``/``sin`` have the last-axis width ``x.shape[-1] // 2`` and broadcast
    against ``x``'s leading dims.
    """
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"rotation needs an even width, got {d}")

    def rot(v, s):
        v2 = v.reshape(v.shape[:-1] + (d // 2, 2))
        a, b = v2[..., 0], v2[..., 1]
        out = np.stack([a * cos - b * s, a * s + b * cos], axis=-1)
        return out.reshape(out.shape[:-2] + (d,))

    y = rot(x.data, sin)
    return record_op(y, (x,), lambda g: (rot(g, -sin),))


def embedding(table: Tensor, ids) -> Tensor:
    return take(table, ids, axis=0)


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------


def check_finite(t: Tensor, what: str = "value") -> None:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite {what}")


def grad_check(fn: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The error per element is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    params = list(params)
    if not params:
        return 0.0
    if eps <= 0:
        raise ValueError("eps must be positive")
    reset_tape()
    for p in params:
        p.grad = None
    loss = fn(params)
    with no_grad():
        again = fn(params)
    if loss.data.tobytes() != again.data.tobytes():
        reset_tape()
        raise DeterminismError("function returned different values on repeated evaluation")
    backward(loss, params)
    worst = 0.0
    with no_grad():
        for p in params:
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            ad = p.grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = fn(params).item()
                flat[i] = orig - eps
                down = fn(params).item()
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                err = abs(ad[i] - fd) / max(1.0, abs(ad[i]), abs(fd))
                worst = max(worst, err)
    return worst
