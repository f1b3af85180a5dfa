"""Dense tensors with a small reverse-mode differentiation tape.

Arrays live in numpy; every differentiable primitive computes its forward
value eagerly and, when a :class:`GradTape` is active and some input requires
a gradient, appends a backward rule to that tape.  Layout for images and
fields is ``(N, C, *spatial)``.

>>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
>>> with GradTape() as tape:
...     loss = (x * x).sum()
>>> tape.backward(loss)[x].numpy()
array([2., 4., 6.], dtype=float32)
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_EPS = 1e-5

_state = threading.local()


class TensorError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(TensorError, ValueError):
    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(TensorError, FloatingPointError):
    def __init__(self, op: str, count: int):
        self.op = op
        self.count = count
        super().__init__(f"{op}: produced {count} non-finite value(s)")


class TapeError(TensorError, RuntimeError):
    pass


# --------------------------------------------------------------------------
# precision


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def precision(dtype="float64"):
    """Temporarily change the storage dtype of newly created tensors.

    Used by the gradient checker: 32-bit finite differences are too noisy.
    """
    old = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


def seeded_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# --------------------------------------------------------------------------
# tape


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of differentiable operations executed while active.

    A tape is single-use: :meth:`backward` consumes it.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self):
        if self._consumed:
            raise TapeError("tape already consumed")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self._records)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self._records.append((out, inputs, backward))
        out._tape = self

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
        """Gradients of scalar ``loss`` for every requires_grad leaf.

        Leaves listed in ``wrt`` that the loss does not depend on get zeros.
        """
        if self._consumed:
            raise TapeError("backward called twice on a consumed tape")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        produced = {id(out) for out, _, _ in self._records}
        leaves: dict[int, Tensor] = {}
        for _, inputs, _ in self._records:
            for t in inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        wrt = list(wrt) if wrt is not None else []
        for t in wrt:
            leaves.setdefault(id(t), t)

        grads: dict[int, np.ndarray] = {}
        if loss.requires_grad:
            grads[id(loss)] = np.ones(loss.shape, dtype=loss.data.dtype)
        for out, inputs, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        self._records.clear()
        result = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros(leaf.shape, dtype=leaf.data.dtype)
            result[leaf] = Tensor._wrap(g.astype(leaf.data.dtype, copy=False))
        return result


@contextmanager
def no_tape():
    """Suspend every active tape on this thread."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced under an active GradTape")
    return tape.backward(loss, wrt)


# --------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=default_dtype(), copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> Tensor:
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t._tape = None
        return t

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
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __neg__ = lambda a: neg(a)
    __getitem__ = lambda a, idx: getitem(a, idx)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / float(other))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=default_dtype()))


def record_op(name: str, value: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward value as a tensor and register its backward rule.

    ``backward(grad_out)`` returns one array (or None) per input.
    """
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(name, int(np.size(value) - np.count_nonzero(np.isfinite(value))))
    out = Tensor._wrap(value)
    tape = active_tape()
    inputs = tuple(inputs)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return record_op("add", a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return record_op("sub", a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return record_op("mul", a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b, eps: float = DEFAULT_EPS) -> Tensor:
    """``a / (b + eps)``; callers keep ``b`` non-negative."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    den = b.data + eps
    val = a.data / den

    def bw(g):
        ga = g / den
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * val, b.shape)

    return record_op("div", val, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record_op("neg", -a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return record_op("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a, eps: float = DEFAULT_EPS) -> Tensor:
    """``sqrt(a + eps)``."""
    a = as_tensor(a)
    val = np.sqrt(a.data + eps)
    return record_op("sqrt", val, (a,), lambda g: (0.5 * g / val,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return record_op("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return record_op("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


# --------------------------------------------------------------------------
# reductions and shape manipulation


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    val = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op("sum", val, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        val = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return record_op("reshape", val, (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    a = as_tensor(a)
    val = a.data[idx]

    def bw(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        out[idx] = g
        return (out,)

    return record_op("slice", np.ascontiguousarray(val), (a,), bw)


def pad(a, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one ``(before, after)`` pair per axis."""
    a = as_tensor(a)
    if len(widths) != a.ndim:
        raise ShapeError("pad", a.shape, (len(widths),), detail="one pad pair per axis")
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return record_op("pad", np.pad(a.data, widths), (a,), lambda g: (g[sl],))


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError("concat", ref, t.shape)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return record_op("concat", np.concatenate([t.data for t in ts], axis=axis), ts,
                     lambda g: tuple(np.split(g, splits, axis=axis)))


# --------------------------------------------------------------------------
# spatial primitives; inputs are (N, C, *spatial)


def _offsets(k: int, nd: int):
    return list(itertools.product(range(k), repeat=nd))


def conv(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Zero-padded convolution (cross-correlation) with an odd cubic kernel.

    ``weight`` is ``(C_out, C_in, k, ..., k)``; output extent is
    ``ceil(n / stride)`` per spatial axis.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    nd = x.ndim - 2
    cout, cin, *ks = weight.shape
    if weight.ndim != x.ndim or cin != x.shape[1] or len(set(ks)) != 1 or ks[0] % 2 == 0:
        raise ShapeError("conv", x.shape, weight.shape)
    k = ks[0]
    r = k // 2
    n = x.shape[0]
    spatial = x.shape[2:]
    out_sp = tuple(-(-s // stride) for s in spatial)
    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(r, r)] * nd)
    offs = _offsets(k, nd)
    slices = [tuple(slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(off, out_sp)) for off in offs]
    cols = np.empty((n, cin, len(offs)) + out_sp, dtype=x.data.dtype)
    for i, sl in enumerate(slices):
        cols[:, :, i] = xp[(slice(None), slice(None)) + sl]
    cols = cols.reshape(n, cin * len(offs), -1)
    w2 = weight.data.reshape(cout, -1)
    val = np.matmul(w2, cols)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError("conv", weight.shape, bias.shape, detail="bias must be (C_out,)")
        val += bias.data[None, :, None]
        inputs.append(bias)
    val = val.reshape((n, cout) + out_sp)

    def bw(g):
        g2 = g.reshape(n, cout, -1)
        gw = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape((n, cin, len(offs)) + out_sp)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i, sl in enumerate(slices):
                gxp[(slice(None), slice(None)) + sl] += gcols[:, :, i]
            gx = gxp[(slice(None), slice(None)) + tuple(slice(r, r + s) for s in spatial)]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return grads

    return record_op("conv", val, inputs, bw)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    nd = x.ndim - 2
    val = x.data
    for ax in range(2, 2 + nd):
        val = np.repeat(val, factor, axis=ax)

    def bw(g):
        shape = list(x.shape[:2])
        for s in x.shape[2:]:
            shape += [s, factor]
        return (g.reshape(shape).sum(axis=tuple(range(3, 3 + 2 * nd, 2))),)

    return record_op("upsample", val, (x,), bw)


def _window_sum_np(a: np.ndarray, w: int) -> np.ndarray:
    r = w // 2
    out = a.astype(np.float64)
    for ax in range(2, a.ndim):
        n = out.shape[ax]
        c = np.cumsum(out, axis=ax)
        zero = np.zeros_like(np.take(c, [0], axis=ax))
        c = np.concatenate([zero, c], axis=ax)
        idx = np.arange(n)
        hi = np.minimum(idx + r + 1, n)
        lo = np.maximum(idx - r, 0)
        out = np.take(c, hi, axis=ax) - np.take(c, lo, axis=ax)
    return out.astype(a.dtype)


def window_sum(x, w: int) -> Tensor:
    """Sum over the w^d window centred at each voxel, clipped at the border.

    The clipped window relation is symmetric, so the adjoint is the same sum.
    """
    x = as_tensor(x)
    if w < 1 or w % 2 == 0:
        raise ValueError(f"window edge must be a positive odd integer, got {w}")
    return record_op("window_sum", _window_sum_np(x.data, w), (x,), lambda g: (_window_sum_np(g, w),))


def window_count(spatial: Sequence[int], w: int) -> np.ndarray:
    """Number of in-bounds voxels in each clipped window."""
    r = w // 2
    count = np.ones((), dtype=np.float64)
    for n in spatial:
        idx = np.arange(n)
        c = np.minimum(idx + r, n - 1) - np.maximum(idx - r, 0) + 1
        count = np.multiply.outer(count, c)
    return count


# --------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheck:
    max_rel_err: float
    max_abs_err: float
    worst: str
    passed: bool


def numerical_gradient(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int, step: float = 1e-3) -> np.ndarray:
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(*[Tensor(a) for a in base]).item()
        flat[i] = orig - step
        fm = f(*[Tensor(a) for a in base]).item()
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2 * step)
    return grad


def gradcheck(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], step: float = 1e-5,
              rtol: float = 1e-4, atol: float = 1e-6, small: float = 1e-3,
              check: Sequence[int] | None = None) -> GradCheck:
    """Compare tape gradients of scalar ``f(*tensors)`` to central differences in 64-bit.

    Entries with magnitude below ``small`` are judged by ``atol``, the rest by ``rtol``.
    """
    check = range(len(arrays)) if check is None else check
    worst_rel, worst_abs, worst, ok = 0.0, 0.0, "", True
    with precision("float64"):
        ts = [Tensor(a, requires_grad=i in check) for i, a in enumerate(arrays)]
        with GradTape() as tape:
            loss = f(*ts)
        grads = tape.backward(loss, wrt=[ts[i] for i in check])
        for i in check:
            ana = grads[ts[i]].numpy()
            num = numerical_gradient(f, arrays, i, step)
            err = np.abs(ana - num)
            mag = np.maximum(np.abs(ana), np.abs(num))
            big = mag >= small
            rel = np.where(big, err / np.where(big, mag, 1.0), 0.0)
            abs_small = np.where(big, 0.0, err)
            r, a = float(rel.max(initial=0.0)), float(abs_small.max(initial=0.0))
            if r > worst_rel:
                worst_rel, worst = r, f"input {i}"
            worst_abs = max(worst_abs, a)
            ok = ok and r <= rtol and a <= atol
    return GradCheck(worst_rel, worst_abs, worst, ok)
