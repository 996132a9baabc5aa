"""Dense float tensors with reverse-mode automatic differentiation.

A small numpy-backed tape: every operation records its parent tensors and a
closure mapping the output gradient to parent gradients.  Execution is eager
and single-threaded; ``backward()`` walks the graph in reverse topological
order from a scalar root.  Double precision is the default so that central
finite differences resolve gradients well below the checking tolerance.

While checked mode is on (the default), every op validates that its output is
finite and raises ``NonFiniteError`` otherwise, which pins numerical blowups
to the op that produced them instead of the loss that consumed them.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "set_default_dtype",
    "default_dtype",
    "set_checked",
    "is_checked",
    "zeros",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "stack",
    "take",
    "exp",
    "log",
    "sqrt",
    "relu",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "reduce_min",
    "softmax",
    "logsumexp",
    "conv2d",
]

_DTYPE = np.float64
_CHECKED = True
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending axes."""


class NonFiniteError(FloatingPointError):
    """An op produced or received NaN/Inf while checked mode was on."""


def set_default_dtype(dtype) -> None:
    """Set the dtype new tensors are created with (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}; use float64 or float32")
    _DTYPE = dtype.type


def default_dtype():
    return _DTYPE


def set_checked(flag: bool) -> None:
    """Toggle finiteness validation at op boundaries."""
    global _CHECKED
    _CHECKED = bool(flag)


def is_checked() -> bool:
    return _CHECKED


@contextlib.contextmanager
def no_grad():
    """Context manager: ops inside build no graph (constants out)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _require_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values")


class Tensor:
    """N-d float array with optional gradient tracking.

    ``data`` is a numpy array (row-major), ``grad`` is filled by ``backward()``
    on tensors with ``requires_grad``.  Tensors are nodes: internal ones keep
    their parents and a backward closure, leaves keep neither.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        if _CHECKED:
            _require_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar root, accumulating leaf gradients."""
        if self.data.shape != ():
            raise ShapeError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        order: list[Tensor] = []
        seen: set[Tensor] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if node in seen:
                continue
            seen.add(node)
            stack.append((node, True))
            for p in node._parents:
                if p not in seen:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators -----------------------------------------------------

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], None],
    op: str,
) -> Tensor:
    if _CHECKED:
        _require_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        axes = tuple(range(ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    else:
        axes = tuple(axes)
    if len(axes) == 0:
        raise ValueError("axis set must be nonempty")
    out = []
    for a in axes:
        if a < 0:
            a += ndim
        if not 0 <= a < ndim:
            raise ShapeError(f"axis {a} out of range for ndim {ndim}")
        out.append(a)
    if len(set(out)) != len(out):
        raise ValueError(f"duplicate axes in {axes}")
    return tuple(sorted(out))


# -- elementwise -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), backward, "div")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    data = np.exp(x.data)

    def backward(g):
        _accum(x, g * data)

    return _node(data, (x,), backward, "exp")


def log(x) -> Tensor:
    x = _as_tensor(x)
    data = np.log(x.data)

    def backward(g):
        _accum(x, g / x.data)

    return _node(data, (x,), backward, "log")


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    data = np.sqrt(x.data)

    def backward(g):
        _accum(x, g / (2.0 * data))

    return _node(data, (x,), backward, "sqrt")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)
    mask = x.data > 0.0

    def backward(g):
        _accum(x, g * mask)

    return _node(data, (x,), backward, "relu")


# -- structure ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(
            f"matmul: expected 2-d operands, got {a.ndim}-d and {b.ndim}-d"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ (a axis 1 = {a.shape[1]}, "
            f"b axis 0 = {b.shape[0]})"
        )
    data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(data, (a, b), backward, "matmul")


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.transpose(x.data, axes)

    def backward(g):
        _accum(x, np.transpose(g, inverse))

    return _node(data, (x,), backward, "transpose")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.data.shape))

    return _node(data, (x,), backward, "reshape")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty sequence")
    data = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis if axis >= 0 else axis + ts[0].ndim
    sizes = [t.data.shape[ax] for t in ts]

    def backward(g):
        start = 0
        index = [slice(None)] * g.ndim
        for t, n in zip(ts, sizes):
            index[ax] = slice(start, start + n)
            _accum(t, g[tuple(index)])
            start += n

    return _node(data, ts, backward, "concat")


def stack(tensors: Iterable) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    ts = [_as_tensor(t) for t in tensors]
    return concat([reshape(t, (1,) + t.shape) for t in ts], axis=0)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather rows by integer index along axis 0 (duplicates allowed)."""
    if axis != 0:
        raise ValueError("take supports axis 0 only")
    x = _as_tensor(x)
    idx = np.asarray(indices)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("take expects a 1-d integer index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(
            f"take: index out of range for axis 0 of size {x.shape[0]}"
        )
    data = x.data[idx]

    def backward(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        _accum(x, buf)

    return _node(data, (x,), backward, "take")


def _getitem(x: Tensor, key) -> Tensor:
    # basic indexing only: ints, slices, tuples thereof
    data = x.data[key]

    def backward(g):
        buf = np.zeros_like(x.data)
        buf[key] += g
        _accum(x, buf)

    return _node(data, (x,), backward, "getitem")


# -- reductions --------------------------------------------------------


def reduce_sum(x, axes=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    ax = _norm_axes(axes, x.ndim)
    data = x.data.sum(axis=ax, keepdims=keepdims)
    kshape = tuple(1 if i in ax else n for i, n in enumerate(x.shape))

    def backward(g):
        _accum(x, np.broadcast_to(g.reshape(kshape), x.data.shape))

    return _node(data, (x,), backward, "reduce_sum")


def reduce_mean(x, axes=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    ax = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[i] for i in ax]))
    data = x.data.mean(axis=ax, keepdims=keepdims)
    kshape = tuple(1 if i in ax else n for i, n in enumerate(x.shape))

    def backward(g):
        _accum(x, np.broadcast_to(g.reshape(kshape), x.data.shape) / count)

    return _node(data, (x,), backward, "reduce_mean")


def _reduce_extremum(x, axes, keepdims, argfn, op):
    """Shared max/min reduction.

    Ties route the whole gradient to the lowest flat index of the reduced
    block, which keeps backward deterministic.
    """
    x = _as_tensor(x)
    ax = _norm_axes(axes, x.ndim)
    nkept = x.ndim - len(ax)
    moved = np.moveaxis(x.data, ax, range(nkept, x.ndim))
    kept_shape = moved.shape[:nkept]
    flat = moved.reshape(kept_shape + (-1,))
    idx = argfn(flat, axis=-1)  # first occurrence = lowest flat index
    picked = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    kshape = tuple(1 if i in ax else n for i, n in enumerate(x.shape))
    data = picked.reshape(kshape) if keepdims else picked

    def backward(g):
        gk = g.reshape(kept_shape)
        buf = np.zeros_like(flat)
        np.put_along_axis(buf, idx[..., None], gk[..., None], axis=-1)
        back = np.moveaxis(buf.reshape(moved.shape), range(nkept, x.ndim), ax)
        _accum(x, back)

    return _node(data, (x,), backward, op)


def reduce_max(x, axes=None, keepdims: bool = False) -> Tensor:
    return _reduce_extremum(x, axes, keepdims, np.argmax, "reduce_max")


def reduce_min(x, axes=None, keepdims: bool = False) -> Tensor:
    return _reduce_extremum(x, axes, keepdims, np.argmin, "reduce_min")


# -- fused numerics ----------------------------------------------------


def softmax(x, axes) -> Tensor:
    """Softmax over an axis set, computed with max-subtraction."""
    x = _as_tensor(x)
    ax = _norm_axes(axes, x.ndim)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=ax, keepdims=True)
        _accum(x, out * (g - inner))

    return _node(out, (x,), backward, "softmax")


def logsumexp(x, axes, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    ax = _norm_axes(axes, x.ndim)
    m = x.data.max(axis=ax, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=ax, keepdims=True)
    out_k = np.log(s) + m
    kshape = out_k.shape
    data = out_k if keepdims else out_k.reshape(
        tuple(n for i, n in enumerate(x.shape) if i not in ax)
    )
    soft = e / s

    def backward(g):
        _accum(x, soft * g.reshape(kshape))

    return _node(data, (x,), backward, "logsumexp")


# -- convolution -------------------------------------------------------


def conv2d(x, k, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of (N, C, H, W) input with an (O, C, kh, kw) kernel.

    Square odd kernels only; no bias (add one separately if needed).  The
    frame axis of a clip rides in N, so per-frame application is just a
    batched call.
    """
    x, k = _as_tensor(x), _as_tensor(k)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d (N,C,H,W), got {x.ndim}-d")
    if k.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-d (O,C,kh,kw), got {k.ndim}-d")
    n, c, h, w = x.shape
    o, ck, kh, kw = k.shape
    if ck != c:
        raise ShapeError(
            f"conv2d: input channel axis 1 ({c}) != kernel channel axis 1 ({ck})"
        )
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride/padding ({stride}, {padding})")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} "
            f"with padding {padding}"
        )
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data

    # One tensordot per kernel offset; kernels are 1x1 or 3x3 so this is at
    # most nine BLAS calls with no im2col buffer.
    out_t = np.zeros((o, n, ho, wo), dtype=x.data.dtype)
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride]
            out_t += np.tensordot(k.data[:, :, di, dj], patch, axes=(1, 1))
    data = np.ascontiguousarray(out_t.transpose(1, 0, 2, 3))

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3))  # (O,N,Ho,Wo)
        if k.requires_grad:
            dk = np.zeros_like(k.data)
        if x.requires_grad:
            dxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype)
        for di in range(kh):
            for dj in range(kw):
                if k.requires_grad:
                    patch = xp[
                        :, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride
                    ]
                    dk[:, :, di, dj] = np.tensordot(gt, patch, axes=([1, 2, 3], [0, 2, 3]))
                if x.requires_grad:
                    dxp[
                        :, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride
                    ] += np.tensordot(k.data[:, :, di, dj], gt, axes=(0, 0))
        if k.requires_grad:
            _accum(k, dk)
        if x.requires_grad:
            dx = dxp.transpose(1, 0, 2, 3)
            if padding:
                dx = dx[:, :, padding : padding + h, padding : padding + w]
            _accum(x, np.ascontiguousarray(dx))

    return _node(data, (x, k), backward, "conv2d")


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)
