"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` on numpy arrays and a ``backward`` that maps the output gradient
to one gradient per input. Calling ``Function.apply`` records the node on the
graph when any input requires a gradient; :meth:`Tensor.backward` replays the
recorded nodes in reverse creation order.

Arithmetic runs in float64 unless a :func:`precision` block selects another
floating type; training uses float32 for speed, gradient checks float64.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True
_ids = itertools.count()


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def precision(dtype):
    """Set the floating type of every tensor created inside the block."""
    global DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    prev, DTYPE = DTYPE, dtype
    try:
        yield
    finally:
        DTYPE = prev


def current_dtype():
    return DTYPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_ctx", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._ctx: Function | None = None
        self._id = next(_ids)
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

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # graph replay -------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None):
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        nodes = _reachable(self)
        grads: dict[int, np.ndarray] = {self._id: np.asarray(grad, dtype=self.data.dtype)}
        for node in nodes:
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._ctx is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            fn = node._ctx
            in_grads = fn.backward(g)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for parent, pg in zip(fn.parents, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"{type(fn).__name__}.backward produced grad {pg.shape} for input {parent.shape}"
                    )
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg

    # operator sugar -----------------------------------------------------

    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return PowScalar.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    @property
    def T(self):
        return swap_last(self)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single element, got shape {t.shape}")


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        if t._ctx is not None:
            stack.extend(p for p in t._ctx.parents if p.requires_grad)
    # parents are always created before their children, so descending
    # creation id is the reverse of recording order
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Function:
    """One recorded node. Subclasses implement ``forward`` and ``backward``."""

    parents: tuple[Tensor, ...] = ()

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        fn = cls()
        tensors = tuple(as_tensor(x) for x in inputs)
        out = Tensor(fn.forward(*(t.data for t in tensors), **kwargs))
        if _grad_enabled and any(t.requires_grad for t in tensors):
            fn.parents = tensors
            out.requires_grad = True
            out._ctx = fn
        return out


# elementwise ------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        self.q = a / b
        return self.q

    def backward(self, g):
        ga = g / self.b
        gb = -ga * self.q  # -g a / b^2 without forming b^2, which underflows for tiny b
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return -g


class PowScalar(Function):
    def forward(self, a, exponent):
        self.a, self.exponent = a, exponent
        return a * a if exponent == 2.0 else a**exponent

    def backward(self, g):
        if self.exponent == 2.0:
            return g * 2.0 * self.a
        return g * self.exponent * self.a ** (self.exponent - 1.0)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return g * self.out


class Gelu(Function):
    """tanh approximation of GELU."""

    C = np.sqrt(2.0 / np.pi)

    def forward(self, a):
        self.a = a
        t = a * a
        t *= 0.044715
        t += 1.0
        t *= a
        t *= self.C
        np.tanh(t, out=t)
        self.t = t
        out = t + 1.0
        out *= a
        out *= 0.5
        return out

    def backward(self, g):
        a, t = self.a, self.t
        # d/da [0.5 a (1 + t)] with t = tanh(C (a + 0.044715 a^3))
        dinner = a * a
        dinner *= 3 * 0.044715
        dinner += 1.0
        dinner *= self.C
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        sech2 *= a
        sech2 *= dinner
        sech2 += t
        sech2 += 1.0
        sech2 *= 0.5
        sech2 *= g
        return sech2


# reductions and shape ---------------------------------------------------


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = tuple(ax % len(self.shape) for ax in axes)
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, self.shape).copy()


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from None

    def backward(self, g):
        return g.reshape(self.shape)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = axes if axes is not None else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, g):
        return np.transpose(g, np.argsort(self.axes))


class BroadcastTo(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return np.broadcast_to(a, shape).copy()

    def backward(self, g):
        return _unbroadcast(g, self.shape)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError:
            shapes = ", ".join(str(a.shape) for a in arrays)
            raise ShapeError(f"cannot concatenate shapes {shapes} along axis {axis}") from None

    def backward(self, g):
        return tuple(np.split(g, self.bounds, axis=self.axis))


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.index = a.shape, index
        return a[index]

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        np.add.at(out, self.index, g)
        return out


class TakeAlong(Function):
    """``np.take_along_axis`` with accumulate-on-duplicates backward."""

    def forward(self, a, indices, axis):
        self.shape, self.indices, self.axis = a.shape, indices, axis
        return np.take_along_axis(a, indices, axis=axis)

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        grid = list(np.indices(g.shape, sparse=True))
        grid[self.axis] = np.broadcast_to(self.indices, g.shape)
        np.add.at(out, tuple(grid), g)
        return out


# linear algebra and normalisation --------------------------------------


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        if b.ndim == 2 and a.ndim > 2:
            # one GEMM instead of a loop over the leading axes
            return (a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[-1])
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.a, self.b
        if b.ndim == 2 and a.ndim > 2:
            g2 = g.reshape(-1, g.shape[-1])
            gb = a.reshape(-1, a.shape[-1]).T @ g2
            ga = (g2 @ b.T).reshape(a.shape)
            return ga, gb
        gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
        return ga, gb


class Softmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        e = a - a.max(axis=axis, keepdims=True)
        np.exp(e, out=e)
        e /= e.sum(axis=axis, keepdims=True)
        self.out = e
        return e

    def backward(self, g):
        y = self.out
        gy = g * y
        gy -= y * gy.sum(axis=self.axis, keepdims=True)
        return gy


class LayerNorm(Function):
    """Normalise over the last axis, then scale and shift."""

    def forward(self, x, gamma, beta, eps=1e-5):
        xc = x - x.mean(axis=-1, keepdims=True)
        var = np.einsum("...i,...i->...", xc, xc)[..., None]
        var /= x.shape[-1]
        var += eps
        inv = np.sqrt(var, out=var)
        np.divide(1.0, inv, out=inv)
        xc *= inv
        self.inv, self.xhat = inv, xc
        self.gamma, self.beta_shape = gamma, beta.shape
        out = xc * gamma
        out += beta
        return out

    def backward(self, g):
        xhat, inv = self.xhat, self.inv
        gbeta = _unbroadcast(g, self.beta_shape)
        ggamma = _unbroadcast(g * xhat, self.gamma.shape)
        gx_hat = g * self.gamma
        n = xhat.shape[-1]
        mean_g = gx_hat.mean(axis=-1, keepdims=True)
        mean_gx = np.einsum("...i,...i->...", gx_hat, xhat)[..., None]
        mean_gx /= n
        gx = gx_hat - mean_g
        gx -= xhat * mean_gx
        gx *= inv
        return gx, ggamma, gbeta


# functional surface -----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return MatMul.apply(a, b)


def softmax(x, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {x.shape}")
    return Softmax.apply(x, axis=-1)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def gelu(x) -> Tensor:
    return Gelu.apply(x)


def exp(x) -> Tensor:
    return Exp.apply(x)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[ax] for ax in axes]))
    return Sum.apply(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def broadcast_to(x, shape) -> Tensor:
    return BroadcastTo.apply(x, shape=tuple(shape))


def take_along(x, indices, axis: int) -> Tensor:
    return TakeAlong.apply(x, indices=np.asarray(indices), axis=axis)


def gather_rows(x, indices) -> Tensor:
    """Select rows along axis -2. ``indices`` has shape ``x.shape[:-2] + (m,)``."""
    x = as_tensor(x)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-2]):
        raise ContractError(f"row index out of range for {x.shape}")
    return TakeAlong.apply(x, indices=idx[..., None], axis=x.ndim - 2)


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return Transpose.apply(x, axes=tuple(axes))


def sum_squares(x) -> Tensor:
    return (x * x).sum()
