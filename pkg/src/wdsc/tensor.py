"""Small reverse-mode autodiff engine over numpy arrays.

Only the operations the compression transforms and entropy models need are
provided.  Every op records its parents and a closure that maps the output
gradient to input gradients; :meth:`Tensor.backward` walks the graph in
reverse topological order and accumulates gradients over all paths.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense array node in the autodiff graph.

    ``data`` is a numpy array; ``grad`` is populated by :meth:`backward` for
    every tensor created with ``requires_grad=True`` or derived from one.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # -- bookkeeping -------------------------------------------------------

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every upstream tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without an explicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _tracks(parent):
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method aliases ----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return tabs(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen and _tracks(p):
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward pass")
    out = Tensor(data, dtype=data.dtype)
    parents = tuple(parents)
    if _grad_enabled and any(_tracks(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent
    return _result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data).astype(a.dtype)
    return _result(out, (a,), lambda g: (g * special.expit(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,))


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient flows only where the value was not clipped."""
    out = np.clip(a.data, lo, hi)
    mask = out == a.data
    return _result(out, (a,), lambda g: (g * mask,))


def normal_cdf(a: Tensor) -> Tensor:
    """Standard normal CDF, elementwise."""
    out = special.ndtr(a.data).astype(a.dtype)
    pdf = np.exp(-0.5 * a.data * a.data) / np.sqrt(2.0 * np.pi)
    return _result(out, (a,), lambda g: (g * pdf,))


def add_uniform_noise(x: Tensor, rng: np.random.Generator) -> Tensor:
    """``x + u`` with ``u ~ U[-0.5, 0.5]`` i.i.d.; the noise is a constant for backprop."""
    u = rng.uniform(-0.5, 0.5, size=x.shape).astype(x.dtype)
    return _result(x.data + u, (x,), lambda g: (g,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# convolution


def _windows(xp: np.ndarray, k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    # (B, C, h_out, w_out, k, k) view
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : stride * (h_out - 1) + 1 : stride, : stride * (w_out - 1) + 1 : stride]


def _scatter_windows(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    # adjoint of _windows: cols is (B, C, h, w, k, k)
    b, c, h, w, k, _ = cols.shape
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (w - 1) + 1 : stride] += cols[..., i, j]
    return out


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    k = w.shape[-1]
    p = k // 2
    h_out = -(-x.shape[2] // stride)
    w_out = -(-x.shape[3] // stride)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = _windows(xp, k, stride, h_out, w_out)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, h, w, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_hw: tuple[int, int], stride: int) -> np.ndarray:
    k = w.shape[-1]
    p = k // 2
    cols = np.tensordot(g, w, axes=([1], [0]))  # (B, h, w, C, k, k)
    cols = cols.transpose(0, 3, 1, 2, 4, 5)
    full = _scatter_windows(cols, in_hw[0] + 2 * p, in_hw[1] + 2 * p, stride)
    return full[:, :, p : p + in_hw[0], p : p + in_hw[1]]


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int) -> np.ndarray:
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = _windows(xp, k, stride, g.shape[2], g.shape[3])
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, k, k)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    transposed: bool = False,
    out_hw: Optional[tuple[int, int]] = None,
) -> Tensor:
    """2-D convolution on ``(B, C, H, W)`` or ``(C, H, W)`` input.

    ``weight`` is ``(C_out, C_in, k, k)`` with odd ``k``.  Padding is ``k // 2``,
    so a forward conv yields ``ceil(H / stride)`` rows.  ``transposed=True``
    applies the adjoint of a forward conv (with output padding ``stride - 1``),
    giving exactly ``H * stride`` rows.  ``out_hw`` trims a transposed output
    to the size of the forward conv's input when that was not a multiple of
    ``stride``.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    c_out, c_in, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square and odd, got {kh}x{kw}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if x.shape[1] != c_in:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {c_in}")

    if not transposed:
        in_hw = x.shape[2:]
        out = _conv_forward(x.data, weight.data, stride)

        def bw(g):
            return _conv_input_grad(g, weight.data, in_hw, stride), _conv_weight_grad(x.data, g, kh, stride)

    else:
        _, _, h, w = x.shape
        ho, wo = (h * stride, w * stride) if out_hw is None else out_hw
        if not (-(-ho // stride) == h and -(-wo // stride) == w):
            raise ValueError(f"out_hw {(ho, wo)} is not reachable from {(h, w)} at stride {stride}")
        # x plays the role of a forward conv's output gradient; weight maps C_out -> C_in
        wt = weight.data.transpose(1, 0, 2, 3)
        out = _conv_input_grad(x.data, wt, (ho, wo), stride)

        def bw(g):
            gx = _conv_forward(g, wt, stride)
            gw = _conv_weight_grad(g, x.data, kh, stride).transpose(1, 0, 2, 3)
            return gx, gw

    out = _result(out.astype(x.dtype, copy=False), (x, weight), bw)
    if bias is not None:
        out = out + reshape(bias, (1, c_out, 1, 1))
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def gdn(x: Tensor, beta: Tensor, gamma: Tensor, inverse: bool = False) -> Tensor:
    """(Inverse) generalized divisive normalization over channels.

    forward: ``y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)``;
    inverse: ``y_i = x_i * sqrt(...)``.  Works on ``(B, C, H, W)`` or ``(C, H, W)``.
    """
    chan_axis = x.ndim - 3
    xd = x.data
    x2 = xd * xd
    norm = np.moveaxis(np.tensordot(gamma.data, x2, axes=([1], [chan_axis])), 0, chan_axis)
    bshape = [1] * x.ndim
    bshape[chan_axis] = -1
    norm = norm + beta.data.reshape(bshape)
    s = np.sqrt(norm)
    if inverse:
        out = xd * s
        dy_dn = 0.5 * xd / s
    else:
        out = xd / s
        dy_dn = -0.5 * xd / (norm * s)

    def bw(g):
        t = g * dy_dn
        # sum_i t_i gamma_ik
        back = np.moveaxis(np.tensordot(gamma.data, t, axes=([0], [chan_axis])), 0, chan_axis)
        gx = g * (s if inverse else 1.0 / s) + 2.0 * xd * back
        other = tuple(a for a in range(x.ndim) if a != chan_axis)
        gbeta = t.sum(axis=other)
        tm = np.moveaxis(t, chan_axis, 0).reshape(t.shape[chan_axis], -1)
        xm = np.moveaxis(x2, chan_axis, 0).reshape(x2.shape[chan_axis], -1)
        ggamma = tm @ xm.T
        return gx, gbeta, ggamma

    return _result(out.astype(x.dtype, copy=False), (x, beta, gamma), bw)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2, on ``(B, C, H, W)``; odd trailing rows/cols dropped."""
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    xd = x.data[:, :, : 2 * h2, : 2 * w2]
    out = xd.reshape(b, c, h2, 2, w2, 2).mean(axis=(3, 5))

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, :, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (full,)

    return _result(out, (x,), bw)


def filter2d_valid(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Per-channel 'valid' correlation of ``(B, C, H, W)`` with a fixed 2-D kernel."""
    k = kernel.shape[0]
    kernel = kernel.astype(x.dtype)
    h_out, w_out = x.shape[2] - k + 1, x.shape[3] - k + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(f"input {x.shape[2:]} smaller than {k}x{k} window")
    win = _windows(x.data, k, 1, h_out, w_out)
    out = np.tensordot(win, kernel, axes=([4, 5], [0, 1]))

    def bw(g):
        cols = g[..., None, None] * kernel
        return (_scatter_windows(cols, x.shape[2], x.shape[3], 1),)

    return _result(out, (x,), bw)
