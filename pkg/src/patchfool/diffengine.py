"""Reverse-mode automatic differentiation over dense numpy arrays.

Every backward rule is written in terms of the differentiable operations
defined here, so ``grad(..., create_graph=True)`` returns tensors that are
themselves nodes of a graph and can be differentiated again. ReLU masks and
max-pool argmax patterns are captured when the forward op runs and reused as
constants by every differentiation pass over that evaluation.

Scalar precision is float32 unless a ``precision(np.float64)`` block is
active; the float64 mode exists for gradient oracles.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonScalarOutputError",
    "NotAnInputError",
    "KinkProximityError",
    "as_tensor",
    "no_grad",
    "grad_enabled",
    "precision",
    "default_dtype",
    "record_selections",
    "grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "matmul",
    "relu",
    "conv2d",
    "maxpool2d",
    "gap",
    "linear",
    "upsample_nn",
    "block_sum",
    "embed",
    "crop",
    "logsumexp",
    "softmax_cross_entropy",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operands of an op have incompatible shapes."""


class NonScalarOutputError(ValueError):
    pass


class NotAnInputError(ValueError):
    pass


class KinkProximityError(RuntimeError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def _grad_mode(enabled: bool) -> Iterator[None]:
    prev = grad_enabled()
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = prev


def no_grad():
    """Evaluate ops without recording a graph."""
    return _grad_mode(False)


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Set the dtype newly created tensors are cast to (thread-local)."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def record_selections() -> Iterator[list]:
    """Collect the relu masks and max-pool argmax arrays produced inside the block."""
    prev = getattr(_state, "recorder", None)
    rec: list = []
    _state.recorder = rec
    try:
        yield rec
    finally:
        _state.recorder = prev


def _record(pattern: np.ndarray) -> None:
    rec = getattr(_state, "recorder", None)
    if rec is not None:
        rec.append(pattern)


class Tensor:
    """A graph node: cached value plus the rule to differentiate it.

    ``op`` names the node kind ("input" for leaves and constants). ``parents``
    and ``backward_fn`` are only populated when the node was produced with
    gradient recording enabled and at least one parent requires a gradient.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "backward_fn")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.op = "input"
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _const(arr: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(arr, dtype=like.data.dtype)


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    axes = list(range(extra))
    for i, n in enumerate(shape):
        if n == 1 and g.shape[extra + i] != 1:
            axes.append(extra + i)
    out = sum(g, tuple(axes), keepdims=False) if axes else g
    return reshape(out, shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _node(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(neg(g), b.shape) if needs[1] else None,
        )

    return _node(a.data - b.data, "sub", (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, "neg", (a,), lambda g, needs: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    op = "scalar-mul" if a.size == 1 or b.size == 1 else "mul"

    def backward(g, needs):
        return (
            _unbroadcast(mul(g, b), a.shape) if needs[0] else None,
            _unbroadcast(mul(g, a), b.shape) if needs[1] else None,
        )

    return _node(a.data * b.data, op, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    op = "div-by-scalar" if b.size == 1 else "div"

    def backward(g, needs):
        ga = _unbroadcast(div(g, b), a.shape) if needs[0] else None
        gb = None
        if needs[1]:
            gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _node(a.data / b.data, op, (a, b), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.exp(a.data), "exp", (a,), lambda g, needs: (mul(g, exp(a)),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), "log", (a,), lambda g, needs: (div(g, a),))


def relu(a) -> Tensor:
    """max(0, a). The mask is frozen: its derivative is taken to be zero."""
    a = as_tensor(a)
    mask = a.data > 0
    _record(mask)
    fmask = mask.astype(a.data.dtype)
    out = np.where(a.data <= 0, 0, a.data).astype(a.data.dtype)  # keeps NaN visible

    def backward(g, needs):
        return (mul(g, _const(fmask, g)),)

    return _node(out, "relu", (a,), backward)


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def backward(g, needs):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _node(np.sum(a.data, axis=axes, keepdims=keepdims), "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), 1.0 / count)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from None
    return _node(out, "broadcast", (a,), lambda g, needs: (_unbroadcast(g, a.shape),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {a.shape} -> {tuple(shape)}") from None
    return _node(out, "reshape", (a,), lambda g, needs: (reshape(g, a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), "transpose", (a,), lambda g, needs: (transpose(g, inv),))


def gap(a) -> Tensor:
    """Global average pool over the two trailing spatial axes: (N, C, H, W) -> (N, C)."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"gap: expected 4-D input, got {a.shape}")
    n, c, h, w = a.shape

    def backward(g, needs):
        return (mul(broadcast_to(reshape(g, (n, c, 1, 1)), a.shape), 1.0 / (h * w)),)

    return _node(a.data.mean(axis=(2, 3)), "gap", (a,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def backward(g, needs):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return _node(a.data @ b.data, "matmul", (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight.T + bias, with weight of shape (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------- convolution
#
# conv2d, _conv_input_grad and _conv_weight_grad are the three partial
# derivatives of the trilinear form <g, conv2d(x, w)>, so each one's backward
# is expressed with the other two.


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """(N, C*kh*kw, ho*wo) patch matrix, built from contiguous row copies."""
    n, c = x.shape[:2]
    xp = _pad(x, pad)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _conv_out_hw(h: int, w: int, k: tuple[int, int], stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - k[0]) // stride + 1, (w + 2 * pad - k[1]) // stride + 1


def conv2d(x, weight, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (O, C, kh, kw) kernels."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {weight.shape}")
    kh, kw = weight.shape[2:]
    ho, wo = _conv_out_hw(x.shape[2], x.shape[3], (kh, kw), stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    dtype = np.result_type(x.data, weight.data)
    cols = _im2col(x.data.astype(dtype, copy=False), kh, kw, stride, pad, ho, wo)
    out = np.matmul(weight.data.reshape(weight.shape[0], -1).astype(dtype, copy=False), cols)
    out = out.reshape(x.shape[0], weight.shape[0], ho, wo)

    def backward(g, needs):
        return (
            _conv_input_grad(g, weight, x.shape, stride, pad) if needs[0] else None,
            _conv_weight_grad(x, g, weight.shape, stride, pad) if needs[1] else None,
        )

    return _node(out, "conv2d", (x, weight), backward)


def _conv_input_grad(g: Tensor, weight: Tensor, x_shape, stride: int, pad: int) -> Tensor:
    n, c, h, w = x_shape
    kh, kw = weight.shape[2:]
    ho, wo = g.shape[2:]
    dtype = np.result_type(g.data, weight.data)
    wmat = weight.data.reshape(weight.shape[0], -1).astype(dtype, copy=False)
    cols = np.matmul(wmat.T, g.data.reshape(n, -1, ho * wo).astype(dtype, copy=False))
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp

    def backward(u, needs):
        return (
            conv2d(u, weight, stride, pad) if needs[0] else None,
            _conv_weight_grad(u, g, weight.shape, stride, pad) if needs[1] else None,
        )

    return _node(np.ascontiguousarray(dx), "conv2d-input-grad", (g, weight), backward)


def _conv_weight_grad(x: Tensor, g: Tensor, w_shape, stride: int, pad: int) -> Tensor:
    kh, kw = w_shape[2:]
    ho, wo = g.shape[2:]
    dtype = np.result_type(x.data, g.data)
    cols = _im2col(x.data.astype(dtype, copy=False), kh, kw, stride, pad, ho, wo)
    gm = g.data.reshape(g.shape[0], g.shape[1], ho * wo).astype(dtype, copy=False)
    dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w_shape)

    def backward(u, needs):
        return (
            _conv_input_grad(g, u, x.shape, stride, pad) if needs[0] else None,
            conv2d(x, u, stride, pad) if needs[1] else None,
        )

    return _node(dw, "conv2d-weight-grad", (x, g), backward)


# ---------------------------------------------------------------- resampling


def upsample_nn(a, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the two trailing axes by an integer factor."""
    a = as_tensor(a)
    if factor == 1:
        return a
    out = np.repeat(np.repeat(a.data, factor, axis=-2), factor, axis=-1)
    return _node(out, "upsample-nn", (a,), lambda g, needs: (block_sum(g, factor),))


def block_sum(a, factor: int) -> Tensor:
    """Sum over non-overlapping factor x factor blocks of the two trailing axes."""
    a = as_tensor(a)
    if factor == 1:
        return a
    *lead, h, w = a.shape
    if h % factor or w % factor:
        raise ShapeError(f"block_sum: {a.shape} not divisible by {factor}")
    out = a.data.reshape(*lead, h // factor, factor, w // factor, factor).sum(axis=(-3, -1))
    return _node(out, "block-sum", (a,), lambda g, needs: (upsample_nn(g, factor),))


def maxpool2d(a, size: int = 2) -> Tensor:
    """Non-overlapping max pool (kernel == stride). Ties go to the first element."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"maxpool: expected 4-D input, got {a.shape}")
    n, c, h, w = a.shape
    if h % size or w % size:
        raise ShapeError(f"maxpool: spatial {h}x{w} not divisible by {size}")
    blocks = a.data.reshape(n, c, h // size, size, w // size, size)
    out = blocks[:, :, :, 0, :, 0].copy()
    for i in range(size):
        for j in range(size):
            np.maximum(out, blocks[:, :, :, i, :, j], out=out)
    hit = blocks == out[:, :, :, None, :, None]
    # first position (row-major within the window) attaining the max wins
    taken = np.zeros(out.shape, dtype=bool)
    for i in range(size):
        for j in range(size):
            sel = hit[:, :, :, i, :, j]
            sel &= ~taken
            taken |= sel
    _record(hit)
    mask = hit.reshape(a.shape).astype(a.data.dtype)

    def backward(g, needs):
        return (mul(upsample_nn(g, size), _const(mask, g)),)

    return _node(out, "maxpool", (a,), backward)


def embed(a, top: int, left: int, height: int, width: int) -> Tensor:
    """Place ``a`` (..., h, w) into a zero canvas (..., height, width) at (top, left)."""
    a = as_tensor(a)
    *lead, h, w = a.shape
    if top < 0 or left < 0 or top + h > height or left + w > width:
        raise ShapeError(f"embed: {h}x{w} at ({top},{left}) outside {height}x{width}")
    out = np.zeros((*lead, height, width), dtype=a.data.dtype)
    out[..., top : top + h, left : left + w] = a.data
    return _node(out, "embed", (a,), lambda g, needs: (crop(g, top, left, h, w),))


def crop(a, top: int, left: int, h: int, w: int) -> Tensor:
    a = as_tensor(a)
    *lead, height, width = a.shape
    if top < 0 or left < 0 or top + h > height or left + w > width:
        raise ShapeError(f"crop: {h}x{w} at ({top},{left}) outside {height}x{width}")
    out = a.data[..., top : top + h, left : left + w]

    def backward(g, needs):
        return (embed(g, top, left, height, width),)

    return _node(out, "crop", (a,), backward)


# ---------------------------------------------------------------- losses


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    m = np.max(a.data, axis=axis, keepdims=True)
    out = (m + np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True))).squeeze(axis)
    kept = tuple(1 if i == axis else n for i, n in enumerate(a.shape))

    def backward(g, needs):
        # softmax, rebuilt from differentiable ops
        soft = exp(sub(a, reshape(logsumexp(a, axis), kept)))
        return (mul(reshape(g, kept), soft),)

    return _node(out, "logsumexp", (a,), backward)


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Per-sample cross-entropy of (N, K) logits against integer targets (N,)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or targets.shape[0] != logits.shape[0]:
        raise ShapeError(f"softmax-ce: logits {logits.shape} vs targets {targets.shape}")
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    onehot[np.arange(len(targets)), targets] = 1.0
    picked = sum(mul(logits, _const(onehot, logits)), axis=1)
    out = sub(logsumexp(logits, axis=1), picked)
    out.op = "softmax-ce"
    return out


# ---------------------------------------------------------------- differentiation


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def grad(
    output: Tensor,
    inputs,
    grad_output=None,
    create_graph: bool = False,
    allow_unused: bool = False,
):
    """Gradient of ``output`` with respect to each tensor in ``inputs``.

    With ``create_graph`` the returned tensors carry their own graph, so they
    can be fed back into ``grad``. A single tensor passed as ``inputs`` gives a
    single tensor back.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise NonScalarOutputError(f"output of shape {output.shape} is not scalar; reduce it first")
        seed = Tensor(np.ones_like(output.data), dtype=output.data.dtype)
    else:
        seed = as_tensor(grad_output)
        if seed.shape != output.shape:
            raise ShapeError(f"grad_output {seed.shape} vs output {output.shape}")

    order = _toposort(output)
    input_ids = {id(t) for t in inputs}
    relevant: set[int] = set()
    for node in order:
        if id(node) in input_ids or any(id(p) in relevant for p in node.parents):
            relevant.add(id(node))
    unused = [t for t in inputs if id(t) not in relevant]
    if unused and not allow_unused:
        raise NotAnInputError(f"{len(unused)} of the requested tensors are not inputs of this graph")

    grads: dict[int, Tensor] = {id(output): seed}
    found: dict[int, Tensor] = {}
    with _grad_mode(create_graph):
        for node in reversed(order):
            if id(node) not in relevant:
                continue
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in input_ids:
                found[id(node)] = g
            if node.backward_fn is None:
                continue
            needs = tuple(id(p) in relevant for p in node.parents)
            if not any(needs):
                continue
            for p, pg in zip(node.parents, node.backward_fn(g, needs)):
                if pg is None or id(p) not in relevant:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)

    result = []
    for t in inputs:
        g = found.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data), dtype=t.data.dtype)
        result.append(g)
    return result[0] if single else result


def finite_diff_check(
    scalar_fn: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-4,
    n_coords: int | None = None,
    rng: np.random.Generator | None = None,
    max_retries: int = 5,
    perturb: float | None = None,
) -> float:
    """Max relative error between ``grad`` and central differences of ``scalar_fn``.

    A coordinate is only trusted when the +h and -h evaluations select the
    same relu masks and max-pool argmaxes as the base point. If any checked
    coordinate straddles a kink, the whole point is jittered by up to
    ``perturb`` (default ``100 * h``) and the check repeated.

    ``n_coords`` restricts the comparison to a seeded random subset.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.array(x, dtype=default_dtype())
    perturb = 100 * h if perturb is None else perturb
    flat_n = x.size
    coords = np.arange(flat_n) if n_coords is None or n_coords >= flat_n else np.sort(
        rng.choice(flat_n, size=n_coords, replace=False)
    )

    for _ in range(max_retries + 1):
        xt = Tensor(x, requires_grad=True)
        with record_selections() as base:
            f0 = scalar_fn(xt)
        analytic = grad(f0, xt).data.reshape(-1)

        kink = False
        worst = 0.0
        for idx in coords:
            vals = []
            for step in (h, -h):
                xp = x.copy().reshape(-1)
                xp[idx] += step
                with record_selections() as sel:
                    fv = scalar_fn(Tensor(xp.reshape(x.shape))).item()
                if len(sel) != len(base) or not all(np.array_equal(s, b) for s, b in zip(sel, base)):
                    kink = True
                    break
                vals.append(fv)
            if kink:
                break
            central = (vals[0] - vals[1]) / (2 * h)
            a = float(analytic[idx])
            err = abs(a - central) / max(abs(a), abs(central), 1e-8)
            worst = max(worst, err)
        if not kink:
            return worst
        x = x + rng.uniform(-perturb, perturb, size=x.shape).astype(x.dtype)
    raise KinkProximityError(f"every evaluation point within {max_retries} retries straddled a kink")
