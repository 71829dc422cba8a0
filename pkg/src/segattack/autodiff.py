"""Dense tensors with reverse-mode automatic differentiation.

Only the operations needed for U-Net style networks and the segmentation
losses are provided. Binary operations never broadcast: operands must have
identical shapes, so every backward rule is a plain elementwise or
structural transpose of its forward rule.

Gradients are returned by :func:`backward` as a map from leaf tensor to
``numpy.ndarray``; tensors themselves are never mutated.
"""
from __future__ import annotations

import logging
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-7

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    """An n-dimensional float array that remembers how it was computed.

    Leaves are created directly by the user. Non-leaf tensors carry their
    parent tensors and a closure mapping the output gradient to one
    gradient per parent.
    """

    __slots__ = ("data", "requires_grad", "parents", "_backward", "op", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        name: Optional[str] = None,
    ):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _from_op(
        cls, data: np.ndarray, parents: Tuple["Tensor", ...], backward: BackwardFn, op: str
    ) -> "Tensor":
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = parents
            out._backward = backward
        out.op = op
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{grad})"

    # Operator sugar, all routed through the explicit functions below.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __truediv__(self, other: "Tensor") -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return scale_const(self, -1.0)


def as_tensor(x: Union[Tensor, ArrayLike], dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape} (no broadcasting)")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._from_op(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def add_const(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data + c, (a,), lambda g: (g,), "add_const")


def scale_const(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale_const")


def pow_const(a: Tensor, p: float) -> Tensor:
    ad = a.data
    if p == 0:
        return Tensor._from_op(np.ones_like(ad), (a,), lambda g: (np.zeros_like(g),), "pow_const")
    return Tensor._from_op(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow_const")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(a: Tensor) -> Tensor:
    """Natural log with the input clamped to ``[1e-7, inf)``.

    Below the clamp the gradient is zero, matching the clamped forward value.
    """
    x = a.data
    safe = np.maximum(x, LOG_CLAMP)
    live = x >= LOG_CLAMP
    return Tensor._from_op(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    live = (x >= lo) & (x <= hi)
    return Tensor._from_op(np.clip(x, lo, hi), (a,), lambda g: (g * live,), "clip")


def where_const(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``; ``mask`` is not differentiated."""
    _check_same_shape(a, b, "where")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"where: mask shape {mask.shape} vs operand shape {a.shape}")
    return Tensor._from_op(
        np.where(mask, a.data, b.data), (a, b), lambda g: (g * mask, g * ~mask), "where"
    )


ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "add": add,
    "sub": sub,
    "mul": mul,
    "pow_const": pow_const,
    "scale_const": scale_const,
}


def elementwise(kind: str, *args) -> Tensor:
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}; expected one of {sorted(ELEMENTWISE)}")
    return fn(*args)


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    """Sum over ``axis`` (all axes by default, giving a 0-d tensor)."""
    axes = _norm_axes(axis, a.data.ndim)
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return Tensor._from_op(a.data.sum(axis=axes), (a,), backward, "sum")


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale_const(reduce_sum(a, axes), 1.0 / n)


# ---------------------------------------------------------------- structural


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along channels, ``a`` first."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels expects NCHW tensors, got {a.shape} and {b.shape}")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(
            f"concat_channels: batch/spatial mismatch between {a.shape} and {b.shape}"
        )
    return Tensor._from_op(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :ca], g[:, ca:]),
        "concat",
    )


def concat_many(tensors: Sequence[Tensor]) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = concat_channels(out, t)
    return out


def max_pool2(a: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.

    The gradient goes to the first maximal element of each window in
    row-major order.
    """
    if a.data.ndim != 4:
        raise ShapeError(f"max_pool2 expects an NCHW tensor, got shape {a.shape}")
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got H={h}, W={w}")
    win = a.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = idx[..., None] == np.arange(4)
        gw = (onehot * g[..., None]).astype(g.dtype, copy=False)
        gw = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(n, c, h, w),)

    return Tensor._from_op(out, (a,), backward, "max_pool2")


def upsample_nearest2(a: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block."""
    if a.data.ndim != 4:
        raise ShapeError(f"upsample_nearest2 expects an NCHW tensor, got shape {a.shape}")
    n, c, h, w = a.shape
    out = np.broadcast_to(a.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(
        n, c, 2 * h, 2 * w
    )

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (a,), backward, "upsample2")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with ``(Cout, Cin, k, k)`` kernels plus bias.

    Implemented as a channels-last im2col followed by a single matrix product.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got shape {x.shape}")
    if kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be (Cout, Cin, k, k), got shape {kernels.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernels.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input channels Cin={cin} but kernels expect Cin={kcin}")
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    k = kh
    if k % 2 == 0 and padding:
        raise ShapeError(f"conv2d: kernel size k={k} must be odd when padding={padding}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match Cout={cout}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} or padding={padding}")
    for label, size in (("H", h), ("W", w)):
        span = size + 2 * padding - k
        if span < 0 or span % stride:
            raise ShapeError(
                f"conv2d: {label}={size} with padding={padding}, k={k}, stride={stride} "
                "does not give an integral output size"
            )
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1

    # channels-last im2col: cols[n, i, j, di, dj, c] = xpad[n, c, i*s+di, j*s+dj]
    xl = x.data.transpose(0, 2, 3, 1)
    if padding:
        xl = np.pad(xl, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    dtype = np.result_type(x.data, kernels.data)
    cols = np.empty((n, ho, wo, k, k, cin), dtype=dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, :, di, dj, :] = xl[
                :, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride
            ]
    cols = cols.reshape(n * ho * wo, k * k * cin)
    wmat = kernels.data.transpose(2, 3, 1, 0).reshape(k * k * cin, cout)
    out = cols @ wmat + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    need_x, need_w, need_b = x.requires_grad, kernels.requires_grad, bias.requires_grad
    padded_shape = xl.shape

    def backward(g):
        gx = gw = gb = None
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        if need_b:
            gb = gmat.sum(axis=0)
        if need_w:
            gw = (cols.T @ gmat).reshape(k, k, cin, cout).transpose(3, 2, 0, 1)
        if need_x:
            dcols = (gmat @ wmat.T).reshape(n, ho, wo, k, k, cin)
            gxl = np.zeros(padded_shape, dtype=dcols.dtype)
            for di in range(k):
                for dj in range(k):
                    gxl[
                        :,
                        di : di + stride * (ho - 1) + 1 : stride,
                        dj : dj + stride * (wo - 1) + 1 : stride,
                    ] += dcols[:, :, :, di, dj, :]
            if padding:
                gxl = gxl[:, padding : padding + h, padding : padding + w]
            gx = np.ascontiguousarray(gxl.transpose(0, 3, 1, 2))
        return gx, gw, gb

    return Tensor._from_op(out, (x, kernels, bias), backward, "conv2d")


# ---------------------------------------------------------------- backward


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor, seed: Optional[float] = None) -> Dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``root``.

    Returns ``{leaf: gradient}`` for every reachable leaf with
    ``requires_grad``. Each node's backward rule runs exactly once.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward: root does not depend on any tensor that requires grad")
    order = topological_order(root)
    grads: Dict[int, np.ndarray] = {
        id(root): np.full(root.shape, 1.0 if seed is None else seed, dtype=root.dtype)
    }
    leaves: Dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list:
    """Gradients of ``root`` for each tensor in ``wrt`` (zeros if unreachable)."""
    leaves = backward(root)
    return [leaves.get(t, np.zeros_like(t.data)) for t in wrt]


def numerical_grad(
    fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)`` in the 2-norm; 0 when both are zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
