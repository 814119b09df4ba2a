"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the operations needed by the segmentation network, the shape
auto-encoder, the discriminator and their losses are provided. Every
operation records a node holding its parents and a backward closure; calling
:meth:`Tensor.backward` orders the reachable nodes into a tape (reverse
topological order) and replays it once.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ContractError",
    "tensor",
    "build_tape",
    "conv2d",
    "relu",
    "leaky_relu",
    "sigmoid",
    "softmax_channels",
    "maxpool2",
    "upsample2",
    "concat_channels",
    "global_max_pool",
    "dense",
    "batch_norm",
    "BatchNormState",
    "log",
    "clip",
    "square",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class ContractError(ValueError):
    """Raised when an operation is called outside its documented contract."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Dense float64 array participating in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # ------------------------------------------------------------------ basics
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in build_tape(self):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -------------------------------------------------------------- arithmetic
    def __add__(self, other) -> "Tensor":
        return _add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return _add(self, -_wrap(other))

    def __rsub__(self, other) -> "Tensor":
        return _add(_wrap(other), -self)

    def __mul__(self, other) -> "Tensor":
        return _mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        return _div(self, _wrap(other))

    def __rtruediv__(self, other) -> "Tensor":
        return _div(_wrap(other), self)

    def __neg__(self) -> "Tensor":
        return _unary(self, -self.data, lambda g: (-g,), "neg")

    def __getitem__(self, index) -> "Tensor":
        shape = self.data.shape

        def back(g):
            out = np.zeros(shape)
            if _has_advanced(index):
                np.add.at(out, index, g)
            else:
                out[index] += g
            return (out,)

        return _unary(self, self.data[index], back, "getitem")

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.data.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _unary(self, out, back, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return _unary(self, self.data.reshape(shape), lambda g: (g.reshape(old),), "reshape")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _node(out: np.ndarray, parents: tuple[Tensor, ...], back: BackwardFn, op: str) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(out, op=op)
    return Tensor(out, requires_grad=True, _parents=parents, _backward=back, op=op)


def _unary(t: Tensor, out: np.ndarray, back: BackwardFn, op: str) -> Tensor:
    return _node(out, (t,), back, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def _mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad * bd, (a, b), back, "mul")


def _div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), back, "div")


def build_tape(root: Tensor) -> list[Tensor]:
    """Return the nodes reachable from ``root`` in reverse topological order.

    Each consumer appears before all of its producers, so replaying the list
    front to back visits every node exactly once with its full gradient.
    """
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


# ---------------------------------------------------------------- elementwise
def log(t: Tensor) -> Tensor:
    d = t.data
    return _unary(t, np.log(d), lambda g: (g / d,), "log")


def square(t: Tensor) -> Tensor:
    d = t.data
    return _unary(t, d * d, lambda g: (2.0 * d * g,), "square")


def clip(t: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; clamped entries pass no gradient."""
    d = t.data
    inside = (d >= lo) & (d <= hi)
    return _unary(t, np.clip(d, lo, hi), lambda g: (g * inside,), "clip")


def relu(t: Tensor) -> Tensor:
    pos = t.data > 0
    return _unary(t, t.data * pos, lambda g: (g * pos,), "relu")


def leaky_relu(t: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(t.data > 0, 1.0, slope)
    return _unary(t, t.data * scale, lambda g: (g * scale,), "leaky_relu")


def sigmoid(t: Tensor) -> Tensor:
    d = t.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _unary(t, out, lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax_channels(t: Tensor) -> Tensor:
    """Softmax over axis 1 independently at every other index."""
    if t.ndim < 2 or t.shape[1] < 1:
        raise ShapeError(f"softmax_channels needs a channel axis, got shape {t.shape}")
    z = t.data - t.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _unary(t, out, back, "softmax")


# -------------------------------------------------------------- convolution
def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of shape (N, Cin*k*k, Ho*Wo); rows ordered (cin, i, j)."""
    n, cin = xp.shape[:2]
    if k == 1 and stride == 1:
        return xp.reshape(n, cin, ho * wo)
    cols = np.empty((n, cin, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, cin * k * k, ho * wo)


def _pad_hw(a: np.ndarray, p: int) -> np.ndarray:
    if not p:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of an NCHW input with a (Cout, Cin, k, k) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin} channels, kernel expects {kcin}")
    if kh != kw:
        raise ShapeError(f"conv2d needs a square kernel, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {cout} output channels")
    k = kh
    xp = _pad_hw(x.data, padding)
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {k} larger than padded input {hp}x{wp}")

    cols = _im2col(xp, k, stride, ho, wo)
    wmat = kernel.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def back(g):
        g3 = g.reshape(n, cout, ho * wo)
        gk = None
        if kernel.requires_grad:
            gk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and 2 * padding == k - 1:
                # same-size conv: input gradient is a conv of g with the flipped kernel
                flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
                gcols = _im2col(_pad_hw(g, padding), k, 1, h, w)
                gx = np.matmul(flipped, gcols).reshape(n, cin, h, w)
            else:
                dcols = np.matmul(wmat.T, g3).reshape(n, cin, k, k, ho, wo)
                gxp = np.zeros((n, cin, hp, wp))
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
                gx = np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + w])
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _node(out, parents, back, "conv2d")


# ------------------------------------------------------- pooling and reshape
def maxpool2(t: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route gradient to the first window index."""
    n, c, h, w = t.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    blocks = t.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _unary(t, out, back, "maxpool2")


def upsample2(t: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    n, c, h, w = t.shape
    out = np.repeat(np.repeat(t.data, 2, axis=2), 2, axis=3)

    def back(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _unary(t, out, back, "upsample2")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels extent mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return _node(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :ca], g[:, ca:]),
        "concat",
    )


def global_max_pool(t: Tensor) -> Tensor:
    """Reduce each (N, C) spatial map to its maximum; first index wins ties."""
    n, c = t.shape[:2]
    flat = t.data.reshape(n, c, -1)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    shape = t.shape

    def back(g):
        gf = np.zeros(flat.shape)
        np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        return (gf.reshape(shape),)

    return _unary(t, out, back, "global_max_pool")


def dense(t: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map of (N, F) rows by a (F, O) weight."""
    if t.ndim != 2 or weight.ndim != 2 or t.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense shape mismatch: input {t.shape}, weight {weight.shape}")
    x, wd = t.data, weight.data
    out = x @ wd
    if bias is not None:
        out = out + bias.data
    parents = (t, weight) if bias is None else (t, weight, bias)

    def back(g):
        grads = [g @ wd.T if t.requires_grad else None, x.T @ g if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _node(out, parents, back, "dense")


# ----------------------------------------------------------- normalization
class BatchNormState:
    """Running per-channel moments for one batch-norm layer.

    While ``cumulative`` is set, train-mode calls average batch moments with
    equal weights instead of the exponential momentum update.
    """

    __slots__ = ("mean", "var", "initialized", "cumulative")

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.initialized = False
        self.cumulative: int | None = None


def batch_norm(
    t: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str = "train",
    state: BatchNormState | None = None,
) -> Tensor:
    """Per-channel normalization over (N, H, W) with learned scale and shift.

    Train mode uses batch moments and, when ``state`` is given, updates the
    running moments with momentum 0.9. Eval mode uses the running moments.
    """
    x = t.data
    c = x.shape[1]
    shape = (1, c, 1, 1)
    if mode == "eval":
        if state is None or not state.initialized:
            raise ContractError("batch_norm eval mode needs populated running moments")
        inv = 1.0 / np.sqrt(state.var + BN_EPS)
        xhat = (x - state.mean.reshape(shape)) * inv.reshape(shape)
        out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

        def back_eval(g):
            gx = g * (gamma.data * inv).reshape(shape) if t.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _node(out, (t, gamma, beta), back_eval, "batch_norm")
    if mode != "train":
        raise ContractError(f"unknown batch_norm mode {mode!r}")

    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.mean(axis=(0, 2, 3))
    xc = x - mu.reshape(shape)
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    if state is not None:
        unbiased = var * m / (m - 1) if m > 1 else var
        if state.cumulative is None:
            state.mean = BN_MOMENTUM * state.mean + (1 - BN_MOMENTUM) * mu
            state.var = BN_MOMENTUM * state.var + (1 - BN_MOMENTUM) * unbiased
        else:
            k = state.cumulative
            state.mean = (k * state.mean + mu) / (k + 1)
            state.var = (k * state.var + unbiased) / (k + 1)
            state.cumulative = k + 1
        state.initialized = True

    def back(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if t.requires_grad:
            scale = (gamma.data * inv / m).reshape(shape)
            gx = scale * (m * g - gbeta.reshape(shape) - xhat * gg.reshape(shape))
        return gx, gg, gbeta

    return _node(out, (t, gamma, beta), back, "batch_norm")


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
