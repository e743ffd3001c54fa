"""Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps an immutable numpy array. Operations build a graph of
``_Node`` records; :func:`backward` linearizes the graph reachable from a
scalar loss into a :class:`GradTape` and replays it in reverse, returning a
fresh gradient map on every call. Nothing is accumulated on the tensors
themselves, so the same forward graph can be differentiated several times
against different losses.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "tensor",
    "backward",
    "conv2d",
    "deconv2d",
    "elementwise",
    "leaky_relu",
    "relu",
    "tanh",
    "sigmoid",
    "log",
    "clamp",
    "reduce",
    "mean",
    "total",
    "l1_distance",
    "downsample",
    "concat",
    "spatial_mean",
    "log_softmax",
    "fault_injection",
    "record_kinks",
]

_counter = itertools.count()

# Test hooks that deliberately corrupt a backward rule. Used to prove the
# gradient oracles actually catch defects.
_FAULTS: set[str] = set()
KNOWN_FAULTS = frozenset({"conv_backward_sign"})


@contextlib.contextmanager
def fault_injection(name: str):
    if name not in KNOWN_FAULTS:
        raise ValueError(f"unknown fault {name!r}; known: {sorted(KNOWN_FAULTS)}")
    _FAULTS.add(name)
    try:
        yield
    finally:
        _FAULTS.discard(name)


# When set, piecewise-linear ops append their branch pattern here so finite
# differences can tell whether a perturbation crossed a kink.
_KINKS: list | None = None


@contextlib.contextmanager
def record_kinks():
    global _KINKS
    prev, _KINKS = _KINKS, []
    try:
        yield _KINKS
    finally:
        _KINKS = prev


def _log_kink(pattern: np.ndarray):
    if _KINKS is not None:
        _KINKS.append(pattern)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class _Node:
    __slots__ = ("op", "inputs", "backward_fn", "order")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.order = next(_counter)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """An immutable n-dimensional array that may take part in autodiff."""

    __slots__ = ("data", "requires_grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else np.float64, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = _freeze(arr)
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
        out = cls.__new__(cls)
        out.data = _freeze(np.asarray(data, order="C"))
        out.requires_grad = any(t.requires_grad for t in inputs)
        out._node = _Node(op, inputs, backward_fn) if out.requires_grad else None
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out._node = None
        out.name = self.name
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic
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

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> Tensor:
        return total(self)

    def mean(self) -> Tensor:
        return mean(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


class GradTape:
    """Topologically ordered record of the graph feeding a scalar loss.

    ``nodes`` lists the op-produced tensors in forward order; replaying it in
    reverse visits each node once, after all of its consumers.
    """

    def __init__(self, loss: Tensor):
        self.loss = loss
        self.nodes: list[Tensor] = self._linearize(loss)

    @staticmethod
    def _linearize(loss: Tensor) -> list[Tensor]:
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t._node.inputs)
        # node creation order is a valid topological order
        found.sort(key=lambda t: t._node.order)
        return found

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        out, seen = [], set()
        for t in self.nodes:
            for inp in t._node.inputs:
                if inp.requires_grad and inp._node is None and id(inp) not in seen:
                    seen.add(id(inp))
                    out.append(inp)
        return out

    def replay(self, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Run the reverse sweep and return ``{tensor: d(loss)/d(tensor)}``.

        Without ``wrt`` the map covers every leaf that requires grad. With
        ``wrt`` only those tensors (leaf or not) are reported, and branches
        that cannot reach them are never differentiated.
        """
        loss = self.loss
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        targets = None if wrt is None else {id(t) for t in wrt}

        relevant: dict[int, bool] = {}

        def reaches(t: Tensor) -> bool:
            if not t.requires_grad:
                return False
            if targets is not None and id(t) in targets:
                return True
            if t._node is None:
                return targets is None
            return relevant[id(t)]

        for t in self.nodes:
            relevant[id(t)] = any(reaches(i) for i in t._node.inputs)

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        result: dict[Tensor, np.ndarray] = {}
        if targets is not None and id(loss) in targets:
            result[loss] = grads[id(loss)]
        for t in reversed(self.nodes):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            needs = tuple(reaches(i) for i in node.inputs)
            if not any(needs):
                continue
            in_grads = node.backward_fn(g, needs)
            for inp, need, ig in zip(node.inputs, needs, in_grads):
                if not need or ig is None:
                    continue
                ig = _unbroadcast(np.asarray(ig, dtype=inp.dtype), inp.shape)
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
                if (targets is None and inp._node is None) or (targets is not None and id(inp) in targets):
                    result[inp] = grads[id(inp)]
        return result


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss``; see :meth:`GradTape.replay`."""
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if wrt is not None:
        wrt = list(wrt)
    return GradTape(loss).replay(wrt)


# ---------------------------------------------------------------------------
# arithmetic and shape ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return Tensor._from_op(a.data + b.data, "add", (a, b), lambda g, needs: (g, g))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return Tensor._from_op(a.data - b.data, "sub", (a, b), lambda g, needs: (g, -g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data

    def bwd(g, needs):
        return (g * bd if needs[0] else None, g * ad if needs[1] else None)

    return Tensor._from_op(ad * bd, "mul", (a, b), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return Tensor._from_op(a.data.reshape(shape), "reshape", (a,), lambda g, needs: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g, needs):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, bwd)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd = x.data
    pos = xd > 0
    _log_kink(pos)
    scale = np.where(pos, 1.0, slope).astype(xd.dtype)
    return Tensor._from_op(xd * scale, "leaky_relu", (x,), lambda g, needs: (g * scale,))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._from_op(y, "tanh", (x,), lambda g, needs: (g * (1.0 - y * y),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    return Tensor._from_op(y, "sigmoid", (x,), lambda g, needs: (g * y * (1.0 - y),))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise ValueError("log of a non-positive value")
    return Tensor._from_op(np.log(xd), "log", (x,), lambda g, needs: (g / xd,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    _log_kink(np.sign(xd - lo) + 2 * np.sign(xd - hi))
    inside = ((xd >= lo) & (xd <= hi)).astype(xd.dtype)
    return Tensor._from_op(np.clip(xd, lo, hi), "clamp", (x,), lambda g, needs: (g * inside,))


_ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def elementwise(name: str, x: Tensor, **kwargs) -> Tensor:
    """Apply a named activation; ``leaky_relu`` accepts ``slope``."""
    try:
        fn = _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x, **kwargs)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._from_op(np.asarray(x.data.sum()), "sum", (x,), lambda g, needs: (np.broadcast_to(g, shape),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return Tensor._from_op(np.asarray(x.data.mean()), "mean", (x,),
                           lambda g, needs: (np.broadcast_to(g / n, shape),))


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Per-element mean absolute difference."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    sign = np.sign(diff)
    _log_kink(sign)
    n = diff.size

    def bwd(g, needs):
        s = g * sign / n
        return (s if needs[0] else None, -s if needs[1] else None)

    return Tensor._from_op(np.asarray(np.abs(diff).mean()), "l1_distance", (a, b), bwd)


_REDUCTIONS = {"mean", "sum", "l1_distance"}


def reduce(name: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if name == "mean":
        return mean(a)
    if name == "sum":
        return total(a)
    if name == "l1_distance":
        if b is None:
            raise ValueError("l1_distance needs two operands")
        return l1_distance(a, b)
    raise ValueError(f"unknown reduction {name!r}; expected one of {sorted(_REDUCTIONS)}")


def spatial_mean(x: Tensor) -> Tensor:
    """Global average over H and W of an NCHW tensor, keeping dims."""
    if x.ndim != 4:
        raise ShapeError(f"spatial_mean expects NCHW, got {x.shape}")
    shape = x.shape
    hw = shape[2] * shape[3]
    return Tensor._from_op(x.data.mean(axis=(2, 3), keepdims=True), "spatial_mean", (x,),
                           lambda g, needs: (np.broadcast_to(g / hw, shape),))


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor."""
    if x.ndim != 2:
        raise ShapeError(f"log_softmax expects (batch, classes), got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)

    def bwd(g, needs):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return Tensor._from_op(out, "log_softmax", (x,), bwd)


def downsample(x: Tensor, factor: int) -> Tensor:
    """Average-pool non-overlapping ``factor`` x ``factor`` blocks."""
    if x.ndim != 4:
        raise ShapeError(f"downsample expects NCHW, got {x.shape}")
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")
    B, C, H, W = x.shape
    if H % factor or W % factor:
        raise ShapeError(f"downsample: spatial size {H}x{W} not divisible by {factor}")
    if factor == 1:
        return x
    f2 = float(factor * factor)
    out = x.data.reshape(B, C, H // factor, factor, W // factor, factor).mean(axis=(3, 5))

    def bwd(g, needs):
        g = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return (g / f2,)

    return Tensor._from_op(out, "downsample", (x,), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Strided view of shape (B, C, kh, kw, ho, wo) over a padded input."""
    B, C = xp.shape[:2]
    sB, sC, sH, sW = xp.strides
    return as_strided(xp, (B, C, kh, kw, ho, wo), (sB, sC, sH, sW, sH * stride, sW * stride), writeable=False)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_forward(x: np.ndarray, k: np.ndarray, stride: int, pad: int) -> np.ndarray:
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    if kh == kw == 1 and pad == 0:
        xs = x[:, :, ::stride, ::stride][:, :, :ho, :wo]
        return np.einsum("bchw,oc->bohw", xs, k[:, :, 0, 0], optimize=True)
    win = _windows(_pad(x, pad), kh, kw, stride, ho, wo)
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(B * ho * wo, C * kh * kw)
    out = cols @ k.reshape(O, C * kh * kw).T
    return out.reshape(B, ho, wo, O).transpose(0, 3, 1, 2)


def _conv_input_grad(g: np.ndarray, k: np.ndarray, stride: int, pad: int, in_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`_conv_forward` w.r.t. its input (= transposed conv)."""
    B, O, ho, wo = g.shape
    _, C, kh, kw = k.shape
    H, W = in_hw
    if kh == kw == 1 and pad == 0:
        out = np.zeros((B, C, H, W), dtype=g.dtype)
        out[:, :, : ho * stride : stride, : wo * stride : stride] = np.einsum("bohw,oc->bchw", g, k[:, :, 0, 0],
                                                                              optimize=True)
        return out
    cols = g.transpose(0, 2, 3, 1).reshape(B * ho * wo, O) @ k.reshape(O, C * kh * kw)
    cols = cols.reshape(B, ho, wo, C, kh, kw)
    Hp, Wp = H + 2 * pad, W + 2 * pad
    # room for every window even when the forward floor() dropped a remainder
    out = np.zeros((B, C, max(Hp, (ho - 1) * stride + kh), max(Wp, (wo - 1) * stride + kw)), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2)
    return out[:, :, pad : pad + H, pad : pad + W]


def _conv_kernel_grad(x: np.ndarray, g: np.ndarray, stride: int, pad: int, kshape: tuple[int, ...]) -> np.ndarray:
    B, C, H, W = x.shape
    O, _, kh, kw = kshape
    ho, wo = g.shape[2:]
    if kh == kw == 1 and pad == 0:
        xs = x[:, :, ::stride, ::stride][:, :, :ho, :wo]
        return np.einsum("bohw,bchw->oc", g, xs, optimize=True)[:, :, None, None]
    win = _windows(_pad(x, pad), kh, kw, stride, ho, wo)
    cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(B * ho * wo, C * kh * kw)
    gk = g.transpose(1, 0, 2, 3).reshape(O, B * ho * wo) @ cols
    return gk.reshape(O, C, kh, kw)


def _check_conv_args(x: Tensor, k: Tensor, bias: Tensor | None, stride: int, padding: int, channel_axis: int, what: str):
    if x.ndim != 4:
        raise ShapeError(f"{what}: input must be 4-D (batch, channels, height, width), got {x.shape}")
    if k.ndim != 4:
        raise ShapeError(f"{what}: kernel must be 4-D, got {k.shape}")
    if stride < 1:
        raise ValueError(f"{what}: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"{what}: padding must be >= 0, got {padding}")
    if k.shape[channel_axis] != x.shape[1]:
        raise ShapeError(
            f"{what}: input channels (dim 1 of input) = {x.shape[1]} but kernel dim {channel_axis} = "
            f"{k.shape[channel_axis]}"
        )
    out_ch = k.shape[1 - channel_axis]
    if bias is not None and bias.shape != (out_ch,):
        raise ShapeError(f"{what}: bias shape {bias.shape} must be ({out_ch},)")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``kernel`` is (out_ch, in_ch, kh, kw)."""
    _check_conv_args(x, kernel, bias, stride, padding, 1, "conv2d")
    H, W = x.shape[2:]
    kh, kw = kernel.shape[2:]
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    xd, kd = x.data, kernel.data
    out = _conv_forward(xd, kd, stride, padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bwd(g, needs):
        gx = _conv_input_grad(g, kd, stride, padding, (H, W)) if needs[0] else None
        gk = _conv_kernel_grad(xd, g, stride, padding, kd.shape) if needs[1] else None
        if gx is not None and "conv_backward_sign" in _FAULTS:
            gx = -gx
        res = [gx, gk]
        if bias is not None:
            res.append(g.sum(axis=(0, 2, 3)) if needs[2] else None)
        return tuple(res)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, "conv2d", inputs, bwd)


def deconv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution. ``kernel`` is (in_ch, out_ch, kh, kw).

    This is exactly the input-adjoint of :func:`conv2d` with the same kernel
    and geometry, so output size is ``(H - 1) * stride - 2 * padding + kh``.
    """
    _check_conv_args(x, kernel, bias, stride, padding, 0, "deconv2d")
    H, W = x.shape[2:]
    kh, kw = kernel.shape[2:]
    Ho = (H - 1) * stride - 2 * padding + kh
    Wo = (W - 1) * stride - 2 * padding + kw
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"deconv2d: geometry gives empty output {Ho}x{Wo}")
    xd, kd = x.data, kernel.data
    out = _conv_input_grad(xd, kd, stride, padding, (Ho, Wo))
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bwd(g, needs):
        gx = _conv_forward(g, kd, stride, padding) if needs[0] else None
        gk = _conv_kernel_grad(g, xd, stride, padding, kd.shape) if needs[1] else None
        res = [gx, gk]
        if bias is not None:
            res.append(g.sum(axis=(0, 2, 3)) if needs[2] else None)
        return tuple(res)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out, "deconv2d", inputs, bwd)
