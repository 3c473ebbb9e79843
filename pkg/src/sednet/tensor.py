"""Dense NHWC tensors with tape-based reverse-mode differentiation.

Only the handful of operations the segmentation network and its losses
need are provided. Every operation records a node on the active
:class:`Tape`; :func:`backward` replays that tape in reverse.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "Parameter",
    "Tape",
    "no_grad",
    "tensor",
    "conv2d",
    "maxpool2d",
    "upsample2x",
    "relu",
    "sigmoid",
    "concat_channels",
    "log",
    "clip",
    "sum",
    "mean",
    "backward",
    "zero_grad",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tape:
    """Ordered record of executed operations.

    Nodes are appended in execution order while the tape is active (either as
    a context manager or as the module default).
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def record(self, node: "_Node") -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()


_tape_stack: list[Tape] = []
_recording = [True]


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them (inference, numeric probes)."""
    _recording.append(False)
    try:
        yield
    finally:
        _recording.pop()


class _Node:
    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tensor:
    """An N-dimensional float array that may take part in differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    # elementwise arithmetic with numpy broadcasting
    def __add__(self, other):
        return _add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return _add(_lift(other, self.dtype), _neg(self))

    def __mul__(self, other):
        return _mul(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return _div(_lift(other, self.dtype), self)

    def __neg__(self):
        return _neg(self)


class Parameter(Tensor):
    """A learned tensor. ``grad`` always exists and matches ``data`` in shape."""

    def __init__(self, data, trainable: bool = True, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.trainable = trainable
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = "" if self.trainable else ", frozen"
        return f"Parameter({self.name!r}, shape={self.shape}{flag})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(name: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    needs = _recording[-1] and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is None:
            tape = next((t._tape for t in inputs if t._tape is not None), None)
        if tape is None:
            tape = Tape()
        tape.record(_Node(name, tuple(inputs), out, backward_fn))
        out._tape = tape
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


def _add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, bw)


def _neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), a.data * b.data, bw)


def _div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        gb = -g * out / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("div", (a, b), out, bw)


def log(a: Tensor) -> Tensor:
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; the gradient is zero where clamping is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _emit("sum", (a,), np.asarray(out, dtype=a.dtype), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else math.prod(np.atleast_1d(a.shape)[list(np.atleast_1d(axis))])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4 or a.shape[:3] != b.shape[:3]:
        raise ShapeError(f"concat_channels needs matching B,H,W: got {a.shape} and {b.shape}")
    ca = a.shape[3]

    def bw(g):
        return g[..., :ca], g[..., ca:]

    return _emit("concat", (a, b), np.concatenate([a.data, b.data], axis=3), bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling over the spatial axes of an NHWC tensor."""
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    b, h, w, c = x.shape

    def bw(g):
        return (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _emit("upsample2x", (x,), out, bw)


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """Cross-correlation of an NHWC input with an HWIO kernel.

    ``same`` padding splits the required border as evenly as possible, putting
    the odd pixel at the bottom/right (so a 2x2 kernel pads only there).
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    kh, kw, cin, cout = weight.shape
    if x.shape[3] != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} has {x.shape[3]} channels, "
            f"kernel {weight.shape} expects {cin}"
        )
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
    b, h, w, _ = x.shape
    if padding == "same":
        pt, pb = _same_pads(h, kh, stride)
        pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x.data
    hp, wp = xp.shape[1:3]
    if hp < kh or wp < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # (B, Ho, Wo, Cin, kh, kw) -> rows of (kh, kw, Cin) to match the kernel layout
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, cout)

    def bw(g):
        gflat = g.reshape(-1, cout)
        gw = (cols.T @ gflat).reshape(weight.shape)
        dcols = (gflat @ wmat.T).reshape(b, ho, wo, kh, kw, cin)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
        gx = gxp[:, pt:pt + h, pl:pl + w, :]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gflat.sum(axis=0))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", inputs, out, bw)


def maxpool2d(x: Tensor, window: int, stride: int, padding: int = 0,
              return_argmax: bool = False):
    """Max pooling over spatial windows of an NHWC tensor.

    ``padding`` pixels of ``-inf`` are added symmetrically. Ties resolve to the
    first position of the window in row-major order, and the backward pass
    routes the gradient only there. With ``return_argmax`` the flat in-window
    winner index of every output element is returned as well.
    """
    if window < 1 or stride < 1:
        raise ShapeError(f"window and stride must be >= 1, got {window}, {stride}")
    b, h, w, c = x.shape
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)),
                    constant_values=-np.inf)
    hp, wp = xp.shape[1:3]
    if hp < window or wp < window:
        raise ShapeError(f"pool window {window} larger than padded extent {hp}x{wp}")
    ho = (hp - window) // stride + 1
    wo = (wp - window) // stride + 1
    win = sliding_window_view(xp, (window, window), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    flat = win.reshape(b, ho, wo, c, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(window):
            for j in range(window):
                hit = arg == i * window + j
                if hit.any():
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g * hit
        return (gxp[:, padding:padding + h, padding:padding + w, :],)

    res = _emit("maxpool2d", (x,), np.ascontiguousarray(out), bw)
    return (res, arg) if return_argmax else res


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(input) into ``.grad`` of every tensor that requires it.

    Gradients accumulate across calls; use :func:`zero_grad` between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or loss._tape
    if tape is None or not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if not inp.requires_grad or gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if isinstance(inp, Parameter) or inp._tape is None:
                # leaf: flush right away so params shared by several nodes still sum
                total = grads.pop(key)
                if inp.grad is None:
                    inp.grad = np.array(total, dtype=inp.dtype, copy=True)
                else:
                    inp.grad += total.astype(inp.dtype, copy=False)


def zero_grad(params) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad.fill(0)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5,
               indices: Sequence[Sequence[tuple]] | None = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps tensors (one per entry of ``inputs``) to a scalar tensor. The
    error per element is ``|a - n| / max(|a|, |n|, 1e-8)``. ``indices`` may
    restrict the numeric probe to selected elements of each input.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*leaves)
    backward(loss, tape)
    worst = 0.0
    for k, (arr, leaf) in enumerate(zip(arrays, leaves)):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        probe = indices[k] if indices is not None else list(np.ndindex(arr.shape))
        for idx in probe:
            orig = arr[idx]
            with no_grad():
                arr[idx] = orig + eps
                fp = float(fn(*[Tensor(a) for a in arrays]).data)
                arr[idx] = orig - eps
                fm = float(fn(*[Tensor(a) for a in arrays]).data)
            arr[idx] = orig
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
