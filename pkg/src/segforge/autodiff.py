"""Reverse-mode automatic differentiation over rank-4 tensors.

Everything in this package that learns runs on top of this module. A
:class:`Tensor` wraps a dense ``(batch, channels, height, width)`` array and a
:class:`Tape` records every differentiable operation applied while it is
active, so :meth:`Tape.backward` can replay the graph in reverse and hand back
gradients for all ``requires_grad`` leaves.

Deliberately small: only the operations a U-Net needs, stride fixed at 1,
no broadcasting, no arbitrary-rank support. A tape and its tensors form a
single-threaded unit; pure forward calls on gradient-free tensors are safe
from any thread because nothing is recorded without an active tape.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "Tensor",
    "Tape",
    "record_op",
    "conv2d",
    "relu",
    "sigmoid",
    "maxpool2x2",
    "upsample_nearest2x",
    "concat_channels",
    "add",
    "sub",
    "mul",
    "sum_all",
    "mean_all",
]


class ShapeError(ValueError):
    """A tensor shape violates an operation's contract."""


class TapeError(RuntimeError):
    """Tape misuse: non-scalar loss, loss from a different tape, and so on."""


_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """Rank-4 array plus the bookkeeping needed for reverse-mode autodiff.

    ``data`` is always a ``(n, c, h, w)`` float array (float64 unless the
    caller supplies float32). ``tape``/``node_id`` locate the tensor on the
    tape that recorded it; ``grad`` is populated by :meth:`Tape.backward`.
    """

    __slots__ = ("data", "requires_grad", "tape", "node_id", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ShapeError(
                f"tensors are rank-4 (batch, channels, height, width); got shape {arr.shape}"
            )
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tape: Optional["Tape"] = None
        self.node_id: Optional[int] = None
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def scalar(value: float, dtype=np.float64) -> Tensor:
    """A (1,1,1,1) tensor holding one value."""
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]
    # maps the output gradient to one gradient per input slot (None = no grad)
    backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    leaf: Optional[Tensor] = None


class Tape:
    """Ordered record of operations, used as a context manager.

    Nodes are appended as operations execute, so the list is topologically
    ordered by construction: every node's inputs precede it. ``grads`` maps
    node id to the accumulated gradient after :meth:`backward`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape context exited out of order")
        stack.pop()
        return False

    def _node_for(self, t: Tensor) -> int:
        """Node id of ``t`` on this tape, registering it as a leaf if new."""
        if t.tape is self and t.node_id is not None:
            return t.node_id
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, leaf=t))
        t.tape = self
        t.node_id = node_id
        return node_id

    def _add(self, kind: str, inputs: tuple[int, ...], backward) -> int:
        node_id = len(self.nodes)
        self.nodes.append(_Node(kind, inputs, backward))
        return node_id

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse-accumulate gradients from a scalar loss.

        Returns a mapping from every ``requires_grad`` leaf registered on
        this tape to its gradient (zeros for leaves the loss never touched).
        Each leaf's ``.grad`` attribute is set to the same array.
        """
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss.tape is not self or loss.node_id is None:
            raise TapeError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node_id in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[node_id]
            g = grads.get(node_id)
            if g is None or node.backward is None:
                continue
            for in_id, in_grad in zip(node.inputs, node.backward(g)):
                if in_id < 0 or in_grad is None:
                    continue
                held = grads.get(in_id)
                grads[in_id] = in_grad if held is None else held + in_grad
        self.grads = grads
        result: dict[Tensor, np.ndarray] = {}
        for node_id, node in enumerate(self.nodes):
            if node.leaf is None:
                continue
            g = grads.get(node_id)
            if g is None:
                g = np.zeros_like(node.leaf.data)
            node.leaf.grad = g
            result[node.leaf] = g
        return result


def record_op(
    kind: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap an op result in a Tensor, recording it if a tape is active.

    ``backward`` receives the gradient of the output and must return one
    gradient (or None) per entry of ``inputs``. Inputs that do not require
    grad are never registered; their slots are ignored. This is the hook
    loss functions elsewhere in the package use to define fused ops.
    """
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    if tape is None or not needs:
        out = Tensor(out_data)
        out.requires_grad = needs
        return out
    ids = tuple(tape._node_for(t) if t.requires_grad else -1 for t in inputs)
    out = Tensor(out_data, requires_grad=True)
    out.tape = tape
    out.node_id = tape._add(kind, ids, backward)
    return out


# ---------------------------------------------------------------------------
# convolution


def _conv_out_size(h: int, w: int, kh: int, kw: int, ph: int, pw: int) -> tuple[int, int]:
    return h + 2 * ph - kh + 1, w + 2 * pw - kw + 1


# largest im2col buffer worth materializing, in elements; beyond this the
# offset-loop path keeps memory O(input) at some speed cost
_IM2COL_MAX = 16_000_000


def _corr2d(x: np.ndarray, w: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Stride-1 cross-correlation with zero padding, NCHW in and out."""
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho, wo = _conv_out_size(h, wd, kh, kw, ph, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    if n * ho * wo * ci * kh * kw <= _IM2COL_MAX:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
        cols = cols.reshape(n * ho * wo, ci * kh * kw)
        y = cols @ w.reshape(co, -1).T
        return np.ascontiguousarray(y.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))
    xp = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))  # NHWC
    acc = np.zeros((n, ho, wo, co), dtype=x.dtype)
    flat = acc.reshape(-1, co)
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, u : u + ho, v : v + wo, :].reshape(-1, ci)
            flat += xs @ w[:, :, u, v].T
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2))


def _corr2d_input_grad(
    g: np.ndarray, w: np.ndarray, ph: int, pw: int, in_hw: tuple[int, int]
) -> np.ndarray:
    """Gradient of _corr2d with respect to its input.

    Equals a full correlation of the output gradient with the kernel flipped
    spatially and transposed in/out, so it rides the same fast path.
    """
    co, ci, kh, kw = w.shape
    h, wd = in_hw
    w_hat = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    full = _corr2d(gp, w_hat, 0, 0)
    return full[:, :, ph : ph + h, pw : pw + wd]


def _corr2d_weight_grad(
    x: np.ndarray, g: np.ndarray, ph: int, pw: int, kh: int, kw: int
) -> np.ndarray:
    """Gradient of _corr2d with respect to the kernel."""
    n, ci, h, wd = x.shape
    _, co, ho, wo = g.shape[0], g.shape[1], g.shape[2], g.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    xp = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    gn = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, co)
    gw = np.empty((co, ci, kh, kw), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, u : u + ho, v : v + wo, :].reshape(-1, ci)
            gw[:, :, u, v] = gn.T @ xs
    return gw


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    padding: str = "same",
    stride: int = 1,
) -> Tensor:
    """2-D convolution (cross-correlation), stride 1, zero same/valid padding.

    ``weight`` is (out_channels, in_channels, kh, kw); ``bias`` if given is
    (1, out_channels, 1, 1) and is added per output channel.
    """
    if stride != 1:
        raise ShapeError(f"conv2d supports stride 1 only, got {stride}")
    if padding not in ("same", "valid"):
        raise ShapeError(f"padding must be 'same' or 'valid', got {padding!r}")
    n, ci, h, w = x.shape
    co, wci, kh, kw = weight.shape
    if wci != ci:
        raise ShapeError(
            f"conv2d: weight in_channels (dim 1) is {wci} but input has {ci} channels"
        )
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"same-padding needs odd kernel sides, got {kh}x{kw}")
        ph, pw = kh // 2, kw // 2
    else:
        if kh > h or kw > w:
            raise ShapeError(
                f"valid conv kernel {kh}x{kw} exceeds input {h}x{w} (height/width dims)"
            )
        ph = pw = 0
    if bias is not None and bias.shape != (1, co, 1, 1):
        raise ShapeError(
            f"conv2d: bias shape must be (1, {co}, 1, 1), got {bias.shape}"
        )

    out = _corr2d(x.data, weight.data, ph, pw)
    if bias is not None:
        out = out + bias.data

    x_data, w_data = x.data, weight.data
    has_bias = bias is not None

    def backward(g: np.ndarray):
        gx = _corr2d_input_grad(g, w_data, ph, pw, (h, w))
        gw = _corr2d_weight_grad(x_data, g, ph, pw, kh, kw)
        gb = g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1) if has_bias else None
        return (gx, gw, gb) if has_bias else (gx, gw)

    inputs = (x, weight, bias) if has_bias else (x, weight)
    return record_op("conv2d", inputs, out, backward)


# ---------------------------------------------------------------------------
# pointwise and structural ops


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    x_data = x.data

    def backward(g: np.ndarray):
        return ((x_data > 0) * g,)

    return record_op("relu", (x,), out, backward)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, numerically stable for large |x|."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g: np.ndarray):
        return (g * out * (1.0 - out),)

    return record_op("sigmoid", (x,), out, backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling; ties route the gradient to the first element in
    row-major window order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even height and width, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = (
        x.data.reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        gwin = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = (
            gwin.reshape(n, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (gx,)

    return record_op("maxpool2x2", (x,), out, backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block."""
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g: np.ndarray):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record_op("upsample_nearest2x", (x,), out, backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; batch and spatial dims must match."""
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(
            f"concat_channels: batch/spatial dims differ, {a.shape} vs {b.shape}"
        )
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g: np.ndarray):
        return g[:, :ca], g[:, ca:]

    return record_op("concat_channels", (a, b), out, backward)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ, {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return record_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return record_op("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record_op("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)
    x_data = x.data

    def backward(g: np.ndarray):
        return (g * np.ones_like(x_data),)

    return record_op("sum_all", (x,), out, backward)


def mean_all(x: Tensor) -> Tensor:
    size = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype).reshape(1, 1, 1, 1)
    x_data = x.data

    def backward(g: np.ndarray):
        return (g * np.ones_like(x_data) / size,)

    return record_op("mean_all", (x,), out, backward)
