"""
Tensor core for guidederain.

Dense NCHW tensors, the differentiable primitives the networks are built
from, and a reverse-mode tape that propagates gradients through them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np


logger = logging.getLogger(__name__)

Padding = Tuple[int, int, int, int]  # top, bottom, left, right
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class InvalidArgumentError(ValueError):
    """Raised when an operation receives arguments that violate its contract."""
    pass


@dataclass
class _Node:
    """One recorded operation on a tape."""
    kind: str
    inputs: Tuple[int, ...]
    backward: Optional[BackwardFn] = None


class Tape:
    """
    Append-only record of operations for reverse-mode differentiation.

    Nodes are appended in creation order, so every node's inputs precede it.
    A tape belongs to one forward/backward pass and is not shared between
    threads.
    """

    def __init__(self):
        self.nodes: List[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data: np.ndarray, name: str = "") -> "Tensor":
        """
        Register a learnable (or watched) array as a leaf on this tape.

        Args:
            data: Array to wrap; 4-D, or 0-D for scalars
            name: Optional label used in error messages

        Returns:
            Tensor recorded on this tape
        """
        node_id = self._append(_Node(kind="leaf", inputs=()))
        return Tensor(data, tape=self, node_id=node_id, name=name)

    def record(
        self,
        kind: str,
        inputs: Sequence["Tensor"],
        data: np.ndarray,
        backward: BackwardFn,
    ) -> "Tensor":
        """Append an operation node and return its output tensor."""
        ids = tuple(t.node_id if t.tape is self else -1 for t in inputs)
        node_id = self._append(_Node(kind=kind, inputs=ids, backward=backward))
        return Tensor(data, tape=self, node_id=node_id)

    def _append(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def backward(self, loss: "Tensor") -> Dict[int, np.ndarray]:
        """
        Propagate gradients from a scalar loss back through the tape.

        Args:
            loss: 0-D tensor produced on this tape

        Returns:
            Mapping from node id to the gradient of loss w.r.t. that node.
            Nodes the loss does not depend on are absent.

        Raises:
            InvalidArgumentError: If loss is not a scalar on this tape
        """
        if loss.tape is not self or loss.node_id is None:
            raise InvalidArgumentError("backward: loss was not produced on this tape")
        if loss.data.ndim != 0:
            raise InvalidArgumentError(
                f"backward: loss must be a scalar, got shape {loss.shape}"
            )

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node_id in range(loss.node_id, -1, -1):
            grad = grads.get(node_id)
            node = self.nodes[node_id]
            if grad is None or node.backward is None:
                continue
            input_grads = node.backward(grad)
            for input_id, input_grad in zip(node.inputs, input_grads):
                if input_id < 0 or input_grad is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + input_grad
                else:
                    grads[input_id] = input_grad
        return grads


class Tensor:
    """
    Dense 4-D array in [batch, channel, height, width] layout.

    0-D tensors hold scalar losses. A tensor created by an operation on a
    taped input is itself recorded on that tape; tensors without a tape are
    plain values and cost nothing extra to compute with.
    """

    def __init__(
        self,
        data: Union[np.ndarray, float],
        tape: Optional[Tape] = None,
        node_id: Optional[int] = None,
        name: str = "",
    ):
        array = np.asarray(data)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float32)
        if array.ndim not in (0, 4):
            raise InvalidArgumentError(
                f"Tensor data must be 4-D (n, c, h, w) or a scalar, got shape {array.shape}"
            )
        self.data = array
        self.tape = tape
        self.node_id = node_id
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.ndim != 0:
            raise InvalidArgumentError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 2-D convolution."""
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (3, 3)
    stride: int = 1
    dilation: int = 1
    padding: Padding = (0, 0, 0, 0)

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise InvalidArgumentError(
                f"ConvSpec channels must be positive, got {self.in_channels}->{self.out_channels}"
            )
        if min(self.kernel) <= 0 or self.stride <= 0 or self.dilation <= 0:
            raise InvalidArgumentError(
                f"ConvSpec kernel/stride/dilation must be positive, got "
                f"kernel={self.kernel} stride={self.stride} dilation={self.dilation}"
            )
        if len(self.padding) != 4 or min(self.padding) < 0:
            raise InvalidArgumentError(
                f"ConvSpec padding must be four nonnegative ints, got {self.padding}"
            )

    @classmethod
    def same(
        cls,
        in_channels: int,
        out_channels: int,
        kernel: int = 3,
        dilation: int = 1,
        stride: int = 1,
    ) -> "ConvSpec":
        """Odd square kernel padded so stride 1 preserves spatial size."""
        if kernel % 2 == 0:
            raise InvalidArgumentError(f"'same' padding needs an odd kernel, got {kernel}")
        pad = dilation * (kernel - 1) // 2
        return cls(
            in_channels=in_channels,
            out_channels=out_channels,
            kernel=(kernel, kernel),
            stride=stride,
            dilation=dilation,
            padding=(pad, pad, pad, pad),
        )

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel[0], self.kernel[1])

    def output_hw(self, height: int, width: int) -> Tuple[int, int]:
        top, bottom, left, right = self.padding
        kh, kw = self.kernel
        out_h = (height + top + bottom - self.dilation * (kh - 1) - 1) // self.stride + 1
        out_w = (width + left + right - self.dilation * (kw - 1) - 1) // self.stride + 1
        return out_h, out_w


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tapes = {id(t.tape): t.tape for t in tensors if t.tape is not None}
    if len(tapes) > 1:
        raise InvalidArgumentError("Operands are recorded on different tapes")
    return next(iter(tapes.values()), None)


def _result(
    kind: str,
    inputs: Sequence[Tensor],
    data: np.ndarray,
    backward: BackwardFn,
) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(kind, inputs, data, backward)


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _require_4d(op: str, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise InvalidArgumentError(f"{op}: expected a 4-D tensor, got shape {x.shape}")


# ============================================================
# Convolution
# ============================================================

def _window(xp: np.ndarray, i: int, j: int, spec: ConvSpec, out_h: int, out_w: int):
    """Slice of the padded input seen by kernel tap (i, j)."""
    r0 = i * spec.dilation
    c0 = j * spec.dilation
    return (
        slice(None),
        slice(None),
        slice(r0, r0 + spec.stride * (out_h - 1) + 1, spec.stride),
        slice(c0, c0 + spec.stride * (out_w - 1) + 1, spec.stride),
    )


def _conv2d_backward(
    grad: np.ndarray,
    xp: np.ndarray,
    weight: np.ndarray,
    spec: ConvSpec,
    input_hw: Tuple[int, int],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. its input, weight and bias."""
    _, _, out_h, out_w = grad.shape
    kh, kw = spec.kernel
    dxp = np.zeros_like(xp)
    dweight = np.zeros_like(weight)
    for i in range(kh):
        for j in range(kw):
            window = _window(xp, i, j, spec, out_h, out_w)
            dweight[:, :, i, j] = np.einsum("nohw,nchw->oc", grad, xp[window])
            dxp[window] += np.einsum("nohw,oc->nchw", grad, weight[:, :, i, j])
    top, _, left, _ = spec.padding
    height, width = input_hw
    dx = dxp[:, :, top:top + height, left:left + width]
    dbias = grad.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    return dx, dweight, dbias


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """
    2-D cross-correlation with per-channel bias.

    Args:
        x: Input of shape (n, in_channels, h, w)
        weight: Kernel stored as a 4-D tensor of shape (out, in, kh, kw)
        bias: Per-output-channel bias stored as shape (1, out, 1, 1)
        spec: Convolution geometry

    Returns:
        Tensor of shape (n, out_channels, out_h, out_w)

    Raises:
        InvalidArgumentError: On shape mismatch or an empty output
    """
    _require_4d("conv2d", x)
    if weight.shape != spec.weight_shape:
        raise InvalidArgumentError(
            f"conv2d: weight shape {weight.shape} does not match spec {spec.weight_shape}"
        )
    if x.shape[1] != spec.in_channels:
        raise InvalidArgumentError(
            f"conv2d: input shape {x.shape} has {x.shape[1]} channels, "
            f"weight shape {weight.shape} expects {spec.in_channels}"
        )
    if bias.shape != (1, spec.out_channels, 1, 1):
        raise InvalidArgumentError(
            f"conv2d: bias shape {bias.shape} does not match (1, {spec.out_channels}, 1, 1)"
        )

    n, _, height, width = x.shape
    out_h, out_w = spec.output_hw(height, width)
    if out_h <= 0 or out_w <= 0:
        raise InvalidArgumentError(
            f"conv2d: input shape {x.shape} with weight shape {weight.shape} "
            f"gives an empty output ({out_h}x{out_w})"
        )

    top, bottom, left, right = spec.padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    w = weight.data
    dtype = np.result_type(xp, w)
    out = np.zeros((n, spec.out_channels, out_h, out_w), dtype=dtype)
    kh, kw = spec.kernel
    for i in range(kh):
        for j in range(kw):
            window = _window(xp, i, j, spec, out_h, out_w)
            out += np.einsum("nchw,oc->nohw", xp[window], w[:, :, i, j])
    out += bias.data

    def backward(grad: np.ndarray):
        return _conv2d_backward(grad, xp, w, spec, (height, width))

    return _result("conv2d", (x, weight, bias), out, backward)


# ============================================================
# Resampling
# ============================================================

def avg_pool(x: Tensor, k: int) -> Tensor:
    """
    Non-overlapping k x k mean pooling with stride k.

    Raises:
        InvalidArgumentError: If h or w is not divisible by k
    """
    _require_4d("avg_pool", x)
    if k <= 0:
        raise InvalidArgumentError(f"avg_pool: k must be positive, got {k}")
    if k == 1:
        return x
    n, c, h, w = x.shape
    if h % k or w % k:
        raise InvalidArgumentError(
            f"avg_pool: spatial size {h}x{w} of shape {x.shape} is not divisible by {k}"
        )
    blocks = x.data.reshape(n, c, h // k, k, w // k, k)
    out = blocks.mean(axis=(3, 5))

    def backward(grad: np.ndarray):
        spread = np.repeat(np.repeat(grad, k, axis=2), k, axis=3) / (k * k)
        return (spread.astype(x.dtype, copy=False),)

    return _result("avg_pool", (x,), out, backward)


def max_pool(x: Tensor, k: int) -> Tensor:
    """
    Non-overlapping k x k max pooling; ties share the gradient evenly.

    Raises:
        InvalidArgumentError: If h or w is not divisible by k
    """
    _require_4d("max_pool", x)
    if k <= 0:
        raise InvalidArgumentError(f"max_pool: k must be positive, got {k}")
    if k == 1:
        return x
    n, c, h, w = x.shape
    if h % k or w % k:
        raise InvalidArgumentError(
            f"max_pool: spatial size {h}x{w} of shape {x.shape} is not divisible by {k}"
        )
    blocks = x.data.reshape(n, c, h // k, k, w // k, k)
    out = blocks.max(axis=(3, 5))

    def backward(grad: np.ndarray):
        mask = blocks == out[:, :, :, None, :, None]
        share = mask / mask.sum(axis=(3, 5), keepdims=True)
        spread = share * grad[:, :, :, None, :, None]
        return (spread.reshape(n, c, h, w).astype(x.dtype, copy=False),)

    return _result("max_pool", (x,), out, backward)


def upsample_nearest(x: Tensor, s: int) -> Tensor:
    """Replicate every cell into an s x s block."""
    _require_4d("upsample_nearest", x)
    if s <= 0:
        raise InvalidArgumentError(f"upsample_nearest: s must be positive, got {s}")
    if s == 1:
        return x
    out = np.repeat(np.repeat(x.data, s, axis=2), s, axis=3)
    n, c, h, w = x.shape

    def backward(grad: np.ndarray):
        return (grad.reshape(n, c, h, s, w, s).sum(axis=(3, 5)),)

    return _result("upsample_nearest", (x,), out, backward)


# ============================================================
# Channel plumbing
# ============================================================

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """
    Concatenate tensors along the channel axis, in the given order.

    Raises:
        InvalidArgumentError: If inputs disagree on batch or spatial size
    """
    if not xs:
        raise InvalidArgumentError("concat_channels: no inputs")
    for x in xs:
        _require_4d("concat_channels", x)
    if len(xs) == 1:
        return xs[0]
    n, _, h, w = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0], x.shape[2], x.shape[3]) != (n, h, w):
            raise InvalidArgumentError(
                f"concat_channels: shape mismatch {xs[0].shape} vs {x.shape}"
            )
    out = np.concatenate([x.data for x in xs], axis=1)
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def backward(grad: np.ndarray):
        return tuple(grad[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _result("concat_channels", tuple(xs), out, backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels [start, stop) of x."""
    _require_4d("slice_channels", x)
    if not 0 <= start < stop <= x.shape[1]:
        raise InvalidArgumentError(
            f"slice_channels: range [{start}, {stop}) outside shape {x.shape}"
        )
    out = x.data[:, start:stop]

    def backward(grad: np.ndarray):
        full = np.zeros_like(x.data)
        full[:, start:stop] = grad
        return (full,)

    return _result("slice_channels", (x,), out, backward)


# ============================================================
# Elementwise
# ============================================================

def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """x where x >= 0, else slope * x. The derivative at 0 is taken as 1."""
    positive = x.data >= 0
    out = np.where(positive, x.data, slope * x.data).astype(x.dtype, copy=False)

    def backward(grad: np.ndarray):
        return (np.where(positive, grad, slope * grad).astype(grad.dtype, copy=False),)

    return _result("leaky_relu", (x,), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b for identically shaped tensors."""
    _require_same_shape("add", a, b)

    def backward(grad: np.ndarray):
        return grad, grad

    return _result("add", (a, b), a.data + b.data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a - b for identically shaped tensors."""
    _require_same_shape("sub", a, b)

    def backward(grad: np.ndarray):
        return grad, -grad

    return _result("sub", (a, b), a.data - b.data, backward)


def scale(x: Tensor, k: float) -> Tensor:
    """Multiply every element by a constant."""
    out = (x.data * k).astype(x.dtype, copy=False)

    def backward(grad: np.ndarray):
        return ((grad * k).astype(grad.dtype, copy=False),)

    return _result("scale", (x,), out, backward)


# ============================================================
# Reductions
# ============================================================

def mean(x: Tensor) -> Tensor:
    """Mean over all elements, as a scalar tensor."""
    count = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def backward(grad: np.ndarray):
        return (np.full(x.shape, grad / count, dtype=x.dtype),)

    return _result("mean", (x,), out, backward)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """
    Mean absolute difference between a and b, as a scalar tensor.

    The subgradient at ties is 0.

    Raises:
        InvalidArgumentError: On shape mismatch
    """
    _require_same_shape("l1_loss", a, b)
    diff = a.data - b.data
    count = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=diff.dtype)

    def backward(grad: np.ndarray):
        g = (np.sign(diff) * (grad / count)).astype(diff.dtype, copy=False)
        return g, -g

    return _result("l1_loss", (a, b), out, backward)


def backward(loss: Tensor) -> Dict[int, np.ndarray]:
    """
    Gradients of a scalar loss for every node on its tape.

    Raises:
        InvalidArgumentError: If loss is not a scalar produced on a tape
    """
    if loss.tape is None:
        raise InvalidArgumentError("backward: loss is not recorded on a tape")
    return loss.tape.backward(loss)
