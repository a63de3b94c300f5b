"""
Building blocks shared by the deraining sub-networks.

- Multi-Scale Residual Block (MSRB): pool the features at several scales,
  upsample back, concatenate, fuse with H and add the input.
- Plain residual block: the same H applied to the raw input (single scale).
- Multi-stream dilated convolution head used by the guide-learning network.

All forwards are pure functions of the input and a mapping of bound
parameters, so different blocks may be evaluated on different threads.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Mapping, Tuple
import logging

import numpy as np

from .params import ParamStore
from .tensor import (
    ConvSpec,
    InvalidArgumentError,
    Tensor,
    add,
    avg_pool,
    concat_channels,
    conv2d,
    leaky_relu,
    max_pool,
    upsample_nearest,
)


logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
POOLING_KINDS = ("avg", "max")


def conv_forward(x: Tensor, params: Mapping[str, Tensor], prefix: str, spec: ConvSpec) -> Tensor:
    """Apply the convolution registered under ``prefix``."""
    return conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], spec)


@dataclass(frozen=True)
class MsrbConfig:
    """Shape of one multi-scale residual block."""
    channels: int
    scales: Tuple[int, ...] = (1, 2, 4)
    pooling: str = "avg"

    def __post_init__(self):
        if self.channels <= 0:
            raise InvalidArgumentError(f"MSRB channels must be positive, got {self.channels}")
        if not self.scales:
            raise InvalidArgumentError("MSRB needs at least one scale")
        if any(s <= 0 for s in self.scales) or len(set(self.scales)) != len(self.scales):
            raise InvalidArgumentError(
                f"MSRB scales must be distinct positive integers, got {list(self.scales)}"
            )
        if self.pooling not in POOLING_KINDS:
            raise InvalidArgumentError(
                f"MSRB pooling must be one of {list(POOLING_KINDS)}, got {self.pooling!r}"
            )
        # concatenation follows ascending scale order
        object.__setattr__(self, "scales", tuple(sorted(self.scales)))

    @property
    def max_scale(self) -> int:
        return max(self.scales)

    def fuse_specs(self, multiscale: bool = True) -> List[ConvSpec]:
        """H: two 3x3 convolutions then one 1x1 back to ``channels``."""
        width = self.channels * (len(self.scales) if multiscale else 1)
        return [
            ConvSpec.same(width, self.channels, 3),
            ConvSpec.same(self.channels, self.channels, 3),
            ConvSpec.same(self.channels, self.channels, 1),
        ]


@dataclass(frozen=True)
class DilatedStreamsConfig:
    """Parallel dilated 3x3 streams fused by a 1x1 convolution."""
    in_channels: int
    stream_channels: int
    out_channels: int
    dilations: Tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        if min(self.in_channels, self.stream_channels, self.out_channels) <= 0:
            raise InvalidArgumentError(
                f"Dilated streams need positive channel counts, got "
                f"{self.in_channels}/{self.stream_channels}/{self.out_channels}"
            )
        if not self.dilations:
            raise InvalidArgumentError("Dilated streams need at least one stream")
        if any(d <= 0 for d in self.dilations) or len(set(self.dilations)) != len(self.dilations):
            raise InvalidArgumentError(
                f"Stream dilations must be distinct positive integers, got {list(self.dilations)}"
            )

    @property
    def streams(self) -> List[Tuple[int, ConvSpec]]:
        return [
            (d, ConvSpec.same(self.in_channels, self.stream_channels, 3, dilation=d))
            for d in self.dilations
        ]

    @property
    def fusion(self) -> ConvSpec:
        return ConvSpec.same(self.stream_channels * len(self.dilations), self.out_channels, 1)


# ============================================================
# Initialization
# ============================================================

def init_msrb(
    store: ParamStore,
    rng: np.random.Generator,
    prefix: str,
    config: MsrbConfig,
    multiscale: bool = True,
) -> None:
    """Register the three fuse convolutions of one block under ``prefix``."""
    for i, spec in enumerate(config.fuse_specs(multiscale)):
        store.add_conv(f"{prefix}.fuse{i}", spec, rng)


def init_dilated_streams(
    store: ParamStore,
    rng: np.random.Generator,
    prefix: str,
    config: DilatedStreamsConfig,
) -> None:
    """Register every stream convolution and the fusion convolution."""
    for d, spec in config.streams:
        store.add_conv(f"{prefix}.stream_d{d}", spec, rng)
    store.add_conv(f"{prefix}.fusion", config.fusion, rng)


# ============================================================
# Forward passes
# ============================================================

def _fuse(h: Tensor, params: Mapping[str, Tensor], prefix: str, specs: List[ConvSpec]) -> Tensor:
    h = leaky_relu(conv_forward(h, params, f"{prefix}.fuse0", specs[0]), LEAKY_SLOPE)
    h = leaky_relu(conv_forward(h, params, f"{prefix}.fuse1", specs[1]), LEAKY_SLOPE)
    # no activation on the last conv so the residual branch can go negative
    return conv_forward(h, params, f"{prefix}.fuse2", specs[2])


def _check_channels(op: str, x: Tensor, channels: int) -> None:
    if x.data.ndim != 4 or x.shape[1] != channels:
        raise InvalidArgumentError(
            f"{op}: input shape {x.shape} does not have {channels} channels"
        )


def msrb_forward(
    x: Tensor,
    params: Mapping[str, Tensor],
    config: MsrbConfig,
    prefix: str = "msrb",
) -> Tensor:
    """
    z = H(Cat[Up_1(Pool_1(x)), Up_2(Pool_2(x)), Up_4(Pool_4(x))]) + x.

    Args:
        x: Features of shape (n, channels, h, w)
        params: Bound parameters containing ``<prefix>.fuse{0,1,2}``
        config: Block shape
        prefix: Parameter name prefix

    Returns:
        Tensor with the same shape as x

    Raises:
        InvalidArgumentError: On channel mismatch or indivisible spatial size
    """
    _check_channels("msrb_forward", x, config.channels)
    _, _, h, w = x.shape
    k = config.max_scale
    if h % k or w % k:
        raise InvalidArgumentError(
            f"msrb_forward: spatial size {h}x{w} of shape {x.shape} is not divisible by {k}"
        )

    pool = avg_pool if config.pooling == "avg" else max_pool
    branches = [upsample_nearest(pool(x, s), s) for s in config.scales]
    fused = _fuse(concat_channels(branches), params, prefix, config.fuse_specs(True))
    return add(fused, x)


def plain_residual_forward(
    x: Tensor,
    params: Mapping[str, Tensor],
    config: MsrbConfig,
    prefix: str = "msrb",
) -> Tensor:
    """
    z = H(x) + x: the block without its multi-scale branch.

    Raises:
        InvalidArgumentError: On channel mismatch
    """
    _check_channels("plain_residual_forward", x, config.channels)
    fused = _fuse(x, params, prefix, config.fuse_specs(False))
    return add(fused, x)


def dilated_streams_forward(
    x: Tensor,
    params: Mapping[str, Tensor],
    config: DilatedStreamsConfig,
    prefix: str = "streams",
) -> Tensor:
    """
    Run each dilated stream (conv + leaky ReLU) on x, concatenate, fuse by 1x1.

    Raises:
        InvalidArgumentError: On channel mismatch
    """
    _check_channels("dilated_streams_forward", x, config.in_channels)
    outputs = [
        leaky_relu(conv_forward(x, params, f"{prefix}.stream_d{d}", spec), LEAKY_SLOPE)
        for d, spec in config.streams
    ]
    return conv_forward(concat_channels(outputs), params, f"{prefix}.fusion", config.fusion)
