"""
The physical-model guided deraining network.

Three sub-networks:

- rain streaks network: encoder-decoder estimating R~ from O
- rain-free network: the same encoder-decoder estimating B~ from O
- guide-learning network: refines the estimates into the final B^

Ablation topologies M1-M4 switch sub-networks on and off; R1 swaps the
guide head's dilated streams for a single plain stream, R2 drops the
physical loss term (see loss.py).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple
import logging

import numpy as np

from .blocks import (
    LEAKY_SLOPE,
    DilatedStreamsConfig,
    MsrbConfig,
    conv_forward,
    dilated_streams_forward,
    init_dilated_streams,
    init_msrb,
    msrb_forward,
    plain_residual_forward,
)
from .models import ModelOutputs
from .params import ParamStore
from .tensor import (
    ConvSpec,
    InvalidArgumentError,
    Tensor,
    concat_channels,
    leaky_relu,
    sub,
    upsample_nearest,
)


logger = logging.getLogger(__name__)

IMAGE_CHANNELS = 3
TOPOLOGIES = ("m1", "m2", "m3", "m4")


class ContractError(RuntimeError):
    """Raised when a sub-network that the ablation mode removes is invoked."""
    pass


@dataclass(frozen=True)
class AblationMode:
    """
    Which sub-networks and loss terms are active.

    topology:
        m1 - rain streaks network only, final = O - R~
        m2 - rain-free network only, final = B~
        m3 - rain-free network feeding the guide network
        m4 - both estimates concatenated into the guide network (default)
    """
    topology: str = "m4"
    no_dilated_streams: bool = False
    no_physical_loss: bool = False

    def __post_init__(self):
        topology = self.topology.lower()
        if topology not in TOPOLOGIES:
            raise InvalidArgumentError(
                f"Ablation topology must be one of {list(TOPOLOGIES)}, got {self.topology!r}"
            )
        object.__setattr__(self, "topology", topology)

    @property
    def has_rain_net(self) -> bool:
        return self.topology in ("m1", "m4")

    @property
    def has_free_net(self) -> bool:
        return self.topology in ("m2", "m3", "m4")

    @property
    def has_guide(self) -> bool:
        return self.topology in ("m3", "m4")

    @property
    def guide_in_channels(self) -> int:
        if not self.has_guide:
            raise ContractError(f"Mode {self.label} has no guide-learning network")
        return 2 * IMAGE_CHANNELS if self.topology == "m4" else IMAGE_CHANNELS

    @property
    def label(self) -> str:
        """M4 for the published model; R1/R2 for its component ablations."""
        if self.topology == "m4" and self.no_dilated_streams and not self.no_physical_loss:
            return "R1"
        if self.topology == "m4" and self.no_physical_loss and not self.no_dilated_streams:
            return "R2"
        flags = [
            name for name, on in (
                ("no-dilated-streams", self.no_dilated_streams),
                ("no-physical-loss", self.no_physical_loss),
            ) if on
        ]
        return "+".join([self.topology.upper()] + flags)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the full network."""
    base_channels: int = 32
    encoder_depth: int = 3
    msrb_per_level: int = 1
    use_multiscale: bool = True
    scales: Tuple[int, ...] = (1, 2, 4)
    pooling: str = "avg"
    guide_dilations: Tuple[int, ...] = (1, 2, 4)
    ablation: AblationMode = field(default_factory=AblationMode)

    def __post_init__(self):
        if self.base_channels <= 0:
            raise InvalidArgumentError(f"base_channels must be positive, got {self.base_channels}")
        if self.encoder_depth < 1:
            raise InvalidArgumentError(f"encoder_depth must be >= 1, got {self.encoder_depth}")
        if self.msrb_per_level < 1:
            raise InvalidArgumentError(f"msrb_per_level must be >= 1, got {self.msrb_per_level}")
        object.__setattr__(self, "scales", tuple(self.scales))
        object.__setattr__(self, "guide_dilations", tuple(self.guide_dilations))
        # validates scales and pooling
        MsrbConfig(self.base_channels, self.scales, self.pooling)

    @property
    def spatial_multiple(self) -> int:
        """Height and width must be multiples of this after padding."""
        scale = max(self.scales) if self.use_multiscale else 1
        return (2 ** (self.encoder_depth - 1)) * scale

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["scales"] = list(self.scales)
        data["guide_dilations"] = list(self.guide_dilations)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        values = dict(data)
        values["ablation"] = AblationMode(**values.get("ablation", {}))
        values["scales"] = tuple(values.get("scales", (1, 2, 4)))
        values["guide_dilations"] = tuple(values.get("guide_dilations", (1, 2, 4)))
        return cls(**values)


@dataclass(frozen=True)
class CropRecord:
    """Original spatial size of a padded image."""
    height: int
    width: int


def pad_to_valid(o: Tensor, multiple: int) -> Tuple[Tensor, CropRecord]:
    """
    Reflect-pad the bottom and right edges up to the next valid size.

    Args:
        o: Image tensor (n, c, h, w)
        multiple: Required divisor of height and width

    Returns:
        (padded tensor, record for crop_back)
    """
    _, _, h, w = o.shape
    pad_h = -h % multiple
    pad_w = -w % multiple
    record = CropRecord(height=h, width=w)
    if not pad_h and not pad_w:
        return o, record
    padded = np.pad(o.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
    return Tensor(padded), record


def crop_back(x: Tensor, record: CropRecord) -> Tensor:
    """Undo pad_to_valid."""
    if x.shape[2:] == (record.height, record.width):
        return x
    return Tensor(x.data[:, :, :record.height, :record.width])


class DerainNetwork:
    """
    The three-sub-network deraining model for one ModelConfig.

    Parameters live in a ParamStore created by ``init_params``; forward
    methods take a mapping of bound parameter tensors so the same network
    runs on a tape (training) or on plain tensors (inference).
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.mode = config.ablation

    # --------------------------------------------------------
    # Layer geometry
    # --------------------------------------------------------

    def _level_channels(self, level: int) -> int:
        return self.config.base_channels * (2 ** level)

    def _msrb_config(self, channels: int) -> MsrbConfig:
        return MsrbConfig(channels, self.config.scales, self.config.pooling)

    def _guide_streams(self) -> DilatedStreamsConfig:
        c = self.config.base_channels
        dilations = (1,) if self.mode.no_dilated_streams else self.config.guide_dilations
        return DilatedStreamsConfig(c, c, c, dilations)

    def _down_spec(self, level: int) -> ConvSpec:
        c = self._level_channels(level)
        return ConvSpec(c, 2 * c, kernel=(3, 3), stride=2, padding=(1, 1, 1, 1))

    # --------------------------------------------------------
    # Parameters
    # --------------------------------------------------------

    def init_params(self, seed: int, dtype=np.float32) -> ParamStore:
        """
        Deterministically initialize every parameter of the active sub-networks.

        Args:
            seed: Seed for the He-normal weight draws
            dtype: Storage dtype (float64 for gradient checks)
        """
        rng = np.random.default_rng(seed)
        store = ParamStore(dtype=dtype)
        if self.mode.has_rain_net:
            self._init_subnet(store, rng, "rain")
        if self.mode.has_free_net:
            self._init_subnet(store, rng, "free")
        if self.mode.has_guide:
            self._init_guide(store, rng)
        logger.debug(f"Initialized {len(store)} arrays ({store.count()} parameters) for {self.mode.label}")
        return store

    def _init_block(self, store: ParamStore, rng: np.random.Generator, prefix: str, channels: int) -> None:
        init_msrb(store, rng, prefix, self._msrb_config(channels), multiscale=self.config.use_multiscale)

    def _init_subnet(self, store: ParamStore, rng: np.random.Generator, prefix: str) -> None:
        cfg = self.config
        store.add_conv(f"{prefix}.head", ConvSpec.same(IMAGE_CHANNELS, cfg.base_channels, 3), rng)
        for level in range(cfg.encoder_depth):
            c = self._level_channels(level)
            for m in range(cfg.msrb_per_level):
                self._init_block(store, rng, f"{prefix}.enc{level}.msrb{m}", c)
            if level < cfg.encoder_depth - 1:
                store.add_conv(f"{prefix}.enc{level}.down", self._down_spec(level), rng)
        for level in reversed(range(cfg.encoder_depth - 1)):
            c = self._level_channels(level)
            store.add_conv(f"{prefix}.dec{level}.up", ConvSpec.same(2 * c, c, 3), rng)
            store.add_conv(f"{prefix}.dec{level}.merge", ConvSpec.same(2 * c, c, 1), rng)
            for m in range(cfg.msrb_per_level):
                self._init_block(store, rng, f"{prefix}.dec{level}.msrb{m}", c)
        store.add_conv(f"{prefix}.tail", ConvSpec.same(cfg.base_channels, IMAGE_CHANNELS, 1), rng)

    def _init_guide(self, store: ParamStore, rng: np.random.Generator) -> None:
        c = self.config.base_channels
        store.add_conv("guide.head", ConvSpec.same(self.mode.guide_in_channels, c, 3), rng)
        init_dilated_streams(store, rng, "guide.streams", self._guide_streams())
        self._init_block(store, rng, "guide.msrb0", c)
        store.add_conv("guide.tail", ConvSpec.same(c, IMAGE_CHANNELS, 3), rng)

    def parameter_count(self) -> int:
        """Scalar parameter count of the active sub-networks."""
        return self.init_params(seed=0).count()

    # --------------------------------------------------------
    # Forward passes
    # --------------------------------------------------------

    def _block(self, x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
        config = self._msrb_config(x.shape[1])
        if self.config.use_multiscale:
            return msrb_forward(x, params, config, prefix)
        return plain_residual_forward(x, params, config, prefix)

    def _check_image(self, op: str, o: Tensor) -> None:
        if o.data.ndim != 4 or o.shape[1] != IMAGE_CHANNELS:
            raise InvalidArgumentError(
                f"{op}: expected an image tensor (n, {IMAGE_CHANNELS}, h, w), got shape {o.shape}"
            )
        multiple = self.config.spatial_multiple
        if o.shape[2] % multiple or o.shape[3] % multiple:
            raise InvalidArgumentError(
                f"{op}: spatial size {o.shape[2]}x{o.shape[3]} is not a multiple of {multiple}; "
                f"pad with pad_to_valid first"
            )

    def subnet_forward(self, o: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
        """
        Encoder-decoder shared by the rain streaks and rain-free networks.

        Encoder levels run MSRB(s) then a stride-2 conv doubling channels;
        decoder levels upsample, halve channels, concatenate the matching
        encoder skip, merge by 1x1 and run MSRB(s). A linear 1x1 conv maps
        back to three channels.

        Args:
            o: Rainy image (n, 3, h, w)
            params: Bound parameters
            prefix: ``rain`` or ``free``

        Returns:
            Tensor of shape (n, 3, h, w)
        """
        self._check_image("subnet_forward", o)
        cfg = self.config
        x = leaky_relu(
            conv_forward(o, params, f"{prefix}.head", ConvSpec.same(IMAGE_CHANNELS, cfg.base_channels, 3)),
            LEAKY_SLOPE,
        )
        skips: List[Tensor] = []
        for level in range(cfg.encoder_depth):
            for m in range(cfg.msrb_per_level):
                x = self._block(x, params, f"{prefix}.enc{level}.msrb{m}")
            if level < cfg.encoder_depth - 1:
                skips.append(x)
                x = leaky_relu(
                    conv_forward(x, params, f"{prefix}.enc{level}.down", self._down_spec(level)),
                    LEAKY_SLOPE,
                )
        for level in reversed(range(cfg.encoder_depth - 1)):
            c = self._level_channels(level)
            x = upsample_nearest(x, 2)
            x = leaky_relu(conv_forward(x, params, f"{prefix}.dec{level}.up", ConvSpec.same(2 * c, c, 3)), LEAKY_SLOPE)
            x = concat_channels([x, skips[level]])
            x = leaky_relu(conv_forward(x, params, f"{prefix}.dec{level}.merge", ConvSpec.same(2 * c, c, 1)), LEAKY_SLOPE)
            for m in range(cfg.msrb_per_level):
                x = self._block(x, params, f"{prefix}.dec{level}.msrb{m}")
        return conv_forward(x, params, f"{prefix}.tail", ConvSpec.same(cfg.base_channels, IMAGE_CHANNELS, 1))

    def guide_input(self, rain_hat: Optional[Tensor], free_hat: Tensor) -> Tensor:
        """Concatenated estimates under M4; the rain-free estimate alone under M3."""
        if not self.mode.has_guide:
            raise ContractError(f"Mode {self.mode.label} has no guide-learning network")
        if self.mode.topology == "m3":
            return free_hat
        if rain_hat is None:
            raise ContractError("Mode M4 guide input needs the rain streaks estimate")
        return concat_channels([rain_hat, free_hat])

    def guide_forward(
        self,
        rain_hat: Optional[Tensor],
        free_hat: Tensor,
        params: Mapping[str, Tensor],
    ) -> Tensor:
        """
        Refine the sub-network estimates into B^.

        Raises:
            ContractError: If the mode has no guide network
            InvalidArgumentError: If the estimates disagree in shape
        """
        if rain_hat is not None and rain_hat.shape != free_hat.shape:
            raise InvalidArgumentError(
                f"guide_forward: shape mismatch {rain_hat.shape} vs {free_hat.shape}"
            )
        x = self.guide_input(rain_hat, free_hat)
        c = self.config.base_channels
        x = leaky_relu(
            conv_forward(x, params, "guide.head", ConvSpec.same(self.mode.guide_in_channels, c, 3)),
            LEAKY_SLOPE,
        )
        x = dilated_streams_forward(x, params, self._guide_streams(), "guide.streams")
        x = self._block(x, params, "guide.msrb0")
        return conv_forward(x, params, "guide.tail", ConvSpec.same(c, IMAGE_CHANNELS, 3))

    def forward(self, o: Tensor, params: Mapping[str, Tensor]) -> ModelOutputs:
        """
        Run the sub-networks the ablation mode enables.

        Outputs the mode does not produce are None.

        Raises:
            InvalidArgumentError: If o is not a validly sized image tensor
        """
        self._check_image("forward", o)
        rain_hat = self.subnet_forward(o, params, "rain") if self.mode.has_rain_net else None
        free_hat = self.subnet_forward(o, params, "free") if self.mode.has_free_net else None

        if self.mode.topology == "m1":
            return ModelOutputs(rain_hat=rain_hat, final=sub(o, rain_hat))
        if self.mode.topology == "m2":
            return ModelOutputs(free_hat=free_hat, final=free_hat)
        guide_hat = self.guide_forward(rain_hat, free_hat, params)
        return ModelOutputs(rain_hat=rain_hat, free_hat=free_hat, guide_hat=guide_hat, final=guide_hat)

    def infer(self, o: Tensor, params: ParamStore) -> ModelOutputs:
        """Pad, run without a tape and crop every output back to the input size."""
        padded, record = pad_to_valid(o, self.config.spatial_multiple)
        outputs = self.forward(padded, params.constants())
        return ModelOutputs(
            rain_hat=crop_back(outputs.rain_hat, record) if outputs.rain_hat is not None else None,
            free_hat=crop_back(outputs.free_hat, record) if outputs.free_hat is not None else None,
            guide_hat=crop_back(outputs.guide_hat, record) if outputs.guide_hat is not None else None,
            final=crop_back(outputs.final, record),
        )


def model_forward(o: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> ModelOutputs:
    """Functional form of DerainNetwork(config).forward(o, params)."""
    return DerainNetwork(config).forward(o, params)
