"""
Data models for guidederain.

Contains dataclasses for rain pairs, network outputs, loss breakdowns,
training records, metric reports and ablation results.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional
import math

import numpy as np

from .tensor import InvalidArgumentError, Tensor


@dataclass
class RainPair:
    """
    Aligned rainy / clean / streak triple satisfying O = B + R exactly.

    A pair may hold a batch: all three tensors share shape (n, 3, h, w).
    """
    o: Tensor
    b: Tensor
    r: Tensor
    name: str = ""

    def __post_init__(self):
        if not (self.o.shape == self.b.shape == self.r.shape):
            raise InvalidArgumentError(
                f"RainPair shapes differ: o {self.o.shape}, b {self.b.shape}, r {self.r.shape}"
            )

    @property
    def shape(self) -> tuple:
        return self.o.shape

    def max_residual(self) -> float:
        """max |o - b - r|; zero for every pair built by the data module."""
        return float(np.max(np.abs(self.o.data - self.b.data - self.r.data)))


@dataclass
class ModelOutputs:
    """
    Network estimates for one input.

    Outputs the ablation mode does not produce are None.
    """
    final: Tensor
    rain_hat: Optional[Tensor] = None   # R~
    free_hat: Optional[Tensor] = None   # B~
    guide_hat: Optional[Tensor] = None  # B^

    def present(self) -> Dict[str, Tensor]:
        """The outputs that exist, by name."""
        named = {
            "rain_hat": self.rain_hat,
            "free_hat": self.free_hat,
            "guide_hat": self.guide_hat,
            "final": self.final,
        }
        return {k: v for k, v in named.items() if v is not None}


@dataclass
class LossBreakdown:
    """The four loss terms and their weighted total."""
    guide: float
    rain: float
    rain_free: float
    physical: float
    total: float
    active: Dict[str, bool] = field(default_factory=dict)
    total_tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def as_row(self) -> Dict[str, float]:
        return {
            "guide": self.guide,
            "rain": self.rain,
            "rain_free": self.rain_free,
            "physical": self.physical,
            "total": self.total,
        }


@dataclass
class EpochRecord:
    """Mean loss terms over one training epoch."""
    epoch: int
    lr: float
    guide: float
    rain: float
    rain_free: float
    physical: float
    total: float
    batches: int


@dataclass
class TrainingSummary:
    """Outcome of one training run."""
    mode_label: str
    epochs: int
    parameter_count: int
    first_total: float
    final_total: float
    checkpoint_path: str = ""
    log_path: str = ""
    records: List[EpochRecord] = field(default_factory=list)

    def __str__(self) -> str:
        lines = [
            "=" * 60,
            "Training Summary",
            "=" * 60,
            f"Model:                   {self.mode_label}",
            f"Parameters:              {self.parameter_count}",
            f"Epochs:                  {self.epochs}",
            f"First-epoch total loss:  {self.first_total:.6f}",
            f"Final-epoch total loss:  {self.final_total:.6f}",
        ]
        if self.checkpoint_path:
            lines.append(f"Checkpoint:              {self.checkpoint_path}")
        if self.log_path:
            lines.append(f"Loss log:                {self.log_path}")
        lines.append("=" * 60)
        return "\n".join(lines)


def format_psnr(value: float) -> str:
    """PSNR in dB, with identical images rendered as Inf."""
    return "Inf" if math.isinf(value) else f"{value:.4f}"


@dataclass
class ImageMetrics:
    """Quality of one derained image against its ground truth."""
    name: str
    psnr: float
    ssim: float
    physical_residual: Optional[float] = None


@dataclass
class MetricReport:
    """
    Per-image PSNR/SSIM plus dataset means.

    Infinite PSNRs (identical images) are left out of the PSNR mean and
    counted in ``infinite_psnr``; if every image is identical the mean is
    infinite as well.
    """
    rows: List[ImageMetrics] = field(default_factory=list)

    @property
    def infinite_psnr(self) -> int:
        return sum(1 for r in self.rows if math.isinf(r.psnr))

    @property
    def mean_psnr(self) -> float:
        finite = [r.psnr for r in self.rows if not math.isinf(r.psnr)]
        if finite:
            return float(np.mean(finite))
        return math.inf if self.rows else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else math.nan

    @property
    def mean_physical_residual(self) -> Optional[float]:
        values = [r.physical_residual for r in self.rows if r.physical_residual is not None]
        return float(np.mean(values)) if values else None

    def __str__(self) -> str:
        lines = [
            "=" * 60,
            "Evaluation Summary",
            "=" * 60,
            f"Images:                  {len(self.rows)}",
            f"Mean PSNR (dB):          {format_psnr(self.mean_psnr)}",
            f"Mean SSIM:               {self.mean_ssim:.4f}",
        ]
        if self.infinite_psnr:
            lines.append(f"Identical images (Inf):  {self.infinite_psnr} (excluded from PSNR mean)")
        if self.mean_physical_residual is not None:
            lines.append(f"Mean |B~ + R~ - O|:      {self.mean_physical_residual:.6f}")
        lines.append("=" * 60)
        return "\n".join(lines)


@dataclass
class AblationResult:
    """Held-out quality and training loss of one ablation configuration."""
    label: str
    multiscale: bool
    psnr: float
    ssim: float
    final_loss: float
    parameter_count: int
    train_l1: Optional[float] = None  # mean |B^ - B| on the training pairs
