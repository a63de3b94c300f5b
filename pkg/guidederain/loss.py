"""
Loss terms for training the deraining network.

    L = L_guide + alpha * L_rain + beta * L_rain-free + gamma * L_p

Every term is a mean L1 distance. L_p ties the two sub-network estimates
to the observation through O = B + R.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple
import logging

import numpy as np

from .models import LossBreakdown, ModelOutputs, RainPair
from .network import AblationMode
from .tensor import InvalidArgumentError, Tensor, add, l1_loss, scale


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the auxiliary terms; gamma = 0 disables the physical constraint."""
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.001

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            value = getattr(self, name)
            if value < 0 or not np.isfinite(value):
                raise InvalidArgumentError(f"Loss weight {name} must be finite and nonnegative, got {value}")

    def combine(self, guide: float, rain: float, rain_free: float, physical: float) -> float:
        """Weighted total of already-computed term values."""
        return guide + self.alpha * rain + self.beta * rain_free + self.gamma * physical

    def for_mode(self, mode: AblationMode) -> "LossWeights":
        """Weights in effect under an ablation mode (R2 zeroes gamma)."""
        if mode.no_physical_loss:
            return LossWeights(self.alpha, self.beta, 0.0)
        return self


def _check_target(name: str, estimate: Tensor, target: Tensor) -> None:
    if estimate.shape != target.shape:
        raise InvalidArgumentError(
            f"compute_losses: {name} shape {estimate.shape} does not match target shape {target.shape}"
        )


def compute_losses(
    outputs: ModelOutputs,
    pair: RainPair,
    weights: LossWeights,
    mode: AblationMode,
) -> LossBreakdown:
    """
    Evaluate every loss term whose estimate exists under the mode.

    A term is active iff its predicted quantity exists: rain needs R~,
    rain_free needs B~, guide needs B^, physical needs both R~ and B~.
    Inactive terms report 0.

    Args:
        outputs: Network outputs (taped during training)
        pair: Ground-truth triple
        weights: Term weights (0.5, 0.5, 0.001 by default)
        mode: Active ablation mode

    Returns:
        LossBreakdown whose ``total_tensor`` can be passed to backward

    Raises:
        InvalidArgumentError: On shape mismatch between estimates and targets
    """
    effective = weights.for_mode(mode)
    values: Dict[str, float] = {"guide": 0.0, "rain": 0.0, "rain_free": 0.0, "physical": 0.0}
    active: Dict[str, bool] = {k: False for k in values}
    weighted: List[Tensor] = []

    terms: List[Tuple[str, Optional[Tensor], Tensor, float]] = [
        ("guide", outputs.guide_hat, pair.b, 1.0),
        ("rain", outputs.rain_hat, pair.r, effective.alpha),
        ("rain_free", outputs.free_hat, pair.b, effective.beta),
    ]
    for name, estimate, target, weight in terms:
        if estimate is None:
            continue
        _check_target(name, estimate, target)
        term = l1_loss(estimate, target)
        values[name] = term.item()
        active[name] = True
        if weight:
            weighted.append(term if weight == 1.0 else scale(term, weight))

    if outputs.rain_hat is not None and outputs.free_hat is not None:
        _check_target("physical", outputs.free_hat, pair.o)
        term = l1_loss(add(outputs.free_hat, outputs.rain_hat), pair.o)
        values["physical"] = term.item()
        active["physical"] = True
        if effective.gamma:
            weighted.append(scale(term, effective.gamma))

    if not weighted:
        # every active term carries zero weight
        weighted.append(scale(l1_loss(outputs.final, pair.b), 0.0))
    total_tensor = weighted[0]
    for term in weighted[1:]:
        total_tensor = add(total_tensor, term)

    return LossBreakdown(
        guide=values["guide"],
        rain=values["rain"],
        rain_free=values["rain_free"],
        physical=values["physical"],
        total=effective.combine(values["guide"], values["rain"], values["rain_free"], values["physical"]),
        active=active,
        total_tensor=total_tensor,
    )


def physical_residual_map(free_hat: Tensor, rain_hat: Tensor, o: Tensor) -> Tensor:
    """
    |B~ + R~ - O| per pixel, for inspection; not recorded on any tape.

    Raises:
        InvalidArgumentError: On shape mismatch
    """
    if not (free_hat.shape == rain_hat.shape == o.shape):
        raise InvalidArgumentError(
            f"physical_residual_map: shape mismatch {free_hat.shape}, {rain_hat.shape}, {o.shape}"
        )
    return Tensor(np.abs(free_hat.data + rain_hat.data - o.data))
