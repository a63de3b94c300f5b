"""
ADAM optimizer and the step-decay learning-rate schedule.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple
import logging

import numpy as np

from .params import ParamStore
from .tensor import InvalidArgumentError


logger = logging.getLogger(__name__)


class OptimizerError(ValueError):
    """Raised when a gradient is not finite."""
    pass


@dataclass
class AdamState:
    """Per-parameter moments and the shared step counter."""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamStore, **hyper) -> "AdamState":
        """Fresh state with zero moments shaped like every parameter."""
        state = cls(**hyper)
        for name, array in params.items():
            state.m[name] = np.zeros_like(array)
            state.v[name] = np.zeros_like(array)
        return state


def adam_step(
    params: ParamStore,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> Tuple[ParamStore, AdamState]:
    """
    One bias-corrected ADAM update, applied in place.

        m <- b1 m + (1 - b1) g
        v <- b2 v + (1 - b2) g^2
        p <- p - lr * m_hat / (sqrt(v_hat) + eps)

    All gradients are validated before any parameter changes.

    Args:
        params: Parameters to update
        grads: Gradient per parameter name
        state: Moments and step counter (missing moments start at zero)
        lr: Learning rate for this step

    Returns:
        (params, state), both updated in place

    Raises:
        OptimizerError: If a gradient contains NaN or Inf
        InvalidArgumentError: If gradients or moments do not match the parameters
    """
    for name, array in params.items():
        if name not in grads:
            raise InvalidArgumentError(f"adam_step: no gradient for parameter '{name}'")
        grad = grads[name]
        if np.shape(grad) != array.shape:
            raise InvalidArgumentError(
                f"adam_step: gradient for '{name}' has shape {np.shape(grad)}, parameter has {array.shape}"
            )
        if not np.all(np.isfinite(grad)):
            raise OptimizerError(f"adam_step: non-finite gradient for parameter '{name}'")
        for moments in (state.m, state.v):
            if name in moments and moments[name].shape != array.shape:
                raise InvalidArgumentError(
                    f"adam_step: optimizer state for '{name}' has shape {moments[name].shape}, "
                    f"parameter has {array.shape}"
                )

    state.t += 1
    bias1 = 1.0 - state.beta1 ** state.t
    bias2 = 1.0 - state.beta2 ** state.t
    for name, array in params.items():
        g = np.asarray(grads[name], dtype=array.dtype)
        m = state.m.setdefault(name, np.zeros_like(array))
        v = state.v.setdefault(name, np.zeros_like(array))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        array -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(array.dtype, copy=False)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant learning rate, divided by 1/factor at each milestone."""
    initial: float = 5e-4
    milestones: Tuple[int, ...] = (1200, 1600)
    factor: float = 0.1
    total_epochs: int = 2000

    def __post_init__(self):
        if self.initial <= 0 or not 0 < self.factor <= 1:
            raise InvalidArgumentError(
                f"LrSchedule needs initial > 0 and 0 < factor <= 1, got {self.initial}, {self.factor}"
            )
        if self.total_epochs <= 0:
            raise InvalidArgumentError(f"LrSchedule total_epochs must be positive, got {self.total_epochs}")
        object.__setattr__(self, "milestones", tuple(sorted(self.milestones)))

    def scaled(self, factor: float) -> "LrSchedule":
        """Milestones and total epochs multiplied by factor (desk scale uses 0.1)."""
        return LrSchedule(
            initial=self.initial,
            milestones=tuple(max(1, int(round(m * factor))) for m in self.milestones),
            factor=self.factor,
            total_epochs=max(1, int(round(self.total_epochs * factor))),
        )

    def stretched_to(self, total_epochs: int) -> "LrSchedule":
        """Same decay positions, as fractions of the run, over a new epoch count."""
        return self.scaled(total_epochs / self.total_epochs)


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """
    Learning rate in effect during an epoch.

    Raises:
        InvalidArgumentError: If epoch is outside [0, total_epochs)
    """
    if not 0 <= epoch < schedule.total_epochs:
        raise InvalidArgumentError(
            f"lr_at: epoch {epoch} outside [0, {schedule.total_epochs})"
        )
    decays = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.initial * schedule.factor ** decays
