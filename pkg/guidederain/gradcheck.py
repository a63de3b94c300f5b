"""
Finite-difference gradient checking.

Compares tape gradients against central differences on a deterministic
subsample of coordinates. Intended for 64-bit builds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Sequence
import logging

import numpy as np

from .tensor import InvalidArgumentError, Tape, Tensor


logger = logging.getLogger(__name__)

MAX_COORDS_PER_TENSOR = 64
DENOMINATOR_FLOOR = 1e-12


@dataclass
class GradCheckResult:
    """Outcome of a gradient check."""
    max_rel_error: float
    worst_input: str = ""
    worst_index: tuple = ()
    coords_checked: int = 0
    per_input: Dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def sample_coordinates(
    shape: Sequence[int],
    seed: int,
    limit: int = MAX_COORDS_PER_TENSOR,
) -> List[tuple]:
    """
    Up to ``limit`` flat coordinates of an array, chosen by a seeded shuffle.

    Small arrays are checked exhaustively, in index order.
    """
    size = int(np.prod(shape)) if len(shape) else 1
    if size <= limit:
        flat = np.arange(size)
    else:
        flat = np.sort(np.random.default_rng(seed).permutation(size)[:limit])
    return [np.unravel_index(int(i), shape) for i in flat]


def gradient_check(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    h: float = 1e-5,
    seed: int = 0,
    limit: int = MAX_COORDS_PER_TENSOR,
) -> GradCheckResult:
    """
    Maximum relative error between analytic and central-difference gradients.

    For every checked coordinate the error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`` with
    ``numeric = (fn(x + h) - fn(x - h)) / 2h``.

    Args:
        fn: Maps named input tensors to a scalar tensor
        inputs: Named 64-bit arrays to differentiate with respect to
        h: Finite-difference step
        seed: Seed for coordinate subsampling of large inputs
        limit: Maximum coordinates checked per input

    Returns:
        GradCheckResult with the worst error and where it occurred

    Raises:
        InvalidArgumentError: If fn does not return a scalar
    """
    arrays = {name: np.array(a, dtype=np.float64) for name, a in inputs.items()}

    tape = Tape()
    bound = {name: tape.leaf(a, name=name) for name, a in arrays.items()}
    loss = fn(bound)
    if loss.data.ndim != 0:
        raise InvalidArgumentError(f"gradient_check: fn must return a scalar, got shape {loss.shape}")
    tape_grads = tape.backward(loss)

    def evaluate(values: Mapping[str, np.ndarray]) -> float:
        return fn({name: Tensor(a, name=name) for name, a in values.items()}).item()

    result = GradCheckResult(max_rel_error=0.0)
    for k, (name, array) in enumerate(arrays.items()):
        analytic = tape_grads.get(bound[name].node_id)
        if analytic is None:
            analytic = np.zeros_like(array)
        worst = 0.0
        for index in sample_coordinates(array.shape, seed + k, limit):
            original = array[index]
            array[index] = original + h
            plus = evaluate(arrays)
            array[index] = original - h
            minus = evaluate(arrays)
            array[index] = original

            numeric = (plus - minus) / (2.0 * h)
            exact = float(analytic[index])
            denom = max(abs(exact), abs(numeric), DENOMINATOR_FLOOR)
            error = abs(exact - numeric) / denom
            result.coords_checked += 1
            worst = max(worst, error)
            if error > result.max_rel_error:
                result.max_rel_error = error
                result.worst_input = name
                result.worst_index = tuple(int(i) for i in index)
        result.per_input[name] = worst

    logger.debug(
        f"Gradient check: {result.coords_checked} coords, "
        f"max rel err {result.max_rel_error:.3e} at {result.worst_input}{list(result.worst_index)}"
    )
    return result
