"""
Learnable parameter storage.

A ParamStore is an ordered mapping from dotted names
(``rain.enc0.msrb0.fuse2.weight``) to numpy arrays. Forward passes bind the
store onto a tape; the optimizer updates the arrays in place.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, Mapping, Tuple
import logging

import numpy as np

from .tensor import ConvSpec, InvalidArgumentError, Tape, Tensor


logger = logging.getLogger(__name__)


class ParamStore:
    """Named, ordered collection of learnable arrays."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def __len__(self) -> int:
        return len(self._arrays)

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self._arrays.items())

    def names(self) -> list:
        return list(self._arrays)

    def add(self, name: str, array: np.ndarray) -> None:
        """
        Register a new parameter.

        Raises:
            InvalidArgumentError: If the name is already taken
        """
        if name in self._arrays:
            raise InvalidArgumentError(f"Parameter '{name}' registered twice")
        self._arrays[name] = np.array(array, dtype=self.dtype, order="C", copy=True)

    def set(self, name: str, array: np.ndarray) -> None:
        """Replace an existing parameter's values, keeping its shape."""
        current = self._arrays[name]
        if current.shape != np.shape(array):
            raise InvalidArgumentError(
                f"Parameter '{name}' has shape {current.shape}, got {np.shape(array)}"
            )
        self._arrays[name] = np.array(array, dtype=self.dtype, order="C", copy=True)

    def add_conv(self, prefix: str, spec: ConvSpec, rng: np.random.Generator) -> None:
        """
        Register ``<prefix>.weight`` and ``<prefix>.bias`` for one convolution.

        Weights are drawn from N(0, 2 / fan_in); biases start at zero.
        """
        fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1]
        std = np.sqrt(2.0 / fan_in)
        self.add(f"{prefix}.weight", rng.normal(0.0, std, size=spec.weight_shape))
        self.add(f"{prefix}.bias", np.zeros((1, spec.out_channels, 1, 1)))

    def count(self, prefix: str = "") -> int:
        """Number of scalar parameters, optionally restricted to a name prefix."""
        return int(sum(a.size for n, a in self._arrays.items() if n.startswith(prefix)))

    def zero(self, prefix: str) -> int:
        """
        Set every parameter under a name prefix to zero.

        Returns:
            Number of arrays zeroed
        """
        zeroed = 0
        for name, array in self._arrays.items():
            if name == prefix or name.startswith(prefix + "."):
                array[...] = 0
                zeroed += 1
        if not zeroed:
            raise InvalidArgumentError(f"No parameters under prefix '{prefix}'")
        return zeroed

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store with every array cast to dtype."""
        copy = ParamStore(dtype=dtype)
        for name, array in self._arrays.items():
            copy.add(name, array)
        return copy

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def bind(self, tape: Tape) -> Dict[str, Tensor]:
        """Wrap every parameter as a leaf on the tape."""
        return {name: tape.leaf(array, name=name) for name, array in self._arrays.items()}

    def constants(self) -> Dict[str, Tensor]:
        """Wrap every parameter as an untaped tensor, for inference."""
        return {name: Tensor(array, name=name) for name, array in self._arrays.items()}

    def gradients(
        self,
        tape_grads: Mapping[int, np.ndarray],
        bound: Mapping[str, Tensor],
    ) -> Dict[str, np.ndarray]:
        """
        Collect named gradients after a backward pass.

        Parameters the loss never reached get an all-zero gradient.
        """
        grads: Dict[str, np.ndarray] = {}
        for name, array in self._arrays.items():
            grad = tape_grads.get(bound[name].node_id)
            if grad is None:
                grads[name] = np.zeros_like(array)
            else:
                grads[name] = np.asarray(grad, dtype=self.dtype)
        return grads
