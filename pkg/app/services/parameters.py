"""
parameters.py
Named parameter table shared by estimators, flow layers and the optimizer.

Parameters are plain float64 arrays tagged with a ledger category; buffers are
derived constants (cached additive biases) that are saved with a checkpoint but
never trained or counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from app.errors import ContractError, TopologyError
from app.services.tensor_core import Tensor

CATEGORIES = ("trunk", "head", "embedding", "injection", "flow_layer")


@dataclass
class ParameterStore:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    categories: dict[str, str] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, array: np.ndarray, category: str) -> None:
        if category not in CATEGORIES:
            raise ContractError(f"unknown parameter category {category!r}")
        if name in self.arrays:
            raise ContractError(f"parameter {name!r} registered twice")
        self.arrays[name] = np.array(array, dtype=np.float64)
        self.categories[name] = category

    def remove(self, name: str) -> None:
        del self.arrays[name]
        del self.categories[name]

    def add_buffer(self, name: str, array: np.ndarray) -> None:
        self.buffers[name] = np.array(array, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self.arrays or name in self.buffers

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def leaves(self, grad_enabled: bool = False) -> dict[str, Tensor]:
        """Tensor views of every parameter and buffer, keyed by name."""
        out = {name: Tensor(arr, grad_enabled=grad_enabled) for name, arr in self.arrays.items()}
        out.update({name: Tensor(arr) for name, arr in self.buffers.items()})
        return out

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            arrays={k: v.copy() for k, v in self.arrays.items()},
            categories=dict(self.categories),
            buffers={k: v.copy() for k, v in self.buffers.items()},
        )

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "ParameterStore":
        self.check_compatible(arrays)
        out = self.copy()
        for name, arr in arrays.items():
            out.arrays[name] = np.array(arr, dtype=np.float64)
        return out

    def check_compatible(self, arrays: Mapping[str, np.ndarray]) -> None:
        if set(arrays) != set(self.arrays):
            missing = sorted(set(self.arrays) - set(arrays))
            extra = sorted(set(arrays) - set(self.arrays))
            raise TopologyError(f"parameter tables differ: missing={missing[:5]} extra={extra[:5]}")
        for name, arr in arrays.items():
            if np.shape(arr) != self.arrays[name].shape:
                raise TopologyError(
                    f"parameter {name!r} has shape {np.shape(arr)}, expected {self.arrays[name].shape}"
                )

    def count(self, category: str | None = None) -> int:
        return int(
            sum(
                arr.size
                for name, arr in self.arrays.items()
                if category is None or self.categories[name] == category
            )
        )
