"""Partitioned parameter vectors ``theta = (a, b_1, ..., b_p)``."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ParamLayout:
    """Index map of a flat parameter vector.

    The ``d`` fixed effects come first, followed by ``p`` spline-coefficient
    blocks in order.
    """

    fixed_names: tuple[str, ...]
    block_names: tuple[str, ...] = ()
    block_sizes: tuple[int, ...] = ()

    @property
    def d(self) -> int:
        return len(self.fixed_names)

    @property
    def p(self) -> int:
        return len(self.block_sizes)

    @property
    def size(self) -> int:
        return self.d + sum(self.block_sizes)

    @property
    def block_slices(self) -> list[slice]:
        out, start = [], self.d
        for k in self.block_sizes:
            out.append(slice(start, start + k))
            start += k
        return out

    def names(self) -> list[str]:
        out = list(self.fixed_names)
        for name, k in zip(self.block_names, self.block_sizes):
            out.extend(f"{name}.{j + 1}" for j in range(k))
        return out

    def index(self, name: str) -> int:
        return self.fixed_names.index(name)


@dataclass
class ParamVector:
    values: np.ndarray
    layout: ParamLayout = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.layout.size,):
            raise ValueError(
                f"parameter vector has shape {self.values.shape}, layout expects ({self.layout.size},)"
            )

    @property
    def a(self) -> np.ndarray:
        return self.values[: self.layout.d]

    @property
    def b(self) -> list[np.ndarray]:
        return [self.values[s] for s in self.layout.block_slices]

    def block(self, i: int) -> np.ndarray:
        return self.values[self.layout.block_slices[i]]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)
