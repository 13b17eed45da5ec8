from __future__ import annotations
from typing import Any, Optional, Tuple

import dataclasses
import numpy as np

from loopymp import autodiff as ad

__all__ = ["BeliefSet", "PROBABILITY_FLOOR"]

PROBABILITY_FLOOR = 1e-12


@dataclasses.dataclass(frozen=True)
class BeliefSet:
    """Single and pairwise beliefs stored in the log domain.

    Index 0 of every belief axis stands for x = +1, index 1 for x = -1.
    Values may be tape variables while a gradient is being recorded.

    Attributes
    ----------
    log_singles : array or Variable
        Shape (..., N, 2).
    log_pairs : array or Variable
        Shape (..., E, 2, 2); ``log_pairs[..., e, i, j]`` is log b_nm(x_n=i, x_m=j).
    edges : numpy.ndarray
        Endpoints (n, m) of each pair table, shape (E, 2).
    """

    log_singles: Any
    log_pairs: Any
    edges: np.ndarray

    @property
    def singles(self) -> np.ndarray:
        return np.exp(ad.value(self.log_singles))

    @property
    def pairs(self) -> np.ndarray:
        return np.exp(ad.value(self.log_pairs))

    @property
    def llrs(self) -> np.ndarray:
        ls = ad.value(self.log_singles)
        return ls[..., 0] - ls[..., 1]

    @property
    def batch_shape(self) -> Tuple[int, ...]:
        return ad.value(self.log_singles).shape[:-2]

    def __getitem__(self, i) -> BeliefSet:
        return BeliefSet(
            ad.value(self.log_singles)[i], ad.value(self.log_pairs)[i], self.edges
        )

    def detach(self) -> BeliefSet:
        return BeliefSet(
            ad.value(self.log_singles), ad.value(self.log_pairs), self.edges
        )

    @classmethod
    def from_probabilities(
        cls,
        singles: np.ndarray,
        pairs: np.ndarray,
        edges: np.ndarray,
        floor: Optional[float] = PROBABILITY_FLOOR,
    ) -> BeliefSet:
        singles = np.maximum(np.asarray(singles, dtype=float), floor)
        pairs = np.maximum(np.asarray(pairs, dtype=float), floor)
        singles = singles / singles.sum(axis=-1, keepdims=True)
        pairs = pairs / pairs.sum(axis=(-2, -1), keepdims=True)
        return cls(np.log(singles), np.log(pairs), np.asarray(edges, dtype=int))

    @classmethod
    def uniform(
        cls, num_vars: int, edges: np.ndarray, batch_shape: Tuple[int, ...] = ()
    ) -> BeliefSet:
        edges = np.asarray(edges, dtype=int).reshape(-1, 2)
        return cls(
            np.full(batch_shape + (num_vars, 2), -np.log(2)),
            np.full(batch_shape + (len(edges), 2, 2), -np.log(4)),
            edges,
        )
