from __future__ import annotations
from typing import Union

import dataclasses
import warnings
import numpy as np
import scipy.special

from loopymp.beliefs import BeliefSet
from loopymp.errors import CapacityError
from loopymp.graph import ClusteredGraph, GraphBatch, PairwiseFactorGraph
from loopymp.llr import assignments

__all__ = [
    "exact_marginals",
    "kl_divergence",
    "log_joint_unnormalized",
    "MarginalSet",
    "MAX_ENUMERATION_VARS",
    "mean_kl_to_exact",
    "partition_function_log",
]

MAX_ENUMERATION_VARS = 25

Graph = Union[PairwiseFactorGraph, GraphBatch]


@dataclasses.dataclass(frozen=True)
class MarginalSet:
    """Exact single and pairwise marginals; index 0 stands for x = +1.

    Attributes
    ----------
    singles : numpy.ndarray
        Shape (..., N, 2).
    pairs : numpy.ndarray
        Shape (..., E, 2, 2).
    edges : numpy.ndarray
        Shape (E, 2).
    """

    singles: np.ndarray
    pairs: np.ndarray
    edges: np.ndarray

    def as_beliefs(self) -> BeliefSet:
        return BeliefSet.from_probabilities(self.singles, self.pairs, self.edges)

    def __getitem__(self, i) -> MarginalSet:
        return MarginalSet(self.singles[i], self.pairs[i], self.edges)


def _source(g):
    return g.source if isinstance(g, ClusteredGraph) else g


def _enumerate(g: Graph) -> np.ndarray:
    """Unnormalized log joint of every assignment, shape (..., 2^N)."""
    if g.num_vars > MAX_ENUMERATION_VARS:
        raise CapacityError(
            f"Exhaustive enumeration is capped at {MAX_ENUMERATION_VARS} variables, "
            f"graph has {g.num_vars}."
        )
    a = assignments(g.num_vars).astype(float)
    products = a[:, g.pairs[:, 0]] * a[:, g.pairs[:, 1]]
    return g.unary @ a.T + g.couplings @ products.T


def log_joint_unnormalized(g: PairwiseFactorGraph, a) -> float:
    a = np.asarray(a, dtype=float)
    return float(
        g.unary @ a + np.sum(g.couplings * a[g.pairs[:, 0]] * a[g.pairs[:, 1]])
    )


def partition_function_log(g: Graph) -> Union[float, np.ndarray]:
    log_z = scipy.special.logsumexp(_enumerate(_source(g)), axis=-1)
    return float(log_z) if np.ndim(log_z) == 0 else log_z


def exact_marginals(g: Graph) -> MarginalSet:
    """Marginals by summing the normalized joint over all 2^N assignments."""
    g = _source(g)
    log_joint = _enumerate(g)
    p = np.exp(log_joint - scipy.special.logsumexp(log_joint, axis=-1, keepdims=True))

    a = assignments(g.num_vars)
    singles = np.stack([p @ (a == 1), p @ (a == -1)], axis=-1)

    n, m = g.pairs[:, 0], g.pairs[:, 1]
    pairs = np.stack(
        [
            np.stack([p @ ((a[:, n] == sn) & (a[:, m] == sm)) for sm in (1, -1)], -1)
            for sn in (1, -1)
        ],
        axis=-2,
    )
    return MarginalSet(singles, pairs, g.pairs)


def kl_divergence(b, p) -> Union[float, np.ndarray]:
    """KL(b || p) in nats over the last axis; zero-mass terms of b vanish."""
    kl = np.sum(scipy.special.rel_entr(b, p), axis=-1)
    if np.any(np.isinf(kl)):
        warnings.warn(
            "KL divergence is infinite: the reference assigns zero mass "
            "where the belief does not.",
            RuntimeWarning,
        )
    return float(kl) if np.ndim(kl) == 0 else kl


def mean_kl_to_exact(g: Graph, beliefs: BeliefSet) -> Union[float, np.ndarray]:
    """Node-averaged KL(b_n || p_n) per graph."""
    exact = exact_marginals(g)
    kl = np.mean(kl_divergence(beliefs.singles, exact.singles), axis=-1)
    return float(kl) if np.ndim(kl) == 0 else kl
