from __future__ import annotations
from typing import Any, Tuple, Union

import numpy as np

from loopymp import autodiff as ad
from loopymp.beliefs import PROBABILITY_FLOOR, BeliefSet
from loopymp.graph import ClusteredGraph, GraphBatch, PairwiseFactorGraph
from loopymp.llr import SPINS

__all__ = ["bethe_free_energy", "consistency_distance", "log_potentials"]

_LOG_FLOOR = float(np.log(PROBABILITY_FLOOR))


def _finalize(x: Any) -> Any:
    if isinstance(x, np.ndarray) and x.ndim == 0:
        return float(x)
    return x


def _floored(log_b: Any) -> Any:
    return ad.clamp(log_b, _LOG_FLOOR, 0.0)


def log_potentials(
    g: Union[PairwiseFactorGraph, GraphBatch],
) -> Tuple[np.ndarray, np.ndarray]:
    """Log single factors E_n x_n, shape (..., N, 2), and pair factors
    E_n x_n + E_nm x_n x_m + E_m x_m, shape (..., E, 2, 2)."""
    log_psi = g.unary[..., None] * SPINS
    n, m = g.pairs[:, 0], g.pairs[:, 1]
    log_phi = (
        g.unary[..., n, None, None] * SPINS[:, None]
        + g.couplings[..., None, None] * np.outer(SPINS, SPINS)
        + g.unary[..., m, None, None] * SPINS[None, :]
    )
    return log_psi, log_phi


def bethe_free_energy(g, beliefs: BeliefSet) -> Any:
    """Bethe free energy in nats, with variable degrees as counting numbers.

    Parameters
    ----------
    g : PairwiseFactorGraph, GraphBatch or ClusteredGraph
        Model; a clustered graph is evaluated through its source.
    beliefs : BeliefSet
        Beliefs, floored at 1e-12 before taking logs.

    Returns
    -------
    float, array or Variable
        One value per graph.
    """
    if isinstance(g, ClusteredGraph):
        g = g.source
    log_psi, log_phi = log_potentials(g)
    d = g.degrees

    log_be = _floored(beliefs.log_pairs)
    log_bn = _floored(beliefs.log_singles)

    edge_term = ad.sum(
        ad.mul(ad.exp(log_be), ad.sub(log_be, log_phi)), axis=(-3, -2, -1)
    )
    node_term = ad.sum(
        ad.mul((d - 1.0)[:, None], ad.mul(ad.exp(log_bn), ad.sub(log_bn, log_psi))),
        axis=(-2, -1),
    )
    return _finalize(ad.sub(edge_term, node_term))


def _kl_rows(log_r: Any, log_b: Any) -> Any:
    log_r, log_b = _floored(log_r), _floored(log_b)
    return ad.sum(ad.mul(ad.exp(log_r), ad.sub(log_r, log_b)), axis=(-2, -1))


def consistency_distance(beliefs: BeliefSet) -> Any:
    """Summed KL between each pair table's marginals and its single beliefs."""
    n, m = beliefs.edges[:, 0], beliefs.edges[:, 1]
    rows = ad.logsumexp(beliefs.log_pairs, axis=-1)
    cols = ad.logsumexp(beliefs.log_pairs, axis=-2)
    return _finalize(
        ad.add(
            _kl_rows(rows, ad.take(beliefs.log_singles, n, axis=-2)),
            _kl_rows(cols, ad.take(beliefs.log_singles, m, axis=-2)),
        )
    )
