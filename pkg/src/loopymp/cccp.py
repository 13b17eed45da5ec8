from __future__ import annotations
from typing import Optional, Tuple

import csv
import dataclasses
import numpy as np
import scipy.special

from loopymp.beliefs import PROBABILITY_FLOOR, BeliefSet
from loopymp.bethe import bethe_free_energy, consistency_distance, log_potentials
from loopymp.errors import ConfigurationError
from loopymp.graph import ClusteredGraph

__all__ = ["CccpConfig", "cccp_minimize", "CccpTrace", "write_trace_csv"]


@dataclasses.dataclass(frozen=True)
class CccpConfig:
    outer_iters: int = 25
    inner_iters: int = 25
    floor: float = PROBABILITY_FLOOR

    def __post_init__(self) -> None:
        if self.outer_iters < 1 or self.inner_iters < 1:
            raise ConfigurationError(
                "CCCP needs at least one outer and one inner iteration."
            )


@dataclasses.dataclass(frozen=True)
class CccpTrace:
    """Per outer iteration diagnostics, shape (outer_iters, ...)."""

    free_energy: np.ndarray
    consistency: np.ndarray


def _normalize(log_x: np.ndarray, axis) -> np.ndarray:
    return log_x - scipy.special.logsumexp(log_x, axis=axis, keepdims=True)


def _feasible_pairs(g, log_singles: np.ndarray, floor: float) -> np.ndarray:
    """Pair tables with the given single marginals, closest in KL to the
    edge factor; the cross ratio b++ b-- / (b+- b-+) equals exp(4 E_nm)."""
    singles = np.exp(log_singles[..., 0])
    p = singles[..., g.pairs[:, 0]]
    q = singles[..., g.pairs[:, 1]]
    w = np.exp(np.clip(4 * g.couplings, -600.0, 600.0))

    # (1 - w) x^2 + (1 - p - q + w (p + q)) x - w p q = 0 with x = b++
    a = 1 - w
    b = 1 - p - q + w * (p + q)
    c = -w * p * q
    root = np.sqrt(np.maximum(b * b - 4 * a * c, 0.0))
    half = -0.5 * (b + np.copysign(root, b))
    lo, hi = np.maximum(0.0, p + q - 1), np.minimum(p, q)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = c / half
        x = np.where((x >= lo) & (x <= hi), x, half / a)
    x = np.clip(np.nan_to_num(x, nan=0.0), lo, hi)

    table = np.stack(
        [np.stack([x, p - x], -1), np.stack([q - x, 1 - p - q + x], -1)], -2
    )
    return np.log(np.maximum(table, floor))


def cccp_minimize(
    g, cfg: Optional[CccpConfig] = None, initial: Optional[BeliefSet] = None
) -> Tuple[BeliefSet, CccpTrace]:
    """Minimize the Bethe free energy with the concave-convex double loop.

    The outer loop linearizes the concave part -sum_n d_n sum b_n log(b_n/psi_n)
    at the current single beliefs; the inner loop solves the resulting convex
    problem over the local polytope by iterative scaling of the edge
    multipliers, which are carried over between outer iterations.
    Each outer step is reported on the feasible point made of the new single
    beliefs and the pair tables that reproduce them exactly, so the returned
    beliefs lie in the local polytope and the trace does not increase.

    Parameters
    ----------
    g : PairwiseFactorGraph, GraphBatch or ClusteredGraph
        Model to approximate.
    cfg : Optional[CccpConfig], optional
        Iteration budget, by default 25 x 25.
    initial : Optional[BeliefSet], optional
        Starting single beliefs, by default uniform.

    Returns
    -------
    Tuple[BeliefSet, CccpTrace]
        Final beliefs and the per outer iteration trace.
    """
    cfg = cfg or CccpConfig()
    if isinstance(g, ClusteredGraph):
        g = g.source

    log_psi, log_phi = log_potentials(g)
    degrees = g.degrees
    batch_shape = log_psi.shape[:-2]
    num_slots = 2 * len(g.pairs)
    slot_var = g.pairs.reshape(-1)
    node_slots = [np.flatnonzero(slot_var == n) for n in range(g.num_vars)]

    lam = np.zeros(batch_shape + (num_slots, 2))
    if initial is None:
        log_bt = np.full(batch_shape + (g.num_vars, 2), -np.log(2))
    else:
        log_bt = np.maximum(np.array(initial.log_singles), np.log(cfg.floor))

    def node_beliefs(base):
        incoming = np.stack(
            [lam[..., s, :].sum(axis=-2) for s in node_slots], axis=-2
        )
        return _normalize(base - incoming, axis=-1)

    free_energy, consistency = [], []
    for _ in range(cfg.outer_iters):
        base = log_psi + degrees[:, None] * (log_bt - log_psi)

        for _ in range(cfg.inner_iters):
            for s in range(num_slots):
                e, end = divmod(s, 2)
                v = slot_var[s]
                log_bn = _normalize(
                    base[..., v, :] - lam[..., node_slots[v], :].sum(axis=-2), axis=-1
                )
                log_be = (
                    log_phi[..., e, :, :]
                    + lam[..., 2 * e, :, None]
                    + lam[..., 2 * e + 1, None, :]
                )
                log_marg = _normalize(
                    scipy.special.logsumexp(log_be, axis=-1 if end == 0 else -2),
                    axis=-1,
                )
                lam[..., s, :] += 0.5 * (log_bn - log_marg)

        log_bt = node_beliefs(base)
        beliefs = BeliefSet(log_bt, _feasible_pairs(g, log_bt, cfg.floor), g.pairs)
        free_energy.append(bethe_free_energy(g, beliefs))
        consistency.append(consistency_distance(beliefs))

    trace = CccpTrace(np.array(free_energy), np.array(consistency))
    return beliefs, trace


def write_trace_csv(trace: CccpTrace, path: str) -> None:
    """Write ``outer_iter,f_bethe,consistency_distance`` for a single graph."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["outer_iter", "f_bethe", "consistency_distance"])
        for i, (fb, ll) in enumerate(zip(trace.free_energy, trace.consistency), 1):
            writer.writerow([i, repr(float(fb)), repr(float(ll))])
