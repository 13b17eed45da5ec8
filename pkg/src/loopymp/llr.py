from __future__ import annotations
from typing import Iterable, Tuple, Union

import functools
import itertools
import numpy as np
import scipy.special

__all__ = [
    "assignments",
    "clamp_llr",
    "distribution_to_llr",
    "LLR_CLAMP",
    "llr_to_distribution",
    "SPINS",
    "spa_fn_update",
    "vn_update",
]

LLR_CLAMP = 30.0
# atanh argument bound used by the degree-2 factor rule
_ATANH_BOUND = 1 - 1e-12

# index 0 <-> x = +1, index 1 <-> x = -1
SPINS = np.array([1.0, -1.0])

ArrayLike = Union[float, np.ndarray]


def clamp_llr(llr: ArrayLike) -> ArrayLike:
    return np.clip(llr, -LLR_CLAMP, LLR_CLAMP)


def vn_update(incident_llrs: Iterable[float]) -> float:
    """Variable node rule: clamped sum of the incoming LLRs.

    Parameters
    ----------
    incident_llrs : Iterable[float]
        LLRs of every incident message except the one from the target factor.

    Returns
    -------
    float
        Outgoing LLR.
    """
    return float(clamp_llr(np.sum(np.fromiter(incident_llrs, dtype=float))))


def spa_fn_update(coupling: ArrayLike, llr_in: ArrayLike) -> ArrayLike:
    """Sum-product rule of a pairwise factor exp(E x_n x_m) in LLR form.

    Parameters
    ----------
    coupling : ArrayLike
        Coupling E_{n,m}.
    llr_in : ArrayLike
        LLR of the message arriving from the opposite variable.

    Returns
    -------
    ArrayLike
        2 atanh(tanh(E) tanh(L/2)), clamped to the message range.
    """
    u = np.clip(
        np.tanh(coupling) * np.tanh(np.asarray(llr_in) / 2),
        -_ATANH_BOUND,
        _ATANH_BOUND,
    )
    return clamp_llr(2 * np.arctanh(u))


def llr_to_distribution(llr: ArrayLike) -> Tuple[ArrayLike, ArrayLike]:
    return scipy.special.expit(llr), scipy.special.expit(-np.asarray(llr))


def distribution_to_llr(p_plus: ArrayLike, p_minus: ArrayLike) -> ArrayLike:
    return np.log(p_plus) - np.log(p_minus)


@functools.lru_cache(maxsize=None)
def assignments(num_vars: int) -> np.ndarray:
    """All 2^N spin assignments as rows; row 0 is all +1."""
    a = np.array(list(itertools.product((1, -1), repeat=num_vars)), dtype=np.int8)
    a = a.reshape(2 ** num_vars, num_vars)
    a.setflags(write=False)
    return a
