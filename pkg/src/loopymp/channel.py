from __future__ import annotations
from typing import List, Optional, Sequence, Tuple

import dataclasses
import numpy as np
import scipy.linalg
import scipy.special

from loopymp.errors import ConfigurationError
from loopymp.graph import GraphBatch, PairwiseFactorGraph, build_graph
from loopymp.llr import assignments

__all__ = [
    "bit_error_rate",
    "build_channel_matrix",
    "build_detection_graph",
    "ChannelInstance",
    "detection_batch",
    "ebno_db_to_sigma2",
    "hard_decision",
    "matched_filter",
    "MatchedStats",
    "posterior_marginals_direct",
    "sample_detection_batch",
    "sample_random_channel",
    "simulate_transmission",
    "TransmissionSample",
]


@dataclasses.dataclass(frozen=True)
class ChannelInstance:
    """Real ISI channel with unit-energy taps and complex AWGN.

    Attributes
    ----------
    taps : numpy.ndarray
        Impulse response h of length L + 1.
    sigma2 : float
        Noise variance of the complex Gaussian noise.
    block_len : int
        Number N of transmitted symbols.
    """

    taps: np.ndarray
    sigma2: float
    block_len: int

    def __post_init__(self) -> None:
        taps = np.asarray(self.taps, dtype=float)
        if abs(np.linalg.norm(taps) - 1.0) > 1e-12:
            raise ConfigurationError("Channel taps must have unit energy.")
        if not self.sigma2 > 0:
            raise ConfigurationError(
                f"Noise variance must be positive, got {self.sigma2}."
            )
        object.__setattr__(self, "taps", taps)

    @property
    def memory(self) -> int:
        return len(self.taps) - 1

    @property
    def matrix(self) -> np.ndarray:
        return build_channel_matrix(self.taps, self.block_len)


@dataclasses.dataclass(frozen=True)
class TransmissionSample:
    symbols: np.ndarray
    observation: np.ndarray


@dataclasses.dataclass(frozen=True)
class MatchedStats:
    """Matched filter output x = H^H y and Gram matrix G = H^H H with bandwidth L."""

    x: np.ndarray
    G: np.ndarray
    bandwidth: int


def ebno_db_to_sigma2(ebno_db):
    return 10.0 ** (-np.asarray(ebno_db, dtype=float) / 10.0)


def sample_random_channel(memory: int = 2, rng: Optional[np.random.Generator] = None):
    """Gaussian taps normalized to unit energy."""
    rng = rng or np.random.default_rng()
    while True:
        taps = rng.standard_normal(memory + 1)
        norm = np.linalg.norm(taps)
        if norm > 0:
            return taps / norm


def build_channel_matrix(taps: Sequence[float], block_len: int) -> np.ndarray:
    """(N + L) x N convolution matrix; column j holds h shifted down by j."""
    taps = np.asarray(taps, dtype=float)
    column = np.concatenate([taps, np.zeros(block_len - 1)])
    row = np.concatenate([taps[:1], np.zeros(block_len - 1)])
    return scipy.linalg.toeplitz(column, row)


def simulate_transmission(
    ch: ChannelInstance,
    symbols: Sequence[int],
    rng: Optional[np.random.Generator] = None,
) -> TransmissionSample:
    rng = rng or np.random.default_rng()
    symbols = np.asarray(symbols, dtype=float)
    H = ch.matrix
    scale = np.sqrt(ch.sigma2 / 2)
    noise = scale * (
        rng.standard_normal(H.shape[0]) + 1j * rng.standard_normal(H.shape[0])
    )
    return TransmissionSample(symbols, H @ symbols + noise)


def matched_filter(H: np.ndarray, y: np.ndarray) -> MatchedStats:
    H = np.asarray(H)
    bandwidth = H.shape[0] - H.shape[1]
    return MatchedStats(H.conj().T @ y, np.real(H.conj().T @ H), bandwidth)


def build_detection_graph(stats: MatchedStats, sigma2: float) -> PairwiseFactorGraph:
    """Pairwise graph of the Ungerboeck likelihood.

    E_n = 2 Re(x_n) / sigma2 and E_nm = -2 G_nm / sigma2 for 0 < m - n <= L;
    pairs with exactly zero Gram entry are left out.
    """
    N = len(stats.x)
    edges = [
        (n, m, -2.0 * stats.G[n, m] / sigma2)
        for n in range(N)
        for m in range(n + 1, min(N, n + stats.bandwidth + 1))
        if stats.G[n, m] != 0
    ]
    return build_graph(2.0 * np.real(stats.x) / sigma2, edges)


def _channel_matrices(taps: np.ndarray, block_len: int) -> np.ndarray:
    B, width = taps.shape
    H = np.zeros((B, block_len + width - 1, block_len))
    cols = np.arange(block_len)
    for k in range(width):
        H[:, cols + k, cols] = taps[:, k, None]
    return H


def hard_decision(llr):
    d = np.where(np.asarray(llr) >= 0, 1, -1)
    return int(d) if d.ndim == 0 else d


def bit_error_rate(llrs, labels) -> float:
    return float(np.mean(hard_decision(llrs) != np.asarray(labels)))


def posterior_marginals_direct(
    taps: Sequence[float], y: np.ndarray, sigma2: float
) -> np.ndarray:
    """p(c_n = +1 | y), p(c_n = -1 | y) by enumerating exp(-||y - Hc||^2 / sigma2)."""
    y = np.asarray(y)
    N = len(y) - len(taps) + 1
    a = assignments(N).astype(float)
    residual = y[None, :] - a @ build_channel_matrix(taps, N).T
    log_lik = -np.sum(np.abs(residual) ** 2, axis=-1) / sigma2
    p = np.exp(log_lik - scipy.special.logsumexp(log_lik))
    return np.stack([p @ (a == 1), p @ (a == -1)], axis=-1)


def detection_batch(
    taps: np.ndarray, observations: np.ndarray, sigma2: np.ndarray
) -> List[Tuple[np.ndarray, GraphBatch]]:
    """Vectorized detection graphs for many instances of equal block length.

    Parameters
    ----------
    taps : numpy.ndarray
        Shape (B, L + 1).
    observations : numpy.ndarray
        Shape (B, N + L).
    sigma2 : numpy.ndarray
        Shape (B,).

    Returns
    -------
    List[Tuple[numpy.ndarray, GraphBatch]]
        Instance indices and batch for each distinct edge pattern.
    """
    B, width = taps.shape
    memory = width - 1
    N = observations.shape[1] - memory
    H = _channel_matrices(taps, N)
    x = np.einsum("bkn,bk->bn", H, observations)
    G = np.einsum("bkn,bkm->bnm", H, H)

    band = [(n, m) for n in range(N) for m in range(n + 1, min(N, n + memory + 1))]
    band = np.array(band, dtype=int).reshape(-1, 2)
    unary = 2.0 * np.real(x) / sigma2[:, None]
    couplings = -2.0 * G[:, band[:, 0], band[:, 1]] / sigma2[:, None]

    if len(band) == 0:
        return [(np.arange(B), GraphBatch(N, band, unary, couplings))]

    patterns, inverse = np.unique(couplings != 0, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    groups = []
    first_seen = [np.flatnonzero(inverse == k)[0] for k in range(len(patterns))]
    for k in np.argsort(first_seen):
        idx = np.flatnonzero(inverse == k)
        keep = patterns[k]
        groups.append(
            (idx, GraphBatch(N, band[keep], unary[idx], couplings[idx][:, keep]))
        )
    return groups


def sample_detection_batch(
    count: int,
    ebno_db,
    rng: np.random.Generator,
    block_len: int = 4,
    memory: int = 2,
):
    """Random channels, symbols and noisy observations.

    Parameters
    ----------
    count : int
        Number of instances.
    ebno_db : float or array
        Per-instance E_b/N_0 in dB.
    rng : numpy.random.Generator
        Source of randomness.

    Returns
    -------
    Tuple
        (groups from ``detection_batch``, symbols (B, N), side features
        (B, L + 2) holding [ebno_db, h_0, ..., h_L]).
    """
    ebno_db = np.broadcast_to(np.asarray(ebno_db, dtype=float), (count,))
    taps = rng.standard_normal((count, memory + 1))
    while True:
        zero = np.linalg.norm(taps, axis=1) == 0
        if not zero.any():
            break
        taps[zero] = rng.standard_normal((int(zero.sum()), memory + 1))
    taps = taps / np.linalg.norm(taps, axis=1, keepdims=True)
    symbols = rng.choice(np.array([1.0, -1.0]), size=(count, block_len))
    sigma2 = ebno_db_to_sigma2(ebno_db)

    H = _channel_matrices(taps, block_len)
    shape = (count, block_len + memory)
    noise = np.sqrt(sigma2 / 2)[:, None] * (
        rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    )
    y = np.einsum("bkn,bn->bk", H, symbols) + noise

    side = np.concatenate([ebno_db[:, None], taps], axis=1)
    return detection_batch(taps, y, sigma2), symbols, side
