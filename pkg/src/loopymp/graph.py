from __future__ import annotations
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import collections
import itertools
import networkx as nx
import numpy as np

from loopymp.errors import GraphConstructionError, ParseError

__all__ = [
    "build_graph",
    "cluster_unaries",
    "ClusteredGraph",
    "complete_pairs",
    "GraphBatch",
    "group_by_topology",
    "ising_graph",
    "lattice_pairs",
    "PairwiseFactorGraph",
    "read_graph",
    "to_networkx",
    "variable_degree",
    "write_graph",
]

Edge = Tuple[int, int, float]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


def _degrees(num_vars: int, pairs: np.ndarray) -> np.ndarray:
    return np.bincount(pairs.ravel(), minlength=num_vars).astype(int)


class _PairwiseTopology:
    """Shared edge bookkeeping for single graphs and stacked batches."""

    num_vars: int
    pairs: np.ndarray

    @property
    def num_edges(self) -> int:
        return len(self.pairs)

    @property
    def degrees(self) -> np.ndarray:
        return _degrees(self.num_vars, self.pairs)

    @property
    def adjacency(self) -> Tuple[Tuple[int, ...], ...]:
        incident = [[] for _ in range(self.num_vars)]
        for e, (n, m) in enumerate(self.pairs):
            incident[n].append(e)
            incident[m].append(e)
        return tuple(tuple(i) for i in incident)

    def same_topology(self, other: _PairwiseTopology) -> bool:
        return self.num_vars == other.num_vars and np.array_equal(
            self.pairs, other.pairs
        )


class PairwiseFactorGraph(_PairwiseTopology):
    """Binary pairwise model p(x) ~ exp(sum_n E_n x_n + sum_(n,m) E_nm x_n x_m).

    Attributes
    ----------
    num_vars : int
        Number of binary variables N.
    unary : numpy.ndarray
        Fields E_n, shape (N,).
    pairs : numpy.ndarray
        Edge endpoints with n < m, shape (E, 2).
    couplings : numpy.ndarray
        Couplings E_nm, shape (E,).
    """

    def __init__(
        self, num_vars: int, unary: np.ndarray, pairs: np.ndarray, couplings: np.ndarray
    ) -> None:
        self.num_vars = int(num_vars)
        self.unary = _frozen(np.asarray(unary, dtype=float))
        self.pairs = _frozen(np.asarray(pairs, dtype=int).reshape(-1, 2))
        self.couplings = _frozen(np.asarray(couplings, dtype=float))

    @property
    def edges(self) -> List[Edge]:
        return [
            (int(n), int(m), float(c)) for (n, m), c in zip(self.pairs, self.couplings)
        ]

    def __repr__(self) -> str:
        return (
            f"PairwiseFactorGraph(num_vars={self.num_vars}, "
            f"num_edges={self.num_edges})"
        )


def build_graph(
    unary: Sequence[float], edges: Iterable[Tuple[int, int, float]]
) -> PairwiseFactorGraph:
    """Construct a validated pairwise factor graph.

    Parameters
    ----------
    unary : Sequence[float]
        Field E_n for each variable.
    edges : Iterable[Tuple[int, int, float]]
        (n, m, E_nm) triples; endpoints are stored with n < m, in the given order.

    Returns
    -------
    PairwiseFactorGraph
        The validated graph.

    Raises
    ------
    GraphConstructionError
        On out-of-range or repeated endpoints, self-loops, duplicate pairs
        or non-finite parameters.
    """
    unary = np.asarray(unary, dtype=float)
    if unary.ndim != 1 or len(unary) == 0:
        raise GraphConstructionError("Unary fields must be a non-empty 1-D array.")
    if not np.all(np.isfinite(unary)):
        raise GraphConstructionError("Unary fields must be finite.")

    num_vars = len(unary)
    pairs, couplings = [], []
    seen = set()
    for n, m, coupling in edges:
        n, m = int(n), int(m)
        if not (0 <= n < num_vars and 0 <= m < num_vars):
            raise GraphConstructionError(
                f"Edge ({n}, {m}) has an endpoint outside [0, {num_vars})."
            )
        if n == m:
            raise GraphConstructionError(f"Self-loop on variable {n}.")
        if not np.isfinite(coupling):
            raise GraphConstructionError(f"Coupling on edge ({n}, {m}) is not finite.")
        key = (min(n, m), max(n, m))
        if key in seen:
            raise GraphConstructionError(f"Duplicate edge {key}.")
        seen.add(key)
        pairs.append(key)
        couplings.append(float(coupling))

    return PairwiseFactorGraph(
        num_vars, unary, np.array(pairs, dtype=int).reshape(-1, 2), np.array(couplings)
    )


def variable_degree(g: _PairwiseTopology, n: int) -> int:
    if not 0 <= n < g.num_vars:
        raise ValueError(f"Variable index {n} out of range for {g.num_vars} variables.")
    return int(g.degrees[n])


def complete_pairs(num_vars: int) -> np.ndarray:
    return np.array(list(itertools.combinations(range(num_vars), 2)), dtype=int)


def lattice_pairs(side: int) -> np.ndarray:
    """Nearest-neighbour pairs of a side x side square lattice, row-major."""
    pairs = []
    for r, c in itertools.product(range(side), repeat=2):
        n = r * side + c
        if c + 1 < side:
            pairs.append((n, n + 1))
        if r + 1 < side:
            pairs.append((n, n + side))
    return np.array(sorted(pairs), dtype=int).reshape(-1, 2)


def ising_graph(theta: float, j: float, num_vars: int = 4) -> PairwiseFactorGraph:
    """Fully connected model with constant field theta and coupling j."""
    pairs = complete_pairs(num_vars)
    return build_graph(
        np.full(num_vars, float(theta)), [(n, m, float(j)) for n, m in pairs]
    )


class GraphBatch(_PairwiseTopology):
    """Graphs sharing one edge list, stacked along a leading axis.

    Attributes
    ----------
    unary : numpy.ndarray
        Shape (B, N).
    couplings : numpy.ndarray
        Shape (B, E).
    """

    def __init__(
        self, num_vars: int, pairs: np.ndarray, unary: np.ndarray, couplings: np.ndarray
    ) -> None:
        self.num_vars = int(num_vars)
        self.pairs = _frozen(np.asarray(pairs, dtype=int).reshape(-1, 2))
        self.unary = _frozen(np.asarray(unary, dtype=float).reshape(-1, self.num_vars))
        self.couplings = _frozen(
            np.asarray(couplings, dtype=float).reshape(len(self.unary), len(self.pairs))
        )
        if not np.all(np.isfinite(self.unary)) or not np.all(
            np.isfinite(self.couplings)
        ):
            raise GraphConstructionError("Batch parameters must be finite.")

    @classmethod
    def stack(cls, graphs: Sequence[PairwiseFactorGraph]) -> GraphBatch:
        if len(graphs) == 0:
            raise GraphConstructionError("Cannot stack an empty sequence of graphs.")
        first = graphs[0]
        for g in graphs[1:]:
            if not first.same_topology(g):
                raise GraphConstructionError(
                    "All graphs in a batch must share variables and edge list."
                )
        return cls(
            first.num_vars,
            first.pairs,
            np.stack([g.unary for g in graphs]),
            np.stack([g.couplings for g in graphs]),
        )

    def __len__(self) -> int:
        return len(self.unary)

    def graph(self, i: int) -> PairwiseFactorGraph:
        return PairwiseFactorGraph(
            self.num_vars, self.unary[i], self.pairs, self.couplings[i]
        )

    def subset(self, indices: Sequence[int]) -> GraphBatch:
        indices = np.asarray(indices, dtype=int)
        return GraphBatch(
            self.num_vars, self.pairs, self.unary[indices], self.couplings[indices]
        )

    def __iter__(self):
        return (self.graph(i) for i in range(len(self)))

    def __repr__(self) -> str:
        return (
            f"GraphBatch(size={len(self)}, num_vars={self.num_vars}, "
            f"num_edges={self.num_edges})"
        )


def group_by_topology(
    graphs: Sequence[PairwiseFactorGraph],
) -> List[Tuple[np.ndarray, GraphBatch]]:
    """Split graphs into topology-homogeneous batches, in first-appearance order."""
    groups = collections.OrderedDict()
    for i, g in enumerate(graphs):
        key = (g.num_vars, g.pairs.tobytes())
        groups.setdefault(key, []).append(i)

    return [
        (np.array(idx), GraphBatch.stack([graphs[i] for i in idx]))
        for idx in groups.values()
    ]


class ClusteredGraph(_PairwiseTopology):
    """Unaries merged into the adjacent pairwise factors.

    Edge e = (n, m) carries exp(s_n x_n + E_nm x_n x_m + s_m x_m) where
    s_n = E_n / d_n; variables without edges keep their field in
    ``residual_unary``.

    Attributes
    ----------
    source : Union[PairwiseFactorGraph, GraphBatch]
        The unclustered graph.
    shares : numpy.ndarray
        Per-edge endpoint shares (s_n, s_m), shape (..., E, 2).
    residual_unary : numpy.ndarray
        Shape (..., N).
    """

    def __init__(
        self,
        source: Union[PairwiseFactorGraph, GraphBatch],
        shares: np.ndarray,
        residual_unary: np.ndarray,
    ) -> None:
        self.source = source
        self.num_vars = source.num_vars
        self.pairs = source.pairs
        self.couplings = source.couplings
        self.shares = _frozen(shares)
        self.residual_unary = _frozen(residual_unary)

    @property
    def edges(self) -> List[Tuple[int, int, float, float, float]]:
        if self.shares.ndim != 2:
            raise ValueError("Edge triples are only listed for a single graph.")
        return [
            (int(n), int(m), float(sn), float(c), float(sm))
            for (n, m), c, (sn, sm) in zip(self.pairs, self.couplings, self.shares)
        ]


def cluster_unaries(g: Union[PairwiseFactorGraph, GraphBatch]) -> ClusteredGraph:
    d = g.degrees
    safe_d = np.where(d > 0, d, 1)
    shares = g.unary[..., g.pairs] / safe_d[g.pairs]
    residual = np.where(d == 0, g.unary, 0.0)
    return ClusteredGraph(g, shares, residual)


def to_networkx(g: PairwiseFactorGraph) -> nx.Graph:
    G = nx.Graph()
    for n, e in enumerate(g.unary):
        G.add_node(n, unary=float(e))
    for n, m, c in g.edges:
        G.add_edge(n, m, coupling=c)
    return G


def write_graph(g: PairwiseFactorGraph, path: str) -> None:
    lines = [f"N {g.num_vars}"]
    lines += [f"U {n} {e:.17g}" for n, e in enumerate(g.unary)]
    lines += [f"E {n} {m} {c:.17g}" for n, m, c in g.edges]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_graph(path: str) -> PairwiseFactorGraph:
    num_vars: Optional[int] = None
    unary = {}
    edges = []
    with open(path, "r") as f:
        for line_number, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tag, *fields = line.split()
            try:
                if tag == "N" and len(fields) == 1 and num_vars is None:
                    num_vars = int(fields[0])
                    if num_vars < 1:
                        raise ParseError("N must be positive", line_number)
                elif num_vars is None:
                    raise ParseError("expected 'N <num_vars>' header", line_number)
                elif tag == "U" and len(fields) == 2:
                    n = int(fields[0])
                    if n in unary:
                        raise ParseError(
                            f"repeated field for variable {n}", line_number
                        )
                    if not 0 <= n < num_vars:
                        raise ParseError(f"variable {n} out of range", line_number)
                    unary[n] = float(fields[1])
                elif tag == "E" and len(fields) == 3:
                    edges.append((int(fields[0]), int(fields[1]), float(fields[2])))
                else:
                    raise ParseError(f"unrecognized line {line!r}", line_number)
            except ValueError as e:
                if isinstance(e, ParseError):
                    raise
                raise ParseError(str(e), line_number) from e

    if num_vars is None:
        raise ParseError("missing 'N <num_vars>' header")

    return build_graph([unary.get(n, 0.0) for n in range(num_vars)], edges)
