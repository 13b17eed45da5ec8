from __future__ import annotations
from typing import Any, List, NamedTuple, Optional, Sequence, Union

import csv
import dataclasses
import enum
import numpy as np

from loopymp import autodiff as ad
from loopymp.beliefs import BeliefSet
from loopymp.errors import ConfigurationError
from loopymp.graph import ClusteredGraph, GraphBatch, PairwiseFactorGraph
from loopymp.llr import LLR_CLAMP, clamp_llr, spa_fn_update
from loopymp.network import MLPParams, mlp_forward

__all__ = [
    "beliefs_from_messages",
    "dump_history_csv",
    "MessageState",
    "run_message_passing",
    "RunConfig",
    "RunResult",
    "unary_llr",
    "UpdateRule",
]

AnyGraph = Union[PairwiseFactorGraph, GraphBatch, ClusteredGraph]

# pair table logits: rows pick (a_n, a_m), columns run over
# (x_n, x_m) = (+,+), (+,-), (-,+), (-,-)
_ENDPOINT_SPINS = np.array([[1.0, 1.0, -1.0, -1.0], [1.0, -1.0, 1.0, -1.0]])
_PRODUCT_SPINS = np.array([1.0, -1.0, -1.0, 1.0])


class UpdateRule(enum.Enum):
    SPA = "spa"
    NEURAL_EXTRINSIC = "neural_extrinsic"
    NEURAL = "neural"


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Settings of one message passing run.

    Attributes
    ----------
    iterations : int
        Number T of parallel iterations (factor updates, then variable updates).
    momentum : float
        Weight mu of the previous message, applied to the LLRs of both
        directions.
    update_rule : UpdateRule
        Factor node rule.
    convergence_tol : float
        Threshold on the last iteration's largest message change.
    keep_history : bool
        Record beliefs and messages after every iteration.
    """

    iterations: int = 10
    momentum: float = 0.0
    update_rule: UpdateRule = UpdateRule.SPA
    convergence_tol: float = 1e-8
    keep_history: bool = True

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ConfigurationError("At least one iteration is required.")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(
                f"Momentum must lie in [0, 1), got {self.momentum}."
            )


@dataclasses.dataclass(frozen=True)
class MessageState:
    """Directed edge messages as LLRs.

    Slot 2e addresses endpoint n of edge e = (n, m), slot 2e + 1 endpoint m;
    ``fn_to_vn[..., s]`` runs from the factor to that endpoint and
    ``vn_to_fn[..., s]`` from that endpoint to the factor.
    """

    fn_to_vn: Any
    vn_to_fn: Any
    iteration: int = 0

    def detach(self) -> MessageState:
        return MessageState(
            ad.value(self.fn_to_vn), ad.value(self.vn_to_fn), self.iteration
        )


class RunResult(NamedTuple):
    messages: MessageState
    beliefs: BeliefSet
    converged: Union[bool, np.ndarray]
    history: List[BeliefSet]
    trace: List[MessageState]


@dataclasses.dataclass(frozen=True)
class _Layout:
    num_vars: int
    pairs: np.ndarray
    slot_var: np.ndarray
    partner: np.ndarray
    incidence: np.ndarray
    couplings: np.ndarray
    share_dst: np.ndarray
    share_src: np.ndarray
    field: np.ndarray
    clustered: bool


def _layout(g: AnyGraph) -> _Layout:
    num_edges = len(g.pairs)
    slots = np.arange(2 * num_edges)
    slot_var = g.pairs.reshape(-1)
    incidence = np.zeros((2 * num_edges, g.num_vars))
    incidence[slots, slot_var] = 1.0

    if isinstance(g, ClusteredGraph):
        share = g.shares.reshape(g.shares.shape[:-2] + (2 * num_edges,))
        field = g.residual_unary
    else:
        share = np.zeros(g.couplings.shape[:-1] + (2 * num_edges,))
        field = g.unary

    partner = slots ^ 1
    return _Layout(
        num_vars=g.num_vars,
        pairs=g.pairs,
        slot_var=slot_var,
        partner=partner,
        incidence=incidence,
        couplings=np.repeat(g.couplings, 2, axis=-1),
        share_dst=share,
        share_src=np.take(share, partner, axis=-1),
        field=field,
        clustered=isinstance(g, ClusteredGraph),
    )


def unary_llr(g: PairwiseFactorGraph, n: int) -> float:
    return 2.0 * float(g.unary[n])


def _factor_update(
    layout: _Layout,
    vn_to_fn: Any,
    rule: UpdateRule,
    params: Optional[MLPParams],
    side: Optional[np.ndarray],
) -> Any:
    llr_ext = ad.take(vn_to_fn, layout.partner, axis=-1)

    if rule is UpdateRule.SPA:
        return clamp_llr(
            2 * layout.share_dst
            + spa_fn_update(layout.couplings, llr_ext + 2 * layout.share_src)
        )

    if rule is UpdateRule.NEURAL_EXTRINSIC:
        features = [llr_ext, layout.couplings]
    else:
        features = [
            llr_ext,
            vn_to_fn,
            layout.share_src,
            layout.couplings,
            layout.share_dst,
        ]
    if side is not None:
        features += [side[..., k][..., None] for k in range(side.shape[-1])]

    x = ad.stack(features, axis=-1)
    return ad.clamp(mlp_forward(params, x), -LLR_CLAMP, LLR_CLAMP)


def _variable_update(layout: _Layout, fn_to_vn: Any) -> Any:
    totals = ad.add(2 * layout.field, ad.matmul(fn_to_vn, layout.incidence))
    return ad.clamp(
        ad.sub(ad.take(totals, layout.slot_var, axis=-1), fn_to_vn),
        -LLR_CLAMP,
        LLR_CLAMP,
    )


def _beliefs(layout: _Layout, fn_to_vn: Any, vn_to_fn: Any) -> BeliefSet:
    llr = ad.add(2 * layout.field, ad.matmul(fn_to_vn, layout.incidence))
    log_singles = ad.stack([ad.log_sigmoid(llr), ad.log_sigmoid(ad.neg(llr))], -1)

    num_edges = len(layout.pairs)
    batch_shape = ad.value(vn_to_fn).shape[:-1]
    # a_n x_n + E x_n x_m + a_m x_m with a = share + L_{x -> factor} / 2
    endpoint = ad.reshape(
        ad.add(layout.share_dst, ad.mul(0.5, vn_to_fn)), batch_shape + (num_edges, 2)
    )
    couplings = layout.couplings[..., ::2]
    logits = ad.add(
        ad.matmul(endpoint, _ENDPOINT_SPINS),
        np.multiply.outer(
            np.broadcast_to(couplings, batch_shape + (num_edges,)), _PRODUCT_SPINS
        ),
    )
    log_pairs = ad.sub(logits, ad.logsumexp(logits, axis=-1, keepdims=True))
    log_pairs = ad.reshape(log_pairs, batch_shape + (num_edges, 2, 2))

    return BeliefSet(log_singles, log_pairs, layout.pairs)


def beliefs_from_messages(g: AnyGraph, msgs: MessageState) -> BeliefSet:
    """Single and pairwise beliefs implied by a message state.

    The single-belief LLR at n is 2 E_n (the residual field on a clustered
    graph) plus the incoming factor messages; pair tables combine the edge
    factor with the two variable-to-factor messages and are normalized.
    """
    return _beliefs(_layout(g), msgs.fn_to_vn, msgs.vn_to_fn)


def _max_change(new: Any, old: Any) -> np.ndarray:
    return np.max(np.abs(ad.value(new) - ad.value(old)), axis=-1, initial=0.0)


def run_message_passing(
    g: AnyGraph,
    cfg: Optional[RunConfig] = None,
    params: Optional[MLPParams] = None,
    side_features: Optional[Sequence[float]] = None,
    initial: Optional[MessageState] = None,
) -> RunResult:
    """Run T parallel iterations from all-zero messages.

    Parameters
    ----------
    g : AnyGraph
        Graph, batch of graphs, or clustered graph (required by the
        non-extrinsic neural rule).
    cfg : Optional[RunConfig], optional
        Run settings, by default RunConfig()
    params : Optional[MLPParams], optional
        Shared network for the neural rules. Tape variables are accepted.
    side_features : Optional[Sequence[float]], optional
        Extra network inputs per graph, shape (..., k).
    initial : Optional[MessageState], optional
        Starting messages, by default all zero.

    Returns
    -------
    RunResult
        Final messages and beliefs, convergence flag(s) and per-iteration
        beliefs and messages.

    Raises
    ------
    ConfigurationError
        If a neural rule lacks parameters or is paired with the wrong graph form.
    """
    cfg = cfg or RunConfig()
    rule = cfg.update_rule
    layout = _layout(g)

    if rule is not UpdateRule.SPA:
        if params is None:
            raise ConfigurationError(
                f"Update rule {rule.value} requires network parameters."
            )
        if rule is UpdateRule.NEURAL and not layout.clustered:
            raise ConfigurationError(
                "The non-extrinsic rule runs on a clustered graph; "
                "call cluster_unaries first."
            )
        if rule is UpdateRule.NEURAL_EXTRINSIC and layout.clustered:
            raise ConfigurationError(
                "The extrinsic rule runs on the unclustered graph."
            )

    side = None if side_features is None else np.asarray(side_features, dtype=float)

    if initial is None:
        initial = MessageState(
            np.zeros(layout.couplings.shape), np.zeros(layout.couplings.shape)
        )
    fn_to_vn, vn_to_fn = initial.fn_to_vn, initial.vn_to_fn
    history, trace = [], []
    change = np.zeros(layout.couplings.shape[:-1])

    start = initial.iteration
    for t in range(start + 1, start + cfg.iterations + 1):
        fn_new = _factor_update(layout, vn_to_fn, rule, params, side)
        if cfg.momentum > 0:
            fn_new = ad.add(
                ad.mul(1 - cfg.momentum, fn_new), ad.mul(cfg.momentum, fn_to_vn)
            )
        vn_new = _variable_update(layout, fn_new)
        if cfg.momentum > 0:
            vn_new = ad.add(
                ad.mul(1 - cfg.momentum, vn_new), ad.mul(cfg.momentum, vn_to_fn)
            )

        change = np.maximum(
            _max_change(fn_new, fn_to_vn), _max_change(vn_new, vn_to_fn)
        )
        fn_to_vn, vn_to_fn = fn_new, vn_new

        if cfg.keep_history:
            history.append(_beliefs(layout, fn_to_vn, vn_to_fn))
            trace.append(MessageState(fn_to_vn, vn_to_fn, t))

    beliefs = history[-1] if history else _beliefs(layout, fn_to_vn, vn_to_fn)
    converged = change < cfg.convergence_tol
    if np.ndim(converged) == 0:
        converged = bool(converged)

    messages = MessageState(fn_to_vn, vn_to_fn, start + cfg.iterations)
    return RunResult(messages, beliefs, converged, history, trace)


def dump_history_csv(trace: Sequence[MessageState], path: str) -> None:
    """Write ``iteration,message,llr`` rows for a single-graph run.

    Message ids 0..2E-1 are factor-to-variable slots, 2E..4E-1 the
    variable-to-factor slots.
    """
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["iteration", "message", "llr"])
        for state in trace:
            llrs = np.concatenate(
                [np.ravel(ad.value(state.fn_to_vn)), np.ravel(ad.value(state.vn_to_fn))]
            )
            for i, llr in enumerate(llrs):
                writer.writerow([state.iteration, i, repr(float(llr))])
