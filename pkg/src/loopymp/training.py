from __future__ import annotations
from typing import Any, List, NamedTuple, Optional, Sequence, Tuple

import dataclasses
import enum
import logging
import numpy as np

from loopymp import autodiff as ad
from loopymp.beliefs import BeliefSet
from loopymp.bethe import bethe_free_energy, consistency_distance
from loopymp.channel import sample_detection_batch
from loopymp.engine import RunConfig, UpdateRule, run_message_passing
from loopymp.errors import ConfigurationError, TrainingDivergence
from loopymp.graph import (
    GraphBatch,
    PairwiseFactorGraph,
    build_graph,
    cluster_unaries,
    complete_pairs,
)
from loopymp.network import MLPParams, init_params
from loopymp.oracle import MarginalSet, exact_marginals, kl_divergence
from loopymp.utils import substream, write_csv

__all__ = [
    "adam_step",
    "batch_loss",
    "CurvePoint",
    "evaluate_model",
    "loss_and_grad",
    "loss_bethe",
    "loss_bmi",
    "loss_kl",
    "LossKind",
    "Mode",
    "OptimizerState",
    "RestartOutcome",
    "sample_spin_glass",
    "sample_spin_glasses",
    "sample_training_batch",
    "TaskKind",
    "train",
    "TrainConfig",
    "TrainingBatch",
    "TrainResult",
    "validation_set",
    "write_curve_csv",
]

logger = logging.getLogger(__name__)

_LN2 = float(np.log(2.0))


class LossKind(enum.Enum):
    KL = "kl"
    BETHE = "bethe"
    BMI = "bmi"


class Mode(enum.Enum):
    EXTRINSIC = "extrinsic"
    NON_EXTRINSIC = "non_extrinsic"


class TaskKind(enum.Enum):
    ISING = "ising"
    CHANNEL = "channel"


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Training settings.

    Attributes
    ----------
    loss_kind : LossKind
        Objective evaluated on the final beliefs.
    mode : Mode
        Extrinsic (2 network inputs) or non-extrinsic (5 inputs) factor rule.
    task : TaskKind
        Spin glasses or ISI detection; detection appends [ebno_db, h] inputs.
    alpha : float
        Weight of the consistency distance in the Bethe loss.
    last_k : int
        Average the loss over the beliefs of the last k iterations.
    """

    loss_kind: LossKind = LossKind.KL
    mode: Mode = Mode.NON_EXTRINSIC
    task: TaskKind = TaskKind.ISING
    alpha: float = 25.0
    iterations: int = 10
    batch_size: int = 256
    steps: int = 20000
    learning_rate: float = 1e-3
    seed: int = 0
    restarts: int = 5
    last_k: int = 1
    eval_every: int = 500
    val_size: int = 2000
    train_s: float = 3.0
    val_s: float = 2.0
    num_vars: int = 4
    memory: int = 2
    ebno_range: Tuple[float, float] = (0.0, 16.0)
    val_ebno: Tuple[float, ...] = (2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0)

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be non-negative, got {self.alpha}.")
        if self.batch_size < 1 or self.val_size < 1:
            raise ConfigurationError("Batch and validation sizes must be positive.")
        if self.iterations < 1:
            raise ConfigurationError("At least one iteration is required.")
        if self.steps < 0 or self.restarts < 1 or self.eval_every < 1:
            raise ConfigurationError("steps >= 0, restarts >= 1 and eval_every >= 1.")
        if not 1 <= self.last_k <= self.iterations:
            raise ConfigurationError("last_k must lie in [1, iterations].")
        if self.task is TaskKind.ISING and self.loss_kind is LossKind.BMI:
            raise ConfigurationError("The BMI loss needs labelled channel data.")

    @property
    def update_rule(self) -> UpdateRule:
        if self.mode is Mode.EXTRINSIC:
            return UpdateRule.NEURAL_EXTRINSIC
        return UpdateRule.NEURAL

    @property
    def n_in(self) -> int:
        n = 2 if self.mode is Mode.EXTRINSIC else 5
        if self.task is TaskKind.CHANNEL:
            n += self.memory + 2
        return n


@dataclasses.dataclass(frozen=True)
class OptimizerState:
    """Adam moment estimates, shaped like the parameters."""

    first: MLPParams
    second: MLPParams
    step: int = 0

    @classmethod
    def zeros_like(cls, params: MLPParams) -> OptimizerState:
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(
    params: MLPParams,
    grads: MLPParams,
    state: OptimizerState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[MLPParams, OptimizerState]:
    step = state.step + 1
    first = state.first.apply(lambda m, g: beta1 * m + (1 - beta1) * g, grads)
    second = state.second.apply(lambda v, g: beta2 * v + (1 - beta2) * g ** 2, grads)
    c1, c2 = 1 - beta1 ** step, 1 - beta2 ** step
    params = params.apply(
        lambda p, m, v: p - lr * (m / c1) / (np.sqrt(v / c2) + eps), first, second
    )
    return params, OptimizerState(first, second, step)


# ------------------------------------------------------ #
# losses


def loss_kl(beliefs: BeliefSet, exact: MarginalSet) -> Any:
    """Mean over nodes and graphs of KL(b_n || p_n) in nats."""
    log_p = np.log(exact.singles)
    kl = ad.sum(
        ad.mul(ad.exp(beliefs.log_singles), ad.sub(beliefs.log_singles, log_p)),
        axis=-1,
    )
    return _scalar(ad.mean(kl))


def loss_bethe(g, beliefs: BeliefSet, alpha: float = 25.0) -> Any:
    return _scalar(
        ad.mean(
            ad.add(
                bethe_free_energy(g, beliefs),
                ad.mul(alpha, consistency_distance(beliefs)),
            )
        )
    )


def loss_bmi(llrs: Any, labels: Any) -> Any:
    """1 - BMI: mean of log2(1 + exp(-c L)) over all symbols."""
    labels = np.asarray(labels, dtype=float)
    return _scalar(ad.mul(ad.mean(ad.softplus(ad.mul(-labels, llrs))), 1.0 / _LN2))


def _scalar(x: Any) -> Any:
    if isinstance(x, ad.Variable):
        return x
    return float(x)


# ------------------------------------------------------ #
# data


def sample_spin_glass(
    S: float,
    num_vars: int = 4,
    rng: Optional[np.random.Generator] = None,
    pairs: Optional[np.ndarray] = None,
) -> PairwiseFactorGraph:
    """Fields and couplings drawn i.i.d. from U[-S, S]; fully connected by default."""
    if not S > 0:
        raise ConfigurationError(f"S must be positive, got {S}.")
    rng = rng or np.random.default_rng()
    pairs = complete_pairs(num_vars) if pairs is None else np.asarray(pairs)
    unary = rng.uniform(-S, S, size=num_vars)
    couplings = rng.uniform(-S, S, size=len(pairs))
    return build_graph(unary, [(n, m, c) for (n, m), c in zip(pairs, couplings)])


def sample_spin_glasses(
    S: float,
    count: int,
    rng: np.random.Generator,
    num_vars: int = 4,
    pairs: Optional[np.ndarray] = None,
) -> GraphBatch:
    if not S > 0:
        raise ConfigurationError(f"S must be positive, got {S}.")
    pairs = complete_pairs(num_vars) if pairs is None else np.asarray(pairs)
    unary = rng.uniform(-S, S, size=(count, num_vars))
    couplings = rng.uniform(-S, S, size=(count, len(pairs)))
    return GraphBatch(num_vars, pairs, unary, couplings)


@dataclasses.dataclass(frozen=True)
class _Group:
    indices: np.ndarray
    graphs: GraphBatch
    side: Optional[np.ndarray]
    labels: Optional[np.ndarray]
    exact: Optional[MarginalSet]


@dataclasses.dataclass(frozen=True)
class TrainingBatch:
    """Topology-homogeneous groups of one sampled batch."""

    groups: Tuple[_Group, ...]
    size: int


def sample_training_batch(
    cfg: TrainConfig,
    rng: np.random.Generator,
    size: Optional[int] = None,
    S: Optional[float] = None,
    ebno_db: Optional[float] = None,
    with_exact: Optional[bool] = None,
) -> TrainingBatch:
    """Fresh spin glasses, or channel instances with ebno_db ~ U[ebno_range]."""
    size = size or cfg.batch_size
    if with_exact is None:
        with_exact = cfg.loss_kind is LossKind.KL

    if cfg.task is TaskKind.ISING:
        graphs = sample_spin_glasses(S or cfg.train_s, size, rng, cfg.num_vars)
        exact = exact_marginals(graphs) if with_exact else None
        group = _Group(np.arange(size), graphs, None, None, exact)
        return TrainingBatch((group,), size)

    if ebno_db is None:
        ebno_db = rng.uniform(*cfg.ebno_range, size=size)
    groups, symbols, side = sample_detection_batch(
        size, ebno_db, rng, cfg.num_vars, cfg.memory
    )
    return TrainingBatch(
        tuple(
            _Group(
                idx,
                graphs,
                side[idx],
                symbols[idx],
                exact_marginals(graphs) if with_exact else None,
            )
            for idx, graphs in groups
        ),
        size,
    )


def _group_loss(cfg: TrainConfig, group: _Group, beliefs: BeliefSet) -> Any:
    if cfg.loss_kind is LossKind.KL:
        return loss_kl(beliefs, group.exact)
    if cfg.loss_kind is LossKind.BETHE:
        return loss_bethe(group.graphs, beliefs, cfg.alpha)
    llrs = ad.matmul(beliefs.log_singles, np.array([1.0, -1.0]))
    return loss_bmi(llrs, group.labels)


def _run(cfg: TrainConfig, group: _Group, params: Any, keep_history: bool):
    g = group.graphs
    if cfg.mode is Mode.NON_EXTRINSIC:
        g = cluster_unaries(g)
    run_cfg = RunConfig(
        iterations=cfg.iterations,
        update_rule=cfg.update_rule,
        keep_history=keep_history,
    )
    return run_message_passing(g, run_cfg, params, group.side)


def batch_loss(params: Any, batch: TrainingBatch, cfg: TrainConfig) -> Any:
    """Loss of the shared network on a batch; a tape variable if ``params`` are."""
    total = 0.0
    for group in batch.groups:
        result = _run(cfg, group, params, keep_history=cfg.last_k > 1)
        history = result.history[-cfg.last_k :] if cfg.last_k > 1 else [result.beliefs]
        losses = [_group_loss(cfg, group, b) for b in history]
        group_loss = ad.mul(ad.stack(losses, axis=0), 1.0 / len(losses))
        group_loss = ad.sum(group_loss)
        total = ad.add(total, ad.mul(len(group.indices) / batch.size, group_loss))
    return _scalar(total)


def loss_and_grad(
    params: MLPParams, batch: TrainingBatch, cfg: TrainConfig
) -> Tuple[float, MLPParams]:
    tape = ad.Tape()
    loss = batch_loss(tape.parameters(params), batch, cfg)
    grads, _ = ad.backward(tape, output=loss)
    return float(loss.value), grads


# ------------------------------------------------------ #
# validation


@dataclasses.dataclass(frozen=True)
class ValidationSet:
    batches: Tuple[TrainingBatch, ...]


def validation_set(cfg: TrainConfig) -> ValidationSet:
    """Held-out S = val_s spin glasses, or ``val_size`` channels per ebno point."""
    if cfg.task is TaskKind.ISING:
        rng = substream(cfg.seed, "validation")
        return ValidationSet(
            (
                sample_training_batch(
                    cfg, rng, cfg.val_size, S=cfg.val_s, with_exact=True
                ),
            )
        )
    return ValidationSet(
        tuple(
            sample_training_batch(
                cfg,
                substream(cfg.seed, "validation", i),
                cfg.val_size,
                ebno_db=ebno,
                with_exact=False,
            )
            for i, ebno in enumerate(cfg.val_ebno)
        )
    )


def evaluate_model(
    params: MLPParams, cfg: TrainConfig, validation: ValidationSet
) -> float:
    """Mean node KL on spin glasses; mean 1 - BMI over the ebno grid on channels."""
    scores = []
    for batch in validation.batches:
        score = 0.0
        for group in batch.groups:
            beliefs = _run(cfg, group, params, keep_history=False).beliefs
            if cfg.task is TaskKind.ISING:
                value = float(
                    np.mean(kl_divergence(beliefs.singles, group.exact.singles))
                )
            else:
                value = loss_bmi(beliefs.llrs, group.labels)
            score += value * len(group.indices) / batch.size
        scores.append(score)
    return float(np.mean(scores))


# ------------------------------------------------------ #
# optimization


@dataclasses.dataclass(frozen=True)
class CurvePoint:
    step: int
    loss: float
    val_loss: Optional[float] = None


@dataclasses.dataclass(frozen=True)
class RestartOutcome:
    restart: int
    seed: int
    diverged: bool
    steps_run: int
    val_loss: float


class TrainResult(NamedTuple):
    params: MLPParams
    curve: List[CurvePoint]
    report: List[RestartOutcome]


def _restart_seed(cfg: TrainConfig, restart: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, restart]).generate_state(1)[0])


def train(cfg: TrainConfig) -> TrainResult:
    """Fit one shared network through T unrolled iterations with Adam.

    Every step draws a fresh batch, evaluates the loss on the final beliefs
    and backpropagates through the whole unroll. A non-finite loss or
    gradient abandons the restart; the restart with the lowest final
    validation loss wins.

    Raises
    ------
    TrainingDivergence
        If every restart diverged.
    """
    if cfg.steps == 0:
        return TrainResult(init_params(cfg.n_in, _restart_seed(cfg, 0)), [], [])

    validation = validation_set(cfg)
    report: List[RestartOutcome] = []
    best = None

    for r in range(cfg.restarts):
        seed = _restart_seed(cfg, r)
        logger.info("restart %d/%d (seed %d)", r + 1, cfg.restarts, seed)
        params = init_params(cfg.n_in, seed)
        state = OptimizerState.zeros_like(params)
        rng = substream(cfg.seed, "train", r)
        curve: List[CurvePoint] = []
        diverged = False

        for step in range(1, cfg.steps + 1):
            batch = sample_training_batch(cfg, rng)
            loss, grads = loss_and_grad(params, batch, cfg)
            if not (np.isfinite(loss) and grads.is_finite()):
                logger.warning(
                    "restart %d diverged at step %d (loss %r)", r + 1, step, loss
                )
                diverged = True
                break
            params, state = adam_step(params, grads, state, cfg.learning_rate)

            val_loss = None
            if step % cfg.eval_every == 0 or step == cfg.steps:
                val_loss = evaluate_model(params, cfg, validation)
                logger.info(
                    "restart %d step %d loss %.6g val %.6g", r + 1, step, loss, val_loss
                )
            curve.append(CurvePoint(step, loss, val_loss))

        if not diverged and not np.isfinite(curve[-1].val_loss):
            logger.warning("restart %d ended with non-finite validation loss", r + 1)
            diverged = True

        steps_run = len(curve)
        val_loss = float("nan") if diverged else curve[-1].val_loss
        report.append(RestartOutcome(r, seed, diverged, steps_run, val_loss))
        if not diverged and (best is None or val_loss < best[0]):
            best = (val_loss, params, curve)

    if best is None:
        raise TrainingDivergence(report)

    logger.info("kept restart with validation loss %.6g", best[0])
    return TrainResult(best[1], best[2], report)


def write_curve_csv(curve: Sequence[CurvePoint], path: str, settings=None) -> None:
    write_csv(
        path,
        ["step", "loss", "val_loss"],
        (
            (p.step, p.loss, "" if p.val_loss is None else p.val_loss)
            for p in curve
        ),
        settings,
    )
