from __future__ import annotations
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import dataclasses
import functools
import logging
import os
import pathlib
import numpy as np

from loopymp.beliefs import BeliefSet
from loopymp.bethe import bethe_free_energy, consistency_distance
from loopymp.cccp import cccp_minimize
from loopymp.channel import sample_detection_batch
from loopymp.engine import RunConfig, UpdateRule, run_message_passing
from loopymp.errors import ConfigurationError
from loopymp.graph import GraphBatch, cluster_unaries, complete_pairs
from loopymp.llr import spa_fn_update
from loopymp.network import (
    MLPParams,
    load_params,
    neural_fn_update_extrinsic,
    save_params,
)
from loopymp.oracle import exact_marginals, mean_kl_to_exact
from loopymp.tasks import ConcatenateTask, FunctionTask
from loopymp.training import (
    LossKind,
    Mode,
    TaskKind,
    TrainConfig,
    TrainResult,
    sample_spin_glasses,
    train,
    write_curve_csv,
)
from loopymp.utils import Settings, mkdir_safe, substream, write_csv
from loopymp.workflow import Workflow

__all__ = [
    "ALGORITHMS",
    "cmd_channel_sweep",
    "cmd_dump_mapping",
    "cmd_ising_heatmap",
    "cmd_ising_table",
    "cmd_train",
    "COMMANDS",
    "ExperimentConfig",
    "load_models",
    "RUNNERS",
    "run_algorithm",
]

logger = logging.getLogger(__name__)

COMMANDS = ("ising-table", "heatmap", "dump-mapping", "train", "channel-sweep")

_NEURAL_MODES = {"cycbp_e": Mode.EXTRINSIC, "cycbp": Mode.NON_EXTRINSIC}


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Everything one CLI invocation needs.

    Attributes
    ----------
    num_graphs : int
        Graphs (or channel instances per ebno point) to average over.
    s : float
        Spin glass parameter range U[-s, s].
    grid : int
        Points per axis of the heatmap, and LLR points of the mapping dump.
    models : Dict[str, str]
        Model file per neural algorithm.
    chunk_size : int
        Graphs per random sub-stream and per parallel task.
    """

    command: str = "ising-table"
    seed: int = 0
    num_graphs: int = 10000
    s: float = 2.0
    grid: int = 41
    ebno: Tuple[float, ...] = (2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0)
    algos: Tuple[str, ...] = ("spa",)
    models: Dict[str, str] = dataclasses.field(default_factory=dict)
    out: Optional[str] = None
    mu: float = 0.1
    alpha: float = 25.0
    iterations: int = 10
    loss: str = "kl"
    mode: str = "non_extrinsic"
    task: str = "ising"
    restarts: int = 5
    steps: int = 20000
    batch_size: int = 256
    learning_rate: float = 1e-3
    workers: int = 1
    chunk_size: int = 1000

    def __post_init__(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigurationError(f"Unknown command {self.command!r}.")
        unknown = [a for a in self.algos if a not in ALGORITHMS]
        if unknown:
            raise ConfigurationError(
                f"Unknown algorithm(s) {unknown}; choose from {list(ALGORITHMS)}."
            )
        if self.num_graphs < 1 or self.chunk_size < 1 or self.workers < 1:
            raise ConfigurationError("num_graphs, chunk_size and workers must be >= 1.")
        if self.grid < 2:
            raise ConfigurationError("The grid needs at least 2 points per axis.")
        if self.iterations < 1:
            raise ConfigurationError("At least one iteration is required.")
        if not 0 <= self.mu < 1:
            raise ConfigurationError(f"Momentum must lie in [0, 1), got {self.mu}.")

    def settings(self) -> Settings:
        """Configuration echo for CSV headers; scheduling settings are left out."""
        s = Settings()
        for f in dataclasses.fields(self):
            if f.name == "workers":
                continue
            v = getattr(self, f.name)
            s[f.name] = dict(sorted(v.items())) if isinstance(v, dict) else v
        return s

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                loss_kind=LossKind(self.loss),
                mode=Mode(self.mode),
                task=TaskKind(self.task),
                alpha=self.alpha,
                iterations=self.iterations,
                batch_size=self.batch_size,
                steps=self.steps,
                learning_rate=self.learning_rate,
                seed=self.seed,
                restarts=self.restarts,
            )
        except ValueError as e:
            if isinstance(e, ConfigurationError):
                raise
            raise ConfigurationError(str(e)) from e


def load_models(cfg: ExperimentConfig, task: TaskKind) -> Dict[str, MLPParams]:
    """Load the model of every neural algorithm in ``cfg.algos``."""
    models = {}
    for algo in cfg.algos:
        if algo not in _NEURAL_MODES:
            continue
        path = cfg.models.get(algo)
        if path is None:
            raise ConfigurationError(
                f"Algorithm '{algo}' needs a model: pass --model {algo}=<path>."
            )
        if not os.path.isfile(path):
            raise ConfigurationError(
                f"Model file for algorithm '{algo}' not found: {path}"
            )
        params = load_params(path)
        expected = TrainConfig(
            loss_kind=LossKind.KL, mode=_NEURAL_MODES[algo], task=task
        ).n_in
        if params.n_in != expected:
            raise ConfigurationError(
                f"Model for '{algo}' has {params.n_in} inputs; "
                f"{task.value} runs need {expected}."
            )
        models[algo] = params
    return models


def _run_exact(graphs, cfg, models, side) -> BeliefSet:
    return exact_marginals(graphs).as_beliefs()


def _run_cccp(graphs, cfg, models, side) -> BeliefSet:
    return cccp_minimize(graphs)[0]


def _run_spa(graphs, cfg, models, side, momentum: float = 0.0) -> BeliefSet:
    run_cfg = RunConfig(
        iterations=cfg.iterations, momentum=momentum, keep_history=False
    )
    return run_message_passing(graphs, run_cfg).beliefs


def _run_spa_mu(graphs, cfg, models, side) -> BeliefSet:
    return _run_spa(graphs, cfg, models, side, momentum=cfg.mu)


def _run_cycbp_e(graphs, cfg, models, side) -> BeliefSet:
    run_cfg = RunConfig(
        iterations=cfg.iterations,
        update_rule=UpdateRule.NEURAL_EXTRINSIC,
        keep_history=False,
    )
    return run_message_passing(graphs, run_cfg, models["cycbp_e"], side).beliefs


def _run_cycbp(graphs, cfg, models, side) -> BeliefSet:
    run_cfg = RunConfig(
        iterations=cfg.iterations, update_rule=UpdateRule.NEURAL, keep_history=False
    )
    return run_message_passing(
        cluster_unaries(graphs), run_cfg, models["cycbp"], side
    ).beliefs


# name -> runner(graphs, cfg, models, side); key order is the report order
RUNNERS: Dict[str, Callable[..., BeliefSet]] = {
    "spa": _run_spa,
    "spa_mu": _run_spa_mu,
    "cccp": _run_cccp,
    "cycbp_e": _run_cycbp_e,
    "cycbp": _run_cycbp,
    "exact": _run_exact,
}
ALGORITHMS = tuple(RUNNERS)


def run_algorithm(
    name: str,
    graphs: GraphBatch,
    cfg: ExperimentConfig,
    models: Dict[str, MLPParams],
    side: Optional[np.ndarray] = None,
) -> BeliefSet:
    runner = RUNNERS.get(name)
    if runner is None:
        raise ConfigurationError(f"Unknown algorithm {name!r}.")
    return runner(graphs, cfg, models, side)


def _chunks(total: int, size: int) -> List[int]:
    return [min(size, total - start) for start in range(0, total, size)]


def _evaluate(
    cfg: ExperimentConfig,
    samplers: Sequence[FunctionTask],
    metrics,
    prefix: str = "",
) -> Dict[str, Dict[str, np.ndarray]]:
    """Evaluate every algorithm on every sampled chunk and join in chunk order."""
    joins = {}
    for algo in cfg.algos:
        join = ConcatenateTask(name=f"{prefix}{algo}")
        for k, sampler in enumerate(samplers):
            t = FunctionTask(
                functools.partial(metrics, algo), name=f"{prefix}{algo}-{k}"
            )
            t.requires(sampler)
            join.requires(t)
        joins[algo] = join

    results = Workflow(*joins.values()).compute(num_workers=cfg.workers)
    return {algo: results[join.name] for algo, join in joins.items()}


def _ising_chunk(seed: int, S: float, chunk: int, size: int) -> GraphBatch:
    return sample_spin_glasses(S, size, substream(seed, "ising", chunk))


def _graph_metrics(cfg, models, algo: str, graphs: GraphBatch) -> Dict[str, np.ndarray]:
    beliefs = run_algorithm(algo, graphs, cfg, models)
    return {
        "kl": np.atleast_1d(mean_kl_to_exact(graphs, beliefs)),
        "fbethe": np.atleast_1d(bethe_free_energy(graphs, beliefs)),
        "ll": np.atleast_1d(consistency_distance(beliefs)),
    }


def cmd_ising_table(cfg: ExperimentConfig) -> List[Tuple[Any, ...]]:
    """Mean and spread of node KL, mean Bethe free energy and consistency
    distance on seeded spin glasses; all algorithms see the same graphs."""
    models = load_models(cfg, TaskKind.ISING)
    samplers = [
        FunctionTask(
            functools.partial(_ising_chunk, cfg.seed, cfg.s, k, size),
            name=f"graphs-{k}",
        )
        for k, size in enumerate(_chunks(cfg.num_graphs, cfg.chunk_size))
    ]
    results = _evaluate(cfg, samplers, functools.partial(_graph_metrics, cfg, models))

    rows = []
    for algo in cfg.algos:
        m = results[algo]
        std = float(np.std(m["kl"], ddof=1)) if len(m["kl"]) > 1 else 0.0
        rows.append(
            (
                algo,
                float(np.mean(m["kl"])),
                std,
                float(np.mean(m["fbethe"])),
                float(np.mean(m["ll"])),
            )
        )
        logger.info("%s: mean KL %.4g over %d graphs", algo, rows[-1][1], len(m["kl"]))

    if cfg.out is not None:
        write_csv(
            cfg.out,
            ["algo", "mean_kl", "std_kl", "mean_fbethe", "mean_ll"],
            rows,
            cfg.settings(),
        )
    return rows


def _constant_grid(values: np.ndarray, start: int, stop: int) -> GraphBatch:
    theta, j = np.meshgrid(values, values, indexing="ij")
    theta, j = theta.ravel()[start:stop], j.ravel()[start:stop]
    pairs = complete_pairs(4)
    return GraphBatch(
        4,
        pairs,
        np.repeat(theta[:, None], 4, axis=1),
        np.repeat(j[:, None], len(pairs), axis=1),
    )


def cmd_ising_heatmap(cfg: ExperimentConfig) -> List[Tuple[float, float, float]]:
    """Node KL of one algorithm over a constant (theta, J) grid on [-2, 2]^2."""
    if len(cfg.algos) != 1:
        raise ConfigurationError("The heatmap takes exactly one algorithm.")
    models = load_models(cfg, TaskKind.ISING)
    values = np.linspace(-2.0, 2.0, cfg.grid)
    total = cfg.grid ** 2
    samplers, start = [], 0
    for k, size in enumerate(_chunks(total, cfg.chunk_size)):
        samplers.append(
            FunctionTask(
                functools.partial(_constant_grid, values, start, start + size),
                name=f"grid-{k}",
            )
        )
        start += size
    kl = _evaluate(cfg, samplers, functools.partial(_graph_metrics, cfg, models))[
        cfg.algos[0]
    ]["kl"]

    theta, j = np.meshgrid(values, values, indexing="ij")
    rows = [
        (float(t), float(c), float(v))
        for t, c, v in zip(theta.ravel(), j.ravel(), kl)
    ]
    if cfg.out is not None:
        write_csv(cfg.out, ["theta", "j", "kl"], rows, cfg.settings())
    return rows


def cmd_dump_mapping(cfg: ExperimentConfig) -> List[Tuple[float, float, float, float]]:
    """Learned extrinsic factor mapping next to the sum-product rule.

    Couplings run over 7 values in [-2, 2] and incoming LLRs over ``grid``
    values in [-25, 25].
    """
    models = load_models(dataclasses.replace(cfg, algos=("cycbp_e",)), TaskKind.ISING)
    params = models["cycbp_e"]

    es = np.linspace(-2.0, 2.0, 7)
    llrs = np.linspace(-25.0, 25.0, cfg.grid)
    e, llr = np.meshgrid(es, llrs, indexing="ij")
    e, llr = e.ravel(), llr.ravel()
    spa = spa_fn_update(e, llr)
    learned = neural_fn_update_extrinsic(params, llr, e)

    rows = [tuple(map(float, r)) for r in zip(e, llr, spa, learned)]
    if cfg.out is not None:
        write_csv(
            cfg.out,
            ["e", "llr_in", "llr_out_spa", "llr_out_model"],
            rows,
            cfg.settings(),
        )
    return rows


def cmd_train(cfg: ExperimentConfig) -> TrainResult:
    """Train a model; writes ``<out>`` and its curve as ``<stem>.curve.csv``."""
    if cfg.out is None:
        raise ConfigurationError("Training needs --out for the model file.")
    tcfg = cfg.train_config()
    result = train(tcfg)

    for outcome in result.report:
        logger.info(
            "restart %d: %s after %d steps, validation %.6g",
            outcome.restart + 1,
            "diverged" if outcome.diverged else "finished",
            outcome.steps_run,
            outcome.val_loss,
        )

    out = pathlib.Path(cfg.out)
    mkdir_safe(str(out.parent))
    save_params(result.params, cfg.out)
    write_curve_csv(
        result.curve, str(out.with_name(out.stem + ".curve.csv")), cfg.settings()
    )
    return result


def _channel_chunk(seed: int, point: int, chunk: int, size: int, ebno_db: float):
    rng = substream(seed, "channel", point, chunk)
    return sample_detection_batch(size, ebno_db, rng)


def _bit_metrics(cfg, models, algo: str, sample) -> Dict[str, np.ndarray]:
    groups, symbols, side = sample
    llrs = np.zeros(symbols.shape)
    for idx, graphs in groups:
        llrs[idx] = run_algorithm(algo, graphs, cfg, models, side[idx]).llrs
    bits = np.mean(np.logaddexp(0.0, -symbols * llrs), axis=-1) / np.log(2.0)
    return {"bits": bits}


def cmd_channel_sweep(cfg: ExperimentConfig) -> List[Tuple[float, str, float]]:
    """1 - BMI of every algorithm over the ebno list on random ISI channels."""
    models = load_models(cfg, TaskKind.CHANNEL)
    rows = []
    for p, ebno in enumerate(cfg.ebno):
        samplers = [
            FunctionTask(
                functools.partial(_channel_chunk, cfg.seed, p, k, size, ebno),
                name=f"channels-{p}-{k}",
            )
            for k, size in enumerate(_chunks(cfg.num_graphs, cfg.chunk_size))
        ]
        results = _evaluate(
            cfg, samplers, functools.partial(_bit_metrics, cfg, models), prefix=f"{p}-"
        )
        for algo in cfg.algos:
            value = float(np.mean(results[algo]["bits"]))
            rows.append((float(ebno), algo, value))
            logger.info("%s dB %s: 1 - BMI %.4g", ebno, algo, value)

    if cfg.out is not None:
        write_csv(cfg.out, ["ebno_db", "algo", "one_minus_bmi"], rows, cfg.settings())
    return rows
