"""Federated orchestration: agents, sampling, local SGD, aggregation, and
the end-to-end experiment loop.

One round: sample a subset of agents, train each on its own shard starting
from a snapshot of the global parameters, weight the resulting updates on
the probability simplex, reduce them in ascending agent-id order, evaluate
the new global model on the held-out test set, and emit telemetry.  Within
a round the sampled agents are mutually independent and may train on a
thread pool; the id-ordered reduction makes the result bitwise identical to
a sequential run.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import rng as streams
from .datamodules import LabeledDataset, PartitionPlan, Shard, partition_iid, partition_niid
from .numerics import (
    ModelSpec,
    NonFiniteError,
    TrainableMask,
    count_params,
    forward,
    init_params,
    loss_and_grad,
    per_sample_cross_entropy,
    sgd_step,
)
from .paramfile import read_params, write_params
from .telemetry import AgentRecord, NullSink, RoundReport, RssSample, TelemetrySink
from .profiler import Profiler

SAMPLER_KINDS = ("random",)
AGGREGATOR_KINDS = ("fedavg", "fedsgd")
WEIGHTINGS = ("uniform", "by_shard_size")

_WEIGHT_SUM_TOL = 1e-9


class FederatedError(ValueError):
    """Contract violation in the federated layer (bad config, bad inputs)."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite quantity; carries round/agent context."""


@dataclass(frozen=True)
class AgentState:
    """A simulated device: unique id, a private shard, open metadata."""

    id: int
    shard: Shard
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.id < 0:
            raise FederatedError(f"agent id must be >= 0, got {self.id}")
        if len(self.shard) == 0:
            raise FederatedError(f"agent {self.id} has an empty shard")


@dataclass
class AgentUpdate:
    """What an agent sends back: its delta (or gradient, under FedSGD), the
    aggregation weight assigned by the server, and per-epoch metrics."""

    agent_id: int
    delta: np.ndarray
    weight: float = 0.0
    local_metrics: list[tuple[int, float, float]] = field(default_factory=list)


@dataclass(frozen=True)
class GlobalModelState:
    """Global parameters after `round_index` completed rounds (0 = initial)."""

    round_index: int
    params: np.ndarray
    spec: ModelSpec


@dataclass(frozen=True)
class FLConfig:
    """Full experiment description; validated on construction."""

    num_agents: int
    global_epochs: int
    local_epochs: int
    sample_fraction: float
    lr: float
    model: ModelSpec
    seed: int
    sampler_kind: str = "random"
    aggregator_kind: str = "fedavg"
    weighting: str = "by_shard_size"
    batch_size: int = 32
    mask_mode: str = "scratch"
    pretrained_path: str | None = None
    partition_scheme: str = "iid"
    niid_factor: int = 1

    def __post_init__(self) -> None:
        if self.num_agents < 1:
            raise FederatedError(f"num_agents must be >= 1, got {self.num_agents}")
        if self.global_epochs < 1:
            raise FederatedError(f"global_epochs must be >= 1, got {self.global_epochs}")
        if self.local_epochs < 1:
            raise FederatedError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise FederatedError(
                f"sample_fraction must be in (0, 1], got {self.sample_fraction}"
            )
        if self.batch_size < 1:
            raise FederatedError(f"batch_size must be >= 1, got {self.batch_size}")
        if not math.isfinite(self.lr) or self.lr < 0.0:
            raise FederatedError(f"lr must be finite and >= 0, got {self.lr}")
        if self.sampler_kind not in SAMPLER_KINDS:
            raise FederatedError(f"unknown sampler kind {self.sampler_kind!r}")
        if self.aggregator_kind not in AGGREGATOR_KINDS:
            raise FederatedError(f"unknown aggregator kind {self.aggregator_kind!r}")
        if self.weighting not in WEIGHTINGS:
            raise FederatedError(f"unknown weighting {self.weighting!r}")
        if self.aggregator_kind == "fedsgd" and self.local_epochs != 1:
            raise FederatedError("fedsgd requires local_epochs=1")
        if self.mask_mode in ("finetune", "feature_extract") and not self.pretrained_path:
            raise FederatedError(f"mask mode {self.mask_mode!r} requires pretrained_path")
        if self.partition_scheme == "niid" and self.niid_factor < 1:
            raise FederatedError(f"niid_factor must be >= 1, got {self.niid_factor}")


@dataclass(frozen=True)
class ExperimentReport:
    """Outcome of one experiment: metric series plus the final parameters."""

    initial_loss: float
    initial_accuracy: float
    rounds: tuple[RoundReport, ...]
    final_params: np.ndarray
    trainable_params: int
    non_trainable_params: int

    @property
    def final_loss(self) -> float:
        return self.rounds[-1].global_loss

    @property
    def final_accuracy(self) -> float:
        return self.rounds[-1].global_accuracy

    def to_dict(self) -> dict:
        return {
            "initial_loss": self.initial_loss,
            "initial_accuracy": self.initial_accuracy,
            "final_loss": self.final_loss,
            "final_accuracy": self.final_accuracy,
            "trainable_params": self.trainable_params,
            "non_trainable_params": self.non_trainable_params,
            "rounds": [
                {
                    "t": r.round_index,
                    "sampled": list(r.sampled_ids),
                    "loss": r.global_loss,
                    "acc": r.global_accuracy,
                    "wall_ms": r.wall_time_ms,
                    "agg": r.aggregator_kind,
                }
                for r in self.rounds
            ],
        }


def sample_agents(
    agents: Sequence[AgentState], fraction: float, round_rng: np.random.Generator
) -> list[int]:
    """Choose max(1, ceil(K * fraction)) distinct agent ids uniformly without
    replacement from the round's seeded stream; returned sorted ascending."""
    if not agents:
        raise FederatedError("cannot sample from an empty agent list")
    if not 0.0 < fraction <= 1.0:
        raise FederatedError(f"fraction must be in (0, 1], got {fraction}")
    ids = np.array(sorted(a.id for a in agents), dtype=np.int64)
    if len(set(int(i) for i in ids)) != len(ids):
        raise FederatedError("agent ids must be unique")
    # The 1e-9 slack stops float representation error from inflating the
    # count when K * fraction is an exact integer (e.g. 100 * 0.07).
    m = max(1, math.ceil(len(ids) * fraction - 1e-9))
    chosen = round_rng.choice(ids, size=m, replace=False)
    return sorted(int(i) for i in chosen)


def local_train(
    global_state: GlobalModelState,
    agent: AgentState,
    dataset: LabeledDataset,
    local_epochs: int,
    batch_size: int,
    lr: float,
    mask: TrainableMask,
    agent_rng: np.random.Generator,
) -> AgentUpdate:
    """Run `local_epochs` of mini-batch SGD over the agent's shard, starting
    from a copy of the global parameters.

    Each epoch reshuffles the shard with the agent's per-round stream; the
    final short batch is kept.  Returns delta = local - global and exactly
    one (epoch, loss, accuracy) triple per epoch, sample-weighted over the
    epoch's batches.
    """
    if local_epochs < 1:
        raise FederatedError(f"local_epochs must be >= 1, got {local_epochs}")
    if batch_size < 1:
        raise FederatedError(f"batch_size must be >= 1, got {batch_size}")
    spec = global_state.spec
    shard_idx = agent.shard.indices
    n = shard_idx.size
    params = global_state.params.copy()
    metrics: list[tuple[int, float, float]] = []
    for epoch in range(1, local_epochs + 1):
        order = agent_rng.permutation(n)
        loss_sum = 0.0
        hit_sum = 0.0
        for lo in range(0, n, batch_size):
            sel = shard_idx[order[lo : lo + batch_size]]
            x = dataset.features[sel]
            y = dataset.labels[sel]
            try:
                loss, acc, grad = loss_and_grad(spec, params, x, y, mask)
                if not math.isfinite(loss):
                    raise NonFiniteError(f"loss is {loss}")
                params = sgd_step(params, grad, lr, mask)
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"non-finite value during local training (agent {agent.id}, "
                    f"round {global_state.round_index + 1}, epoch {epoch}): {exc}"
                ) from exc
            loss_sum += loss * sel.size
            hit_sum += acc * sel.size
        metrics.append((epoch, loss_sum / n, hit_sum / n))
    return AgentUpdate(agent_id=agent.id, delta=params - global_state.params, local_metrics=metrics)


def local_gradient(
    global_state: GlobalModelState,
    agent: AgentState,
    dataset: LabeledDataset,
    mask: TrainableMask,
) -> AgentUpdate:
    """FedSGD client step: one full-batch gradient over the whole shard,
    evaluated at the global parameters and carried as the delta payload."""
    sel = agent.shard.indices
    x = dataset.features[sel]
    y = dataset.labels[sel]
    loss, acc, grad = loss_and_grad(global_state.spec, global_state.params, x, y, mask)
    if not math.isfinite(loss):
        raise DivergenceError(
            f"non-finite loss during gradient computation (agent {agent.id}, "
            f"round {global_state.round_index + 1}, epoch 1)"
        )
    return AgentUpdate(agent_id=agent.id, delta=grad, local_metrics=[(1, loss, acc)])


def compute_weights(
    updates: Sequence[AgentUpdate],
    weighting: str,
    shard_sizes: Mapping[int, int],
) -> np.ndarray:
    """Aggregation weights on the simplex, aligned with `updates`.

    uniform: 1/m each; by_shard_size: shard size over the summed size of the
    sampled shards.
    """
    if not updates:
        raise FederatedError("need at least one update to compute weights")
    if weighting == "uniform":
        return np.full(len(updates), 1.0 / len(updates))
    if weighting == "by_shard_size":
        sizes = np.array([shard_sizes[u.agent_id] for u in updates], dtype=np.float64)
        total = sizes.sum()
        if total <= 0.0:
            raise FederatedError("zero total shard size")
        return sizes / total
    raise FederatedError(f"unknown weighting {weighting!r}")


def _check_update_shapes(global_params: np.ndarray, updates: Sequence[AgentUpdate]) -> None:
    if not updates:
        raise FederatedError("cannot aggregate an empty update list")
    for u in updates:
        if u.delta.shape != global_params.shape:
            raise FederatedError(
                f"agent {u.agent_id} delta has {u.delta.size} entries, "
                f"global model has {global_params.size}"
            )
    weight_sum = sum(u.weight for u in updates)
    if abs(weight_sum - 1.0) > _WEIGHT_SUM_TOL:
        raise FederatedError(f"update weights sum to {weight_sum!r}, expected 1")


def aggregate_fedavg(
    global_params: np.ndarray, updates: Sequence[AgentUpdate]
) -> np.ndarray:
    """Weighted-delta aggregation: out = global + sum_i weight_i * delta_i,
    reduced in ascending agent-id order so the result is deterministic."""
    _check_update_shapes(global_params, updates)
    out = global_params.copy()
    for u in sorted(updates, key=lambda u: u.agent_id):
        out += u.weight * u.delta
    if not np.isfinite(out).all():
        raise NonFiniteError("aggregated parameters are non-finite")
    return out


def aggregate_fedsgd(
    global_params: np.ndarray, updates: Sequence[AgentUpdate], lr: float
) -> np.ndarray:
    """One server-side SGD step on the weighted average of full-batch client
    gradients: out = global - lr * sum_i weight_i * g_i."""
    _check_update_shapes(global_params, updates)
    grad = np.zeros_like(global_params)
    for u in sorted(updates, key=lambda u: u.agent_id):
        grad += u.weight * u.delta
    out = global_params - lr * grad
    if not np.isfinite(out).all():
        raise NonFiniteError("aggregated parameters are non-finite")
    return out


def evaluate(
    global_state: GlobalModelState, test_dataset: LabeledDataset, batch_size: int
) -> tuple[float, float]:
    """Loss and accuracy over the full test set.  Per-sample losses are
    summed, so the result does not depend on the batch size."""
    if batch_size < 1:
        raise FederatedError(f"batch_size must be >= 1, got {batch_size}")
    n = test_dataset.n_samples
    loss_sum = 0.0
    hits = 0
    for lo in range(0, n, batch_size):
        x = test_dataset.features[lo : lo + batch_size]
        y = test_dataset.labels[lo : lo + batch_size]
        logits = forward(global_state.spec, global_state.params, x)
        loss_sum += float(per_sample_cross_entropy(logits, y).sum())
        hits += int(np.sum(np.argmax(logits, axis=1) == y))
    return loss_sum / n, hits / n


def _initial_params(config: FLConfig) -> np.ndarray:
    if config.mask_mode in ("finetune", "feature_extract"):
        params = read_params(config.pretrained_path)
        if params.size != config.model.total_params:
            raise FederatedError(
                f"pretrained file {config.pretrained_path} holds {params.size} "
                f"parameters, model needs {config.model.total_params}"
            )
        return params
    return init_params(config.model, streams.derive_seed(config.seed, streams.STREAM_INIT))


def _train_sampled(
    jobs: list[Callable[[], AgentUpdate]], threads: int
) -> list[AgentUpdate]:
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda job: job(), jobs))
    return [job() for job in jobs]


def run_experiment(
    config: FLConfig,
    train_dataset: LabeledDataset,
    test_dataset: LabeledDataset,
    sink: TelemetrySink | None = None,
    profiler: Profiler | None = None,
    threads: int = 1,
    rss_sampling: bool = False,
) -> ExperimentReport:
    """Run the full federated lifecycle: partition, init, then for each
    round sample / locally train / weight / aggregate / evaluate, emitting a
    RoundReport and per-epoch AgentRecords as it goes.

    The outcome is fully determined by (config, datasets): telemetry and
    thread count never influence the numbers.
    """
    sink = sink if sink is not None else NullSink()
    prof = profiler if profiler is not None else Profiler()
    spec = config.model
    if train_dataset.n_features != spec.input_dim:
        raise FederatedError(
            f"train dataset has {train_dataset.n_features} features, "
            f"model expects {spec.input_dim}"
        )
    if test_dataset.n_features != spec.input_dim:
        raise FederatedError(
            f"test dataset has {test_dataset.n_features} features, "
            f"model expects {spec.input_dim}"
        )
    if max(int(train_dataset.labels.max()), int(test_dataset.labels.max())) >= spec.num_classes:
        raise FederatedError("dataset labels exceed the model's class count")

    with prof.scope("partition"):
        plan = PartitionPlan(
            scheme=config.partition_scheme,
            num_agents=config.num_agents,
            niid_factor=config.niid_factor,
            seed=streams.derive_seed(config.seed, streams.STREAM_PARTITION),
        )
        if plan.scheme == "iid":
            shards = partition_iid(train_dataset, plan)
        else:
            shards = partition_niid(train_dataset, plan)
    agents = [AgentState(id=k, shard=shards[k]) for k in range(config.num_agents)]
    shard_sizes = {a.id: len(a.shard) for a in agents}
    if config.aggregator_kind == "fedsgd":
        largest = max(shard_sizes.values())
        if config.batch_size < largest:
            raise FederatedError(
                f"fedsgd needs full-shard batches: batch_size {config.batch_size} "
                f"< largest shard {largest}"
            )

    mask = TrainableMask.for_mode(config.mask_mode, spec)
    with prof.scope("init_model"):
        global_state = GlobalModelState(0, _initial_params(config), spec)
    with prof.scope("evaluate"):
        initial_loss, initial_acc = evaluate(global_state, test_dataset, config.batch_size)

    rounds: list[RoundReport] = []
    process = None
    if rss_sampling:
        import psutil

        process = psutil.Process()

    # Profiler scopes are kept flat and non-overlapping so that report
    # percentages of distinct phases never double-count.
    for t in range(1, config.global_epochs + 1):
        round_start = time.perf_counter()
        with prof.scope("sample"):
            round_rng = streams.derive_rng(config.seed, streams.STREAM_SAMPLING, t)
            selected = sample_agents(agents, config.sample_fraction, round_rng)

        snapshot = global_state
        jobs: list[Callable[[], AgentUpdate]] = []
        for agent_id in selected:
            agent = agents[agent_id]
            if config.aggregator_kind == "fedsgd":
                jobs.append(
                    lambda a=agent: local_gradient(snapshot, a, train_dataset, mask)
                )
            else:
                agent_rng = streams.derive_rng(
                    config.seed, streams.STREAM_SHUFFLE, t, agent_id
                )
                jobs.append(
                    lambda a=agent, r=agent_rng: local_train(
                        snapshot,
                        a,
                        train_dataset,
                        config.local_epochs,
                        config.batch_size,
                        config.lr,
                        mask,
                        r,
                    )
                )
        with prof.scope("local_train"):
            updates = _train_sampled(jobs, threads)

        weights = compute_weights(updates, config.weighting, shard_sizes)
        for u, w in zip(updates, weights):
            u.weight = float(w)

        with prof.scope("aggregate"):
            try:
                if config.aggregator_kind == "fedsgd":
                    new_params = aggregate_fedsgd(snapshot.params, updates, config.lr)
                else:
                    new_params = aggregate_fedavg(snapshot.params, updates)
            except NonFiniteError as exc:
                raise DivergenceError(f"round {t}: {exc}") from exc
            # Frozen entries must survive every round bit-for-bit; adding
            # a weighted zero can still flip the sign bit of -0.0, so
            # copy the original bits back.
            for start, stop in mask.frozen_ranges:
                new_params[start:stop] = snapshot.params[start:stop]
        global_state = GlobalModelState(t, new_params, spec)

        with prof.scope("evaluate"):
            loss, acc = evaluate(global_state, test_dataset, config.batch_size)

        report = RoundReport(
            round_index=t,
            sampled_ids=tuple(selected),
            global_loss=loss,
            global_accuracy=acc,
            wall_time_ms=int((time.perf_counter() - round_start) * 1000),
            aggregator_kind=config.aggregator_kind,
        )
        sink.emit(report)
        rounds.append(report)
        for u in updates:
            for epoch, train_loss, train_acc in u.local_metrics:
                sink.emit(
                    AgentRecord(
                        round_index=t,
                        agent_id=u.agent_id,
                        local_epoch=epoch,
                        train_loss=train_loss,
                        train_accuracy=train_acc,
                        shard_size=shard_sizes[u.agent_id],
                    )
                )
        if process is not None:
            sink.emit(RssSample(round_index=t, rss_bytes=process.memory_info().rss))

    sink.flush()
    counts = count_params(spec, mask)
    return ExperimentReport(
        initial_loss=initial_loss,
        initial_accuracy=initial_acc,
        rounds=tuple(rounds),
        final_params=global_state.params,
        trainable_params=counts.trainable,
        non_trainable_params=counts.non_trainable,
    )


def pretrain(
    spec: ModelSpec,
    dataset: LabeledDataset,
    epochs: int,
    lr: float,
    seed: int,
    out_path: str | Path,
    batch_size: int = 32,
) -> np.ndarray:
    """Centralized (non-federated) training that writes an FLPV parameter
    file for later finetune / feature_extract runs.  epochs=0 writes the
    seeded initialization unchanged."""
    if epochs < 0:
        raise FederatedError(f"epochs must be >= 0, got {epochs}")
    if dataset.n_features != spec.input_dim:
        raise FederatedError(
            f"dataset has {dataset.n_features} features, model expects {spec.input_dim}"
        )
    params = init_params(spec, streams.derive_seed(seed, streams.STREAM_INIT))
    mask = TrainableMask.for_mode("scratch", spec)
    shuffle_rng = streams.derive_rng(seed, streams.STREAM_PRETRAIN)
    n = dataset.n_samples
    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, batch_size):
            sel = order[lo : lo + batch_size]
            x = dataset.features[sel]
            y = dataset.labels[sel]
            try:
                loss, _acc, grad = loss_and_grad(spec, params, x, y, mask)
                if not math.isfinite(loss):
                    raise NonFiniteError(f"loss is {loss}")
                params = sgd_step(params, grad, lr, mask)
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"non-finite value during pretraining (epoch {epoch}): {exc}"
                ) from exc
    write_params(out_path, params)
    return params
