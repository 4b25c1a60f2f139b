"""Round orchestration: client sampling, weighted aggregation, and pluggable
server optimizers driven by the aggregated update as an antigradient.

The same loop runs both the partially local algorithm (only global blocks
aggregated; local parameters rebuilt on clients every round) and the
full-aggregation baseline (``aggregate_local=True``: the server also stores
every client's local block, overwritten by its owner's update).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .client import (
    ClientHyper,
    ClientUpdateResult,
    RowDelta,
    SplitPolicy,
    run_client_round,
)
from .core import (
    Blocks,
    ClientDataset,
    ModelSpec,
    ParamBlock,
    RngStreams,
    blocks_size,
    finalize_metrics,
    merge_metrics,
)
from .errors import ConfigError, NumericalError, RoundError, ShapeMismatchError
from .evaluation import CommRecord

__all__ = [
    "ServerOptimizer",
    "RoundReport",
    "TrainResult",
    "sample_clients",
    "aggregate",
    "server_step",
    "run_training",
]

OPTIMIZER_KINDS = ("sgd", "adagrad", "yogi")


@dataclass
class ServerOptimizer:
    """Server-side optimizer state; ``sgd`` is stateless and applies the
    weighted update directly, the adaptive variants treat its negation as a
    gradient."""

    kind: str = "sgd"
    eta_s: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    first_moment: list[np.ndarray] | None = None
    second_moment: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigError(f"unknown server optimizer {self.kind!r}")
        if self.eta_s <= 0:
            raise ConfigError("eta_s must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1/beta2 must be in [0, 1)")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")

    def fresh(self) -> "ServerOptimizer":
        return replace(self, first_moment=None, second_moment=None)


@dataclass
class RoundReport:
    round: int
    sampled_clients: list[int]
    total_weight: float
    train_metrics: dict[str, float]
    comm_params_this_round: int
    weighted_delta: list[np.ndarray] | None = None


@dataclass
class TrainResult:
    global_params: list[ParamBlock]
    reports: list[RoundReport]
    comm_records: list[CommRecord]
    local_store: dict[int, list[ParamBlock]] | None = None


def sample_clients(
    population: Sequence[int], m: int, streams: RngStreams, round_idx: int
) -> list[int]:
    """Uniform sample without replacement, deterministic in (seed, round),
    returned ascending."""
    if m > len(population):
        raise ConfigError(f"cannot sample {m} clients from {len(population)}")
    rng = streams.generator(round_idx, "client_sample")
    picks = rng.permutation(len(population))[:m]
    return sorted(population[i] for i in picks)


def aggregate(
    results: Sequence[ClientUpdateResult], template: Blocks
) -> tuple[list[np.ndarray], float]:
    """Weighted mean of client deltas, summed in ascending client-id order.

    Accepts dense and row-sparse deltas interchangeably; returns one flat
    array per global block plus the total weight n = sum(n_i).
    """
    if not results:
        raise RoundError("aggregation over an empty result list")
    ordered = sorted(results, key=lambda r: r.client_id)
    total = float(sum(r.n_i for r in ordered))
    if total <= 0:
        raise RoundError("aggregation weights sum to zero")
    acc = [np.zeros(b.shape) for b in template]
    for res in ordered:
        if len(res.delta) != len(template):
            raise ShapeMismatchError(
                f"client {res.client_id}: {len(res.delta)} delta blocks vs "
                f"{len(template)} global blocks"
            )
        w = res.n_i / total
        for bi, entry in enumerate(res.delta):
            if isinstance(entry, RowDelta):
                if len(entry.rows):
                    np.add.at(acc[bi], entry.rows, w * entry.values)
            else:
                flat = np.asarray(entry, dtype=np.float64).ravel()
                if flat.size != acc[bi].size:
                    raise ShapeMismatchError(
                        f"client {res.client_id}: delta of {flat.size} values "
                        f"vs block of {acc[bi].size}"
                    )
                acc[bi] += w * flat.reshape(acc[bi].shape)
    return [a.ravel() for a in acc], total


def server_step(
    opt: ServerOptimizer, g: Blocks, weighted_delta: Sequence[np.ndarray]
) -> list[ParamBlock]:
    """Apply one server update; mutates the optimizer's moment state."""
    if len(weighted_delta) != len(g):
        raise ShapeMismatchError("weighted delta does not match global blocks")
    if opt.kind == "sgd":
        return [
            ParamBlock(b.name, b.values + opt.eta_s * np.asarray(d).ravel(), b.shape)
            for b, d in zip(g, weighted_delta)
        ]

    if opt.first_moment is None:
        opt.first_moment = [np.zeros(b.values.size) for b in g]
        if opt.kind == "yogi":
            opt.second_moment = [np.full(b.values.size, opt.tau**2) for b in g]
        else:
            opt.second_moment = [np.zeros(b.values.size) for b in g]

    out = []
    for bi, (b, delta) in enumerate(zip(g, weighted_delta)):
        d = -np.asarray(delta, dtype=np.float64).ravel()
        m = opt.first_moment[bi]
        v = opt.second_moment[bi]
        m[:] = opt.beta1 * m + (1.0 - opt.beta1) * d
        if opt.kind == "adagrad":
            v[:] = v + d * d
        else:  # yogi
            v[:] = v - (1.0 - opt.beta2) * d * d * np.sign(v - d * d)
        out.append(
            ParamBlock(b.name, b.values - opt.eta_s * m / (np.sqrt(v) + opt.tau), b.shape)
        )
    return out


def run_training(
    spec: ModelSpec,
    clients: dict[int, ClientDataset],
    *,
    rounds: int,
    clients_per_round: int,
    policy: SplitPolicy,
    hyper: ClientHyper,
    server_opt: ServerOptimizer,
    streams: RngStreams,
    algorithm: str = "fedrecon",
    aggregate_local: bool = False,
    initial_global: Blocks | None = None,
    eval_fn: Callable[[int, Blocks, dict | None], None] | None = None,
    eval_every: int = 0,
    retain_deltas: bool = False,
) -> TrainResult:
    """Run `rounds` rounds of sample -> per-client split/reconstruct/update
    -> weighted aggregation -> server step.

    With ``aggregate_local`` the server holds every client's local block;
    sampled clients start from their stored block, train all parameters
    jointly on their full dataset, and their stored block is overwritten by
    the result (owner-overwrite aggregation).
    """
    population = sorted(clients)
    g = list(initial_global) if initial_global is not None else spec.init_global(
        streams.generator("global_init")
    )
    opt = server_opt.fresh()

    local_store: dict[int, list[ParamBlock]] | None = None
    eff_policy, eff_hyper = policy, hyper
    if aggregate_local:
        local_store = {
            cid: spec.init_local(streams.generator(cid, "server_local_init"))
            for cid in population
        }
        # Full aggregation: no support/query split, all parameters stepped
        # together on the client's whole dataset.
        eff_policy = SplitPolicy(kind="no_split")
        eff_hyper = replace(hyper, joint_training=True)

    g_size = blocks_size(g)
    reports: list[RoundReport] = []
    comm_records: list[CommRecord] = []

    for t in range(rounds):
        sampled = sample_clients(population, clients_per_round, streams, t)
        results = []
        for cid in sampled:
            try:
                results.append(
                    run_client_round(
                        spec,
                        g,
                        clients[cid],
                        eff_policy,
                        eff_hyper,
                        streams,
                        t,
                        initial_local=local_store[cid] if aggregate_local else None,
                    )
                )
            except NumericalError as e:
                raise NumericalError(f"round {t}, client {cid}: {e}") from e
        weighted_delta, total = aggregate(results, g)
        g = server_step(opt, g, weighted_delta)
        if aggregate_local:
            for res in results:
                if res.updated_local is not None:
                    local_store[res.client_id] = res.updated_local

        local_total = (
            sum(blocks_size(local_store[cid]) for cid in sampled) if aggregate_local else 0
        )
        comm = CommRecord(
            algorithm=algorithm,
            round=t,
            num_clients=len(sampled),
            global_params=g_size,
            local_params_total=local_total,
        )
        comm_records.append(comm)
        reports.append(
            RoundReport(
                round=t,
                sampled_clients=sampled,
                total_weight=total,
                train_metrics=finalize_metrics(
                    merge_metrics(res.query_metrics for res in results)
                ),
                comm_params_this_round=comm.params_total,
                weighted_delta=weighted_delta if retain_deltas else None,
            )
        )
        if eval_fn is not None and eval_every > 0 and (t + 1) % eval_every == 0:
            eval_fn(t, g, local_store)

    return TrainResult(
        global_params=g, reports=reports, comm_records=comm_records, local_store=local_store
    )
