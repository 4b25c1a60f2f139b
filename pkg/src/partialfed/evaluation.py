"""Evaluation regimes and the communication ledger.

Standard evaluation scores seen clients with their stored local parameters;
reconstruction evaluation scores (typically unseen) clients by first
rebuilding local parameters from their support half, exactly as clients do
during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .client import ClientHyper, SplitPolicy, reconstruct, split_dataset
from .core import (
    Blocks,
    ClientDataset,
    Metric,
    ModelSpec,
    RngStreams,
    finalize_metrics,
    merge_metrics,
)
from .errors import ConfigError, EvaluationError

__all__ = [
    "EvalMode",
    "EvalResult",
    "standard_eval",
    "recon_eval",
    "CommRecord",
    "comm_ledger_report",
    "params_to_reach",
]


@dataclass(frozen=True)
class EvalMode:
    kind: str = "recon_eval"
    recon_hyper: ClientHyper | None = None
    repeats: int = 1
    clients_per_repeat: int = 50

    def __post_init__(self):
        if self.kind not in ("standard_eval", "recon_eval"):
            raise ConfigError(f"unknown eval kind {self.kind!r}")
        if self.repeats < 1 or self.clients_per_repeat < 1:
            raise ConfigError("repeats and clients_per_repeat must be positive")
        if self.kind == "recon_eval" and self.recon_hyper is None:
            raise ConfigError("recon_eval needs reconstruction hyperparameters")


@dataclass
class EvalResult:
    metrics: dict[str, float]
    per_repeat: list[dict[str, float]] = field(default_factory=list)


def _finalize_with_macro(per_client: list[dict[str, Metric]]) -> dict[str, float]:
    out = finalize_metrics(merge_metrics(per_client))
    finals = [finalize_metrics(stats) for stats in per_client]
    for key in list(out):
        vals = [f[key] for f in finals if key in f]
        if vals:
            out[key + "_macro"] = float(np.mean(vals))
    return out


def standard_eval(
    spec: ModelSpec,
    g: Blocks,
    stored_locals: Mapping[int, Blocks],
    eval_sets: Sequence[ClientDataset],
) -> dict[str, float]:
    """Score each client's held-out examples with its stored local
    parameters; metrics weight every example equally, with per-client
    macro-averages emitted alongside."""
    per_client = []
    for ds in eval_sets:
        if ds.n == 0:
            continue
        if ds.client_id not in stored_locals:
            raise EvaluationError(
                f"client {ds.client_id} has no stored local parameters; "
                "use recon_eval for unseen clients"
            )
        per_client.append(spec.metrics(g, stored_locals[ds.client_id], ds.batch()))
    if not per_client:
        raise EvaluationError("no clients with evaluation examples")
    return _finalize_with_macro(per_client)


def recon_eval(
    spec: ModelSpec,
    g: Blocks,
    clients: Sequence[ClientDataset],
    policy: SplitPolicy,
    mode: EvalMode,
    streams: RngStreams,
    *,
    namespace: str = "eval",
) -> EvalResult:
    """Reconstruct-then-score: per client, split, rebuild local parameters
    from the support half, and score the query half.  Repeats over fresh
    client samples; the result carries the across-repeat mean and stddev.
    Never reads or writes any training state."""
    if mode.recon_hyper is None:
        raise ConfigError("recon_eval needs reconstruction hyperparameters")
    hyper = mode.recon_hyper
    per_repeat: list[dict[str, float]] = []
    take = min(mode.clients_per_repeat, len(clients))
    for rep in range(mode.repeats):
        sample_rng = streams.generator(rep, namespace + ":sample")
        chosen = sorted(sample_rng.choice(len(clients), size=take, replace=False).tolist())
        per_client = []
        for ci in chosen:
            ds = clients[ci]
            cid = ds.client_id
            dsx = split_dataset(ds, policy, streams.generator(rep, cid, namespace + ":split"))
            l, _ = reconstruct(
                spec,
                g,
                dsx,
                hyper,
                streams.generator(rep, cid, namespace + ":local_init"),
                streams.generator(rep, cid, namespace + ":recon_batches"),
            )
            per_client.append(spec.metrics(g, l, dsx.query_batch()))
        per_repeat.append(_finalize_with_macro(per_client))

    keys = sorted({k for rep in per_repeat for k in rep})
    metrics: dict[str, float] = {}
    for k in keys:
        vals = np.array([rep[k] for rep in per_repeat if k in rep])
        metrics[k] = float(vals.mean())
        metrics[k + "_stddev"] = float(vals.std())
    return EvalResult(metrics=metrics, per_repeat=per_repeat)


# ---------------------------------------------------------------------------
# Communication accounting (parameters, not bytes)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CommRecord:
    """Per-round ledger entry: parameters sent to and from all clients.

    Partially local rounds move 2|g| per client; full-aggregation rounds
    move 2(|g| + |l_i|) per client i.
    """

    algorithm: str
    round: int
    num_clients: int
    global_params: int
    local_params_total: int

    @property
    def params_down(self) -> int:
        return self.num_clients * self.global_params + self.local_params_total

    @property
    def params_up(self) -> int:
        return self.num_clients * self.global_params + self.local_params_total

    @property
    def params_total(self) -> int:
        return self.params_down + self.params_up


def comm_ledger_report(records: Sequence[CommRecord]) -> dict[str, dict]:
    """Cumulative parameters communicated per algorithm, in round order."""
    report: dict[str, dict] = {}
    for rec in records:
        entry = report.setdefault(rec.algorithm, {"rounds": [], "per_round": []})
        entry["rounds"].append(rec.round)
        entry["per_round"].append(rec.params_total)
    for entry in report.values():
        entry["cumulative"] = np.cumsum(entry["per_round"]).tolist()
        entry["total"] = int(entry["cumulative"][-1]) if entry["cumulative"] else 0
    return report


def params_to_reach(
    cumulative_params: Sequence[int],
    metric_values: Sequence[float],
    level: float,
    *,
    higher_is_better: bool = True,
) -> int | None:
    """Cumulative parameter count at which the metric first reaches `level`."""
    for params, value in zip(cumulative_params, metric_values):
        if (value >= level) if higher_is_better else (value <= level):
            return int(params)
    return None
