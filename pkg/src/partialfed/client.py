"""Client-side computations: dataset split, local-parameter reconstruction,
global-parameter update, and the first-order meta-gradient verification.

All operations are pure given their inputs and the explicit generators, so
per-client work is replayable and order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .core import (
    Blocks,
    ClientDataset,
    Metric,
    ModelSpec,
    ParamBlock,
    RngStreams,
    axpy_blocks,
    copy_blocks,
)
from .errors import ConfigError, DataError, NumericalError

__all__ = [
    "SplitPolicy",
    "ClientHyper",
    "RowDelta",
    "ClientUpdateResult",
    "split_dataset",
    "batch_schedule",
    "reconstruct",
    "client_update",
    "run_client_round",
    "delta_to_dense",
    "MetaGradientReport",
    "verify_first_order_meta_gradient",
]

SPLIT_KINDS = ("half_disjoint", "by_timestamp_half", "no_split")


@dataclass(frozen=True)
class SplitPolicy:
    kind: str = "half_disjoint"
    support_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise ConfigError(f"unknown split kind {self.kind!r}")
        if not 0.0 < self.support_fraction <= 1.0:
            raise ConfigError("support_fraction must be in (0, 1]")


@dataclass(frozen=True)
class ClientHyper:
    k_r: int = 1
    k_u: int = 1
    eta_r: float = 0.1
    eta_u: float = 0.1
    batch_size: int = 5
    joint_training: bool = False

    def __post_init__(self):
        if self.k_r < 0:
            raise ConfigError("k_r must be nonnegative")
        if self.k_u < 1:
            raise ConfigError("k_u must be positive")
        # Zero rates are legal no-op limits (a zero-rate update returns a
        # zero delta); negative rates are configuration mistakes.
        if self.eta_r < 0 or self.eta_u < 0:
            raise ConfigError("learning rates must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")


def split_dataset(
    data: ClientDataset, policy: SplitPolicy, rng: np.random.Generator
) -> ClientDataset:
    """Populate support/query indices; single-example clients fall back to
    no_split so they can still contribute an update."""
    n = data.n
    if n == 0:
        raise DataError(f"client {data.client_id}: empty dataset")
    if policy.kind == "no_split" or n == 1:
        idx = np.arange(n)
        return replace(data, support_idx=idx, query_idx=idx.copy())

    # Support size: ceil(n * fraction), capped so the query set stays nonempty.
    k = min(max(1, math.ceil(n * policy.support_fraction)), n - 1)
    if policy.kind == "half_disjoint":
        order = rng.permutation(n)
    else:  # by_timestamp_half: earlier examples become support
        order = np.argsort(data.timestamps, kind="stable")
    support = np.sort(order[:k])
    query = np.sort(order[k:])
    return replace(data, support_idx=support, query_idx=query)


def batch_schedule(
    idx: np.ndarray, batch_size: int, steps: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Shuffle once, chunk into minibatches, and cycle until `steps` batches."""
    if len(idx) == 0:
        raise DataError("cannot batch an empty index set")
    perm = rng.permutation(idx)
    chunks = [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]
    return [chunks[s % len(chunks)] for s in range(steps)]


def reconstruct(
    spec: ModelSpec,
    g: Blocks,
    data: ClientDataset,
    hyper: ClientHyper,
    init_rng: np.random.Generator,
    batch_rng: np.random.Generator,
) -> tuple[list[ParamBlock], list[float]]:
    """Gradient-descend freshly initialized local parameters on the support
    set with the global parameters frozen; k_r=0 returns the raw init."""
    l = spec.init_local(init_rng)
    trace: list[float] = []
    if hyper.k_r == 0 or not l:
        return l, trace
    if data.support_idx is None:
        raise DataError("dataset has no support split")
    batches = batch_schedule(data.support_idx, hyper.batch_size, hyper.k_r, batch_rng)
    for step, bidx in enumerate(batches):
        batch = data.batch(bidx)
        step_loss = spec.loss(g, l, batch)
        if not math.isfinite(step_loss):
            raise NumericalError(f"non-finite loss at reconstruction step {step}")
        grads = spec.grad_local(g, l, batch)
        try:
            l = axpy_blocks(l, -hyper.eta_r, grads)
        except NumericalError as e:
            raise NumericalError(f"reconstruction step {step}: {e}") from e
        trace.append(step_loss)
    return l, trace


@dataclass
class RowDelta:
    """Sparse per-block delta: only these rows differ from the base values."""

    rows: np.ndarray
    values: np.ndarray


@dataclass
class ClientUpdateResult:
    client_id: int
    delta: list
    n_i: int
    support_loss_trace: list[float] = field(default_factory=list)
    query_metrics: dict[str, Metric] = field(default_factory=dict)
    updated_local: list[ParamBlock] | None = None


def delta_to_dense(delta: list, template: Blocks) -> list[np.ndarray]:
    """Materialize a (possibly row-sparse) delta as flat arrays matching g."""
    out = []
    for entry, block in zip(delta, template):
        if isinstance(entry, RowDelta):
            dense = np.zeros(block.shape)
            np.add.at(dense, entry.rows, entry.values)
            out.append(dense.ravel())
        else:
            out.append(np.asarray(entry, dtype=np.float64).ravel())
    return out


def _dense_update(spec, g, l, data, hyper, batches):
    g_i = copy_blocks(g)
    for bidx in batches:
        batch = data.batch(bidx)
        grads = spec.grad_global(g_i, l, batch)
        local_grads = spec.grad_local(g_i, l, batch) if hyper.joint_training else None
        g_i = axpy_blocks(g_i, -hyper.eta_u, grads)
        if local_grads is not None:
            l = axpy_blocks(l, -hyper.eta_u, local_grads)
    delta = [gi.values - gb.values for gi, gb in zip(g_i, g)]
    return delta, l


def _sparse_update(spec, g, l, data, hyper, batches):
    # Working copy is an overlay of modified rows over the immutable base;
    # keeps per-client cost proportional to rows touched, not |g|.
    overlays: dict[int, dict[int, np.ndarray]] = {}
    bases = [b.array for b in g]

    def gather(block: int, rows: np.ndarray) -> np.ndarray:
        out = bases[block][rows].copy()
        ov = overlays.get(block)
        if ov:
            for k, r in enumerate(rows):
                hit = ov.get(int(r))
                if hit is not None:
                    out[k] = hit
        return out

    for bidx in batches:
        batch = data.batch(bidx)
        row_grads, local_grads = spec.sparse_grads(gather, l, batch, hyper.joint_training)
        for rg in row_grads:
            ov = overlays.setdefault(rg.block, {})
            base = bases[rg.block]
            for r, v in zip(rg.rows, rg.values):
                r = int(r)
                cur = ov.get(r)
                if cur is None:
                    cur = base[r].copy()
                ov[r] = cur - hyper.eta_u * v
        if local_grads is not None:
            l = axpy_blocks(l, -hyper.eta_u, local_grads)

    delta = []
    for bi, block in enumerate(g):
        ov = overlays.get(bi)
        if not ov:
            delta.append(RowDelta(np.zeros(0, dtype=np.int64), np.zeros((0,) + block.shape[1:])))
            continue
        rows = np.array(sorted(ov), dtype=np.int64)
        values = np.stack([ov[int(r)] for r in rows]) - bases[bi][rows]
        if not np.all(np.isfinite(values)):
            raise NumericalError("non-finite values in client update delta")
        delta.append(RowDelta(rows, values))
    return delta, l


def client_update(
    spec: ModelSpec,
    g: Blocks,
    l: Blocks,
    data: ClientDataset,
    hyper: ClientHyper,
    batch_rng: np.random.Generator,
) -> ClientUpdateResult:
    """k_u gradient steps on the global parameters over the query set, with
    the reconstructed local parameters treated as constants (unless
    joint_training steps them concurrently).  Returns the update delta and
    its weight n_i = |query set|."""
    if data.query_idx is None or len(data.query_idx) == 0:
        raise DataError(f"client {data.client_id}: empty query set")
    batches = batch_schedule(data.query_idx, hyper.batch_size, hyper.k_u, batch_rng)
    if spec.sparse_grads is not None:
        delta, l_out = _sparse_update(spec, g, l, data, hyper, batches)
    else:
        delta, l_out = _dense_update(spec, g, l, data, hyper, batches)
    return ClientUpdateResult(
        client_id=data.client_id,
        delta=delta,
        n_i=int(len(data.query_idx)),
        updated_local=l_out if hyper.joint_training else None,
    )


def run_client_round(
    spec: ModelSpec,
    g: Blocks,
    data: ClientDataset,
    policy: SplitPolicy,
    hyper: ClientHyper,
    streams: RngStreams,
    round_idx: int,
    *,
    initial_local: Blocks | None = None,
    namespace: str = "",
) -> ClientUpdateResult:
    """Split -> reconstruct -> update for one client in one round.

    ``initial_local`` skips reconstruction and starts from the given local
    parameters (the full-aggregation baseline path).  Stream names are
    derived from (round, client_id, purpose) so clients are independent.
    """
    cid = data.client_id

    def gen(purpose: str) -> np.random.Generator:
        return streams.generator(round_idx, cid, namespace + purpose)

    dsx = split_dataset(data, policy, gen("split"))
    if initial_local is not None:
        l, trace = copy_blocks(initial_local), []
    else:
        l, trace = reconstruct(spec, g, dsx, hyper, gen("local_init"), gen("recon_batches"))
    query_metrics = spec.metrics(g, l, dsx.query_batch())
    result = client_update(spec, g, l, dsx, hyper, gen("update_batches"))
    result.support_loss_trace = trace
    result.query_metrics = query_metrics
    return result


# ---------------------------------------------------------------------------
# First-order meta-gradient verification
# ---------------------------------------------------------------------------


@dataclass
class MetaGradientReport:
    """Numerics behind the single-step update identity.

    With one full-batch update step, the returned delta equals
    -eta_u * (gradient of the query loss in g at the reconstructed local
    parameters held fixed).  `first_order_max_rel_err` compares that
    gradient against finite differences of the query loss with the local
    parameters frozen.  The composite gradient differentiates through
    reconstruction (rebuilding from the same init); its gap to the
    first-order gradient is the dropped second-order contribution and is
    reported, not asserted.
    """

    first_order_grad: np.ndarray
    fd_fixed_local: np.ndarray
    composite_grad: np.ndarray
    first_order_max_rel_err: float
    composite_max_abs_gap: float
    composite_max_rel_gap: float


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(1e-8, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def verify_first_order_meta_gradient(
    spec: ModelSpec,
    g: Blocks,
    data: ClientDataset,
    hyper: ClientHyper,
    streams: RngStreams,
    *,
    round_idx: int = 0,
    eps: float = 1e-5,
) -> MetaGradientReport:
    """Check the one-step client update against both gradient readings.

    Requires k_u = 1; the query set is consumed as a single full batch.
    """
    if hyper.k_u != 1:
        raise ConfigError("verification requires k_u = 1")
    if hyper.eta_u <= 0:
        raise ConfigError("verification requires a positive eta_u")
    if data.support_idx is None or data.query_idx is None:
        raise DataError("dataset must be split before verification")
    cid = data.client_id
    full_batch = replace(hyper, batch_size=len(data.query_idx), k_u=1)

    def rebuild_local(g_probe: Blocks) -> list[ParamBlock]:
        # Reconstruction keeps the caller's k_r / eta_r / batch size; only the
        # update step is forced to a single full-batch pass.
        return reconstruct(
            spec,
            g_probe,
            data,
            hyper,
            streams.generator(round_idx, cid, "local_init"),
            streams.generator(round_idx, cid, "recon_batches"),
        )[0]

    l_fixed = rebuild_local(g)
    result = client_update(
        spec, g, l_fixed, data, full_batch, streams.generator(round_idx, cid, "update_batches")
    )
    dense = delta_to_dense(result.delta, g)
    first_order = np.concatenate([d / -full_batch.eta_u for d in dense]) if dense else np.zeros(0)

    query = data.query_batch()

    def query_loss(g_probe: Blocks, l_probe: Blocks) -> float:
        return spec.loss(g_probe, l_probe, query)

    def fd_over_g(value_fn: Callable[[Blocks], float]) -> np.ndarray:
        out = []
        for bi, block in enumerate(g):
            for j in range(block.values.size):
                plus = block.values.copy()
                plus[j] += eps
                minus = block.values.copy()
                minus[j] -= eps
                gp, gm = list(g), list(g)
                gp[bi] = ParamBlock(block.name, plus, block.shape)
                gm[bi] = ParamBlock(block.name, minus, block.shape)
                out.append((value_fn(gp) - value_fn(gm)) / (2.0 * eps))
        return np.asarray(out)

    fd_fixed = fd_over_g(lambda gp: query_loss(gp, l_fixed))
    fd_composite = fd_over_g(lambda gp: query_loss(gp, rebuild_local(gp)))

    return MetaGradientReport(
        first_order_grad=first_order,
        fd_fixed_local=fd_fixed,
        composite_grad=fd_composite,
        first_order_max_rel_err=_rel(first_order, fd_fixed),
        composite_max_abs_gap=float(np.max(np.abs(fd_composite - first_order)))
        if first_order.size
        else 0.0,
        composite_max_rel_gap=_rel(first_order, fd_composite),
    )
