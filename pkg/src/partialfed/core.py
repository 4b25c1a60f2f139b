"""Parameter partitioning, the model abstraction, and deterministic randomness.

Every model in this package is a flat vector of 64-bit floats organised into
named blocks, partitioned into a *global* part (aggregated across clients)
and a *local* part (rebuilt on-device and never communicated).  All
randomness flows through :class:`RngStreams`, which derives an independent
generator from ``(seed, *parts)`` so that any computation can be replayed
bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, NumericalError, ShapeMismatchError

__all__ = [
    "fnv1a64",
    "round_half_away",
    "RngStreams",
    "ParamBlock",
    "PartitionedParams",
    "Example",
    "Batch",
    "ClientDataset",
    "Metric",
    "merge_metrics",
    "finalize_metrics",
    "RowGrad",
    "ModelSpec",
    "concat_params",
    "unflatten_params",
    "axpy_blocks",
    "copy_blocks",
    "blocks_size",
    "GradCheckReport",
    "check_gradients",
]

_U64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash; stable across platforms and Python versions."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & _U64
    return h


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer with .5 ties going away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


class RngStreams:
    """Named, independent random streams derived from a single 64-bit seed.

    ``generator(*parts)`` accepts ints and strings; identical parts always
    yield an identical `numpy` generator, so two runs with equal seeds
    produce identical number sequences regardless of call ordering
    elsewhere.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _U64

    def generator(self, *parts: int | str) -> np.random.Generator:
        key = [self.seed]
        for p in parts:
            if isinstance(p, str):
                key.append(fnv1a64(p.encode("utf-8")))
            else:
                key.append(int(p) & _U64)
        return np.random.default_rng(np.random.SeedSequence(key))

    def derive_seed(self, *parts: int | str) -> int:
        """A fresh 63-bit seed derived from this one; used for run repeats."""
        return int(self.generator(*parts).integers(0, 2**63))


@dataclass
class ParamBlock:
    """One named, flat slice of the model parameter vector."""

    name: str
    values: np.ndarray
    shape: tuple[int, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        self.shape = tuple(int(s) for s in self.shape)
        if any(s <= 0 for s in self.shape):
            raise ShapeMismatchError(f"block {self.name!r}: non-positive dim in {self.shape}")
        if math.prod(self.shape) != self.values.size:
            raise ShapeMismatchError(
                f"block {self.name!r}: shape {self.shape} incompatible with "
                f"{self.values.size} values"
            )
        if not np.all(np.isfinite(self.values)):
            raise NumericalError(f"block {self.name!r} contains non-finite values")

    @classmethod
    def of(cls, name: str, array: np.ndarray) -> "ParamBlock":
        array = np.asarray(array, dtype=np.float64)
        return cls(name, array.ravel().copy(), array.shape)

    @property
    def array(self) -> np.ndarray:
        """The values viewed in their declared shape (shares memory)."""
        return self.values.reshape(self.shape)

    def copy(self) -> "ParamBlock":
        return ParamBlock(self.name, self.values.copy(), self.shape)


@dataclass
class PartitionedParams:
    """A model's parameters split into a global and a local part."""

    global_blocks: list[ParamBlock]
    local_blocks: list[ParamBlock]

    def __post_init__(self):
        names = [b.name for b in self.global_blocks] + [b.name for b in self.local_blocks]
        if len(set(names)) != len(names):
            raise ShapeMismatchError(f"duplicate block names: {names}")


def concat_params(p: PartitionedParams) -> np.ndarray:
    """Flatten to one vector: global blocks then local blocks, declaration order."""
    parts = [b.values for b in p.global_blocks] + [b.values for b in p.local_blocks]
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def unflatten_params(template: PartitionedParams, vector: np.ndarray) -> PartitionedParams:
    """Inverse of :func:`concat_params` against a shape template."""
    vector = np.asarray(vector, dtype=np.float64).ravel()
    sizes = [b.values.size for b in template.global_blocks + template.local_blocks]
    if vector.size != sum(sizes):
        raise ShapeMismatchError(f"vector of length {vector.size} != {sum(sizes)}")
    out, offset = [], 0
    for b in template.global_blocks + template.local_blocks:
        out.append(ParamBlock(b.name, vector[offset : offset + b.values.size].copy(), b.shape))
        offset += b.values.size
    n_global = len(template.global_blocks)
    return PartitionedParams(out[:n_global], out[n_global:])


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, ParamBlock) else np.asarray(x, dtype=np.float64).ravel()


def axpy_blocks(dst: Sequence[ParamBlock], scale: float, src: Sequence) -> list[ParamBlock]:
    """dst + scale * src, block by block; src items may be blocks or arrays."""
    if len(dst) != len(src):
        raise ShapeMismatchError(f"{len(dst)} blocks vs {len(src)}")
    out = []
    for d, s in zip(dst, src):
        sv = _values(s)
        if sv.size != d.values.size:
            raise ShapeMismatchError(
                f"block {d.name!r}: {d.values.size} values vs src {sv.size}"
            )
        out.append(ParamBlock(d.name, d.values + scale * sv, d.shape))
    return out


def copy_blocks(blocks: Sequence[ParamBlock]) -> list[ParamBlock]:
    return [b.copy() for b in blocks]


def blocks_size(blocks: Sequence[ParamBlock]) -> int:
    return sum(b.values.size for b in blocks)


@dataclass
class Example:
    """A single training example; ``features`` is a task-specific encoding."""

    features: object
    target: float
    weight: float = 1.0
    timestamp: int = 0

    def __post_init__(self):
        if self.weight < 0:
            raise DataError(f"negative example weight {self.weight}")


@dataclass
class Batch:
    """Column-packed examples handed to ModelSpec procedures."""

    features: np.ndarray
    targets: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return len(self.targets)

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())


@dataclass
class ClientDataset:
    """One client's examples plus its support/query partition.

    Stored columnar for speed; :meth:`example` materialises the row view.
    ``support_idx``/``query_idx`` are populated by the split step.
    """

    client_id: int
    features: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    timestamps: np.ndarray
    support_idx: np.ndarray | None = None
    query_idx: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.targets)
        if len(self.features) != n or len(self.weights) != n or len(self.timestamps) != n:
            raise ShapeMismatchError(f"client {self.client_id}: ragged columns")
        if np.any(self.weights < 0):
            raise DataError(f"client {self.client_id}: negative example weight")

    @classmethod
    def from_examples(cls, client_id: int, examples: Sequence[Example]) -> "ClientDataset":
        return cls(
            client_id=client_id,
            features=np.asarray([e.features for e in examples]),
            targets=np.asarray([e.target for e in examples], dtype=np.float64),
            weights=np.asarray([e.weight for e in examples], dtype=np.float64),
            timestamps=np.asarray([e.timestamp for e in examples], dtype=np.int64),
        )

    @property
    def n(self) -> int:
        return len(self.targets)

    def example(self, i: int) -> Example:
        return Example(
            features=self.features[i],
            target=self.targets[i],
            weight=float(self.weights[i]),
            timestamp=int(self.timestamps[i]),
        )

    def batch(self, idx: np.ndarray | None = None) -> Batch:
        if idx is None:
            return Batch(self.features, self.targets, self.weights)
        return Batch(self.features[idx], self.targets[idx], self.weights[idx])

    def subset(self, idx: np.ndarray, client_id: int | None = None) -> "ClientDataset":
        return ClientDataset(
            client_id=self.client_id if client_id is None else client_id,
            features=self.features[idx],
            targets=self.targets[idx],
            weights=self.weights[idx],
            timestamps=self.timestamps[idx],
        )

    def support_batch(self) -> Batch:
        return self.batch(self.support_idx)

    def query_batch(self) -> Batch:
        return self.batch(self.query_idx)


@dataclass
class Metric:
    """A mergeable metric: weighted mean of ``value`` under ``weight``."""

    value: float
    weight: float


def merge_metrics(parts: Iterable[Mapping[str, Metric]]) -> dict[str, Metric]:
    """Weighted-mean merge, key by key; empty input yields an empty map."""
    acc: dict[str, list[float]] = {}
    for part in parts:
        for k, m in part.items():
            s = acc.setdefault(k, [0.0, 0.0])
            s[0] += m.value * m.weight
            s[1] += m.weight
    return {
        k: Metric(v / w if w > 0 else float("nan"), w) for k, (v, w) in acc.items()
    }


def finalize_metrics(stats: Mapping[str, Metric]) -> dict[str, float]:
    """Plain floats, deriving rmse from a mergeable mse when present."""
    out = {k: m.value for k, m in stats.items()}
    if "mse" in out:
        out["rmse"] = math.sqrt(out["mse"])
    return out


@dataclass
class RowGrad:
    """Row-sparse gradient for one global block; rows may repeat (summed)."""

    block: int
    rows: np.ndarray
    values: np.ndarray


# Gathers current row values for (block_index, row_indices); used by the
# row-sparse client-update path where the working copy is an overlay.
RowGather = Callable[[int, np.ndarray], np.ndarray]

Blocks = Sequence[ParamBlock]
GradFn = Callable[[Blocks, Blocks, Batch], list[np.ndarray]]


@dataclass(frozen=True)
class ModelSpec:
    """A task: loss, prediction, and analytic gradients per parameter part.

    ``loss`` is a weighted mean over the batch, so its scale does not depend
    on batch size.  ``grad_global``/``grad_local`` return one flat array per
    corresponding block and must agree with central finite differences of
    ``loss`` to 1e-4 relative (see :func:`check_gradients`).

    Optional fast kernels (behaviour must match the dense procedures):

    * ``sparse_grads(gather, l, batch, need_local)`` returns row-sparse
      global gradients plus, when asked, the local gradient computed from
      the same gathered rows.  Only for models whose global gradients touch
      a few rows per batch.
    * ``fast_centralized`` vectorises joint SGD over a mixed-owner example
      stream for models whose entire local part is a single vector per
      client (see baselines module for the calling convention).
    """

    name: str
    init_global: Callable[[np.random.Generator], list[ParamBlock]]
    init_local: Callable[[np.random.Generator], list[ParamBlock]]
    loss: Callable[[Blocks, Blocks, Batch], float]
    predict: Callable[[Blocks, Blocks, Batch], np.ndarray]
    grad_global: GradFn
    grad_local: GradFn
    metrics: Callable[[Blocks, Blocks, Batch], dict[str, Metric]]
    sparse_grads: Callable | None = None
    fast_centralized: Callable | None = None


@dataclass
class GradCheckReport:
    max_rel_err_global: float
    max_rel_err_local: float

    @property
    def max_rel_err(self) -> float:
        return max(self.max_rel_err_global, self.max_rel_err_local)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a), abs(b))


def check_gradients(
    spec: ModelSpec,
    g: Blocks,
    l: Blocks,
    batch: Batch,
    eps: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Relative error per coordinate is |a - fd| / max(1e-8, |a|, |fd|); the
    report carries the worst coordinate for each parameter part.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if batch.size == 0:
        raise DataError("gradient check needs a nonempty batch")

    base = spec.loss(g, l, batch)
    if not math.isfinite(base):
        raise NumericalError("loss is non-finite at the checkpoint")

    def fd_max_err(blocks: Blocks, analytic: list[np.ndarray], fixed: Blocks, is_global: bool):
        worst = 0.0
        for bi, block in enumerate(blocks):
            grad = np.asarray(analytic[bi]).ravel()
            for j in range(block.values.size):
                plus = block.values.copy()
                plus[j] += eps
                minus = block.values.copy()
                minus[j] -= eps
                b_plus = list(blocks)
                b_minus = list(blocks)
                b_plus[bi] = ParamBlock(block.name, plus, block.shape)
                b_minus[bi] = ParamBlock(block.name, minus, block.shape)
                if is_global:
                    lp = spec.loss(b_plus, fixed, batch)
                    lm = spec.loss(b_minus, fixed, batch)
                else:
                    lp = spec.loss(fixed, b_plus, batch)
                    lm = spec.loss(fixed, b_minus, batch)
                if not (math.isfinite(lp) and math.isfinite(lm)):
                    raise NumericalError("non-finite loss during finite-difference probe")
                fd = (lp - lm) / (2.0 * eps)
                worst = max(worst, _rel_err(float(grad[j]), fd))
        return worst

    ag = spec.grad_global(g, l, batch)
    al = spec.grad_local(g, l, batch)
    return GradCheckReport(
        max_rel_err_global=fd_max_err(g, ag, l, True),
        max_rel_err_local=fd_max_err(l, al, g, False),
    )
