"""The two shipped model specifications.

* Matrix factorization for explicit ratings: a global item-embedding matrix
  and one local user-embedding vector per client.
* A log-linear next-word model: global core-vocabulary embeddings and output
  layer, local hashed out-of-vocabulary embedding buckets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    Batch,
    Metric,
    ModelSpec,
    ParamBlock,
    RowGrad,
    fnv1a64,
    round_half_away,
)
from .errors import ConfigError, DataError, MetricUndefinedError

__all__ = [
    "MatFacConfig",
    "matfac_spec",
    "rmse",
    "rating_accuracy",
    "NwpConfig",
    "TokenCodec",
    "oov_nwp_spec",
    "PAD_ID",
    "BOS_ID",
    "EOS_ID",
    "OOV_ID",
    "NUM_SPECIAL",
]


# ---------------------------------------------------------------------------
# Shared metric helpers
# ---------------------------------------------------------------------------


def rmse(predictions, targets) -> float:
    """Root-mean-square error on raw (unclamped, unrounded) predictions."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.size == 0 or p.size != t.size:
        raise MetricUndefinedError("rmse needs equally sized, nonempty inputs")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def rating_accuracy(
    predictions,
    targets,
    *,
    clamp: bool = False,
    rating_min: float = 1.0,
    rating_max: float = 5.0,
) -> float:
    """Fraction of predictions that round (half away from zero) to the target.

    Predictions are rounded raw by default, so an untrained model whose
    predictions sit near zero scores ~0 rather than picking up credit for
    the lowest rating; pass ``clamp=True`` to clip into the rating range
    first.
    """
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.size == 0 or p.size != t.size:
        raise MetricUndefinedError("accuracy needs equally sized, nonempty inputs")
    if np.any((t < 1) | (t > 5) | (t != np.round(t))):
        raise DataError("rating targets must be integers in 1..5")
    if clamp:
        p = np.clip(p, rating_min, rating_max)
    return float(np.mean(round_half_away(p) == t))


# ---------------------------------------------------------------------------
# Matrix factorization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatFacConfig:
    num_items: int
    embed_dim: int = 50
    rating_min: float = 1.0
    rating_max: float = 5.0
    init_stddev: float = 0.1

    def __post_init__(self):
        if self.num_items < 1:
            raise ConfigError("num_items must be positive")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")
        if not self.rating_min < self.rating_max:
            raise ConfigError("rating_min must be below rating_max")


def _mf_items(batch: Batch, num_items: int) -> np.ndarray:
    items = np.asarray(batch.features, dtype=np.int64).ravel()
    if items.size and (items.min() < 0 or items.max() >= num_items):
        raise DataError(f"item id outside [0, {num_items})")
    return items


def _batch_weight(batch: Batch) -> float:
    total = batch.total_weight
    if total <= 0:
        raise DataError("batch has zero total weight")
    return total


def _mf_coef(preds: np.ndarray, batch: Batch) -> np.ndarray:
    # d(weighted mean squared error)/d(pred), one entry per example
    return 2.0 * batch.weights * (preds - batch.targets) / _batch_weight(batch)


def matfac_spec(cfg: MatFacConfig) -> ModelSpec:
    """Rating prediction is dot(user_embedding, item_row); loss is mean MSE."""

    I, K = cfg.num_items, cfg.embed_dim

    def init_global(rng: np.random.Generator) -> list[ParamBlock]:
        return [ParamBlock.of("item_embeddings", rng.normal(0.0, cfg.init_stddev, (I, K)))]

    def init_local(rng: np.random.Generator) -> list[ParamBlock]:
        return [ParamBlock.of("user_embedding", rng.normal(0.0, cfg.init_stddev, (K,)))]

    def predict(g, l, batch: Batch) -> np.ndarray:
        items = _mf_items(batch, I)
        return g[0].array[items] @ l[0].values

    def loss(g, l, batch: Batch) -> float:
        preds = predict(g, l, batch)
        err = preds - batch.targets
        return float(np.sum(batch.weights * err * err) / _batch_weight(batch))

    def grad_local(g, l, batch: Batch) -> list[np.ndarray]:
        items = _mf_items(batch, I)
        qb = g[0].array[items]
        coef = _mf_coef(qb @ l[0].values, batch)
        return [coef @ qb]

    def grad_global(g, l, batch: Batch) -> list[np.ndarray]:
        items = _mf_items(batch, I)
        p = l[0].values
        qb = g[0].array[items]
        coef = _mf_coef(qb @ p, batch)
        gq = np.zeros((I, K))
        np.add.at(gq, items, coef[:, None] * p[None, :])
        return [gq.ravel()]

    def sparse_grads(gather, l, batch: Batch, need_local: bool):
        items = _mf_items(batch, I)
        p = l[0].values
        qb = gather(0, items)
        coef = _mf_coef(qb @ p, batch)
        row_grads = [RowGrad(block=0, rows=items, values=coef[:, None] * p[None, :])]
        local = [coef @ qb] if need_local else None
        return row_grads, local

    def metrics(g, l, batch: Batch) -> dict[str, Metric]:
        preds = predict(g, l, batch)
        err = preds - batch.targets
        total = _batch_weight(batch)
        return {
            "mse": Metric(float(np.sum(batch.weights * err * err) / total), total),
            "accuracy": Metric(rating_accuracy(preds, batch.targets), float(batch.size)),
        }

    def fast_centralized(g, local_matrix, owner_rows, features, targets, weights,
                         epochs, batch_size, rate, rng):
        # Vectorized joint SGD over a mixed-owner example stream; both factor
        # updates use pre-step values (simultaneous update).
        q = g[0].array.copy()
        p = np.array(local_matrix, dtype=np.float64)
        items = np.asarray(features, dtype=np.int64).ravel()
        if items.size and (items.min() < 0 or items.max() >= I):
            raise DataError(f"item id outside [0, {I})")
        n = len(targets)
        for _ in range(int(epochs)):
            perm = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = perm[start : start + batch_size]
                u, it = owner_rows[idx], items[idx]
                w = weights[idx]
                pb, qb = p[u], q[it]
                preds = np.einsum("ij,ij->i", pb, qb)
                coef = 2.0 * w * (preds - targets[idx]) / w.sum()
                np.add.at(p, u, -rate * coef[:, None] * qb)
                np.add.at(q, it, -rate * coef[:, None] * pb)
        return [ParamBlock.of("item_embeddings", q)], p

    return ModelSpec(
        name="matfac",
        init_global=init_global,
        init_local=init_local,
        loss=loss,
        predict=predict,
        grad_global=grad_global,
        grad_local=grad_local,
        metrics=metrics,
        sparse_grads=sparse_grads,
        fast_centralized=fast_centralized,
    )


# ---------------------------------------------------------------------------
# Log-linear next-word model with hashed local OOV embeddings
# ---------------------------------------------------------------------------

PAD_ID, BOS_ID, EOS_ID, OOV_ID = 0, 1, 2, 3
NUM_SPECIAL = 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<oov>")


@dataclass(frozen=True)
class NwpConfig:
    vocab_size: int
    num_oov_buckets: int = 500
    embed_dim: int = 16
    context_window: int = 3
    max_sentence_len: int = 20
    init_stddev: float = 0.1

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        if self.num_oov_buckets < 0:
            raise ConfigError("num_oov_buckets must be nonnegative")
        if self.embed_dim < 1 or self.context_window < 1:
            raise ConfigError("embed_dim and context_window must be positive")
        if self.max_sentence_len < 3:
            raise ConfigError("max_sentence_len must fit bos + token + eos")

    @property
    def num_classes(self) -> int:
        return NUM_SPECIAL + self.vocab_size

    @property
    def num_global_rows(self) -> int:
        return NUM_SPECIAL + self.vocab_size


class TokenCodec:
    """Maps token strings onto embedding-row / class ids.

    Context slots use a signed encoding: ``id >= 0`` addresses the global
    embedding table (specials first, then core vocabulary); ``id < 0``
    addresses local out-of-vocabulary bucket ``-id - 1``, chosen as
    FNV-1a-64(token) mod num_oov_buckets.  With zero buckets an
    out-of-vocabulary token falls back to the single global oov row.
    Targets are always class ids, with out-of-vocabulary words mapped to
    the oov class.
    """

    def __init__(self, cfg: NwpConfig, vocab: Sequence[str]):
        if len(vocab) > cfg.vocab_size:
            raise ConfigError(f"vocabulary of {len(vocab)} exceeds vocab_size {cfg.vocab_size}")
        self.cfg = cfg
        self.vocab = list(vocab)
        self._ids = {w: NUM_SPECIAL + i for i, w in enumerate(self.vocab)}

    def context_id(self, token: str) -> int:
        gid = self._ids.get(token)
        if gid is not None:
            return gid
        if self.cfg.num_oov_buckets == 0:
            return OOV_ID
        return -(fnv1a64(token.encode("utf-8")) % self.cfg.num_oov_buckets) - 1

    def target_id(self, token: str) -> int:
        return self._ids.get(token, OOV_ID)

    def is_oov(self, token: str) -> bool:
        return token not in self._ids


def _nwp_forward(cfg: NwpConfig, g, l, batch: Batch):
    ctx = np.asarray(batch.features, dtype=np.int64)
    if ctx.ndim != 2 or ctx.shape[1] != cfg.context_window:
        raise DataError(f"context must be (batch, {cfg.context_window}) token ids")
    emb, w_out, bias = g[0].array, g[1].array, g[2].array
    pos = ctx >= 0
    h_slots = np.empty(ctx.shape + (cfg.embed_dim,))
    h_slots[pos] = emb[ctx[pos]]
    neg = ~pos
    if neg.any():
        if not l:
            raise DataError("out-of-vocabulary bucket id with no local embeddings")
        h_slots[neg] = l[0].array[-ctx[neg] - 1]
    h = h_slots.mean(axis=1)
    logits = h @ w_out + bias
    return ctx, pos, h, logits


def _softmax_grad(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray):
    total = float(weights.sum())
    if total <= 0:
        raise DataError("batch has zero total weight")
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=1, keepdims=True)
    dz = probs.copy()
    dz[np.arange(len(targets)), targets] -= 1.0
    dz *= (weights / total)[:, None]
    return probs, dz


def oov_nwp_spec(cfg: NwpConfig) -> ModelSpec:
    """Mean of the last ``context_window`` token embeddings, affine map to
    logits over core vocabulary plus special tokens, cross-entropy loss.
    Core embeddings and the output layer are global; bucket rows are local.
    """

    E, C, R = cfg.embed_dim, cfg.num_classes, cfg.num_global_rows

    def init_global(rng: np.random.Generator) -> list[ParamBlock]:
        return [
            ParamBlock.of("token_embeddings", rng.normal(0.0, cfg.init_stddev, (R, E))),
            ParamBlock.of("output_weights", rng.normal(0.0, cfg.init_stddev, (E, C))),
            ParamBlock.of("output_bias", np.zeros(C)),
        ]

    def init_local(rng: np.random.Generator) -> list[ParamBlock]:
        if cfg.num_oov_buckets == 0:
            return []
        return [
            ParamBlock.of(
                "oov_embeddings",
                rng.normal(0.0, cfg.init_stddev, (cfg.num_oov_buckets, E)),
            )
        ]

    def _targets(batch: Batch) -> np.ndarray:
        t = np.asarray(batch.targets, dtype=np.int64)
        if t.size and (t.min() < 0 or t.max() >= C):
            raise DataError(f"target class outside [0, {C})")
        return t

    def loss(g, l, batch: Batch) -> float:
        _, _, _, logits = _nwp_forward(cfg, g, l, batch)
        y = _targets(batch)
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        ll = shifted[np.arange(len(y)), y] - lse
        return float(-np.sum(batch.weights * ll) / _batch_weight(batch))

    def _backward(g, l, batch: Batch):
        ctx, pos, h, logits = _nwp_forward(cfg, g, l, batch)
        y = _targets(batch)
        _, dz = _softmax_grad(logits, y, batch.weights)
        gh = dz @ g[1].array.T
        slot_contrib = np.broadcast_to(
            (gh / cfg.context_window)[:, None, :], ctx.shape + (E,)
        )
        return ctx, pos, h, dz, slot_contrib

    def grad_global(g, l, batch: Batch) -> list[np.ndarray]:
        ctx, pos, h, dz, slot_contrib = _backward(g, l, batch)
        g_emb = np.zeros((R, E))
        np.add.at(g_emb, ctx[pos], slot_contrib[pos])
        g_w = h.T @ dz
        g_b = dz.sum(axis=0)
        return [g_emb.ravel(), g_w.ravel(), g_b]

    def grad_local(g, l, batch: Batch) -> list[np.ndarray]:
        if not l:
            return []
        ctx, pos, _, _, slot_contrib = _backward(g, l, batch)
        neg = ~pos
        g_oov = np.zeros((cfg.num_oov_buckets, E))
        if neg.any():
            np.add.at(g_oov, -ctx[neg] - 1, slot_contrib[neg])
        return [g_oov.ravel()]

    def predict(g, l, batch: Batch) -> np.ndarray:
        _, _, _, logits = _nwp_forward(cfg, g, l, batch)
        return logits.argmax(axis=1)

    def metrics(g, l, batch: Batch) -> dict[str, Metric]:
        _, _, _, logits = _nwp_forward(cfg, g, l, batch)
        y = _targets(batch)
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        ll = shifted[np.arange(len(y)), y] - lse
        ce = float(-np.sum(batch.weights * ll) / _batch_weight(batch))
        scored = y >= NUM_SPECIAL
        n_scored = int(scored.sum())
        if n_scored:
            acc = float(np.mean(logits[scored].argmax(axis=1) == y[scored]))
        else:
            acc = 0.0
        return {
            "cross_entropy": Metric(ce, batch.total_weight),
            "accuracy": Metric(acc, float(n_scored)),
        }

    return ModelSpec(
        name="oov_nwp",
        init_global=init_global,
        init_local=init_local,
        loss=loss,
        predict=predict,
        grad_global=grad_global,
        grad_local=grad_local,
        metrics=metrics,
    )
