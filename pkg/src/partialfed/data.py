"""Dataset ingestion and generation: the MovieLens 1M ratings parser, a
tokenized-corpus loader for the next-word task, synthetic low-rank rating
generators, and the user/example split helpers shared by both evaluation
regimes."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ClientDataset, RngStreams, round_half_away
from .errors import ConfigError, DataError, ParseError
from .models import (
    BOS_ID,
    EOS_ID,
    OOV_ID,
    PAD_ID,
    NwpConfig,
    SPECIAL_TOKENS,
    TokenCodec,
)

__all__ = [
    "MovieLensData",
    "parse_movielens",
    "SyntheticMFConfig",
    "gen_synthetic_mf",
    "SentenceRecord",
    "load_token_corpus",
    "corpus_to_clients",
    "write_token_corpus",
    "gen_synthetic_corpus",
    "build_vocabulary",
    "vocabulary_coverage",
    "sentence_examples",
    "split_users",
    "split_each_client_by_time",
]


# ---------------------------------------------------------------------------
# MovieLens 1M
# ---------------------------------------------------------------------------


@dataclass
class MovieLensData:
    clients: list[ClientDataset]
    num_users: int
    num_items: int
    num_ratings: int


def parse_movielens(path: str | Path) -> MovieLensData:
    """Parse a `ratings.dat` file (``UserID::MovieID::Rating::Timestamp``,
    ISO-8859-1).  User and item ids are remapped densely in first-seen
    order; each user's ratings are sorted by timestamp with ties keeping
    file order."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"ratings file not found: {path}")
    user_ids: dict[int, int] = {}
    item_ids: dict[int, int] = {}
    per_user: dict[int, list[tuple[int, float, int]]] = {}
    n_ratings = 0
    with open(path, encoding="iso-8859-1") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise ParseError(str(path), line_no, f"expected 4 '::' fields, got {len(parts)}")
            try:
                raw_user, raw_item, rating, ts = (int(p) for p in parts)
            except ValueError as e:
                raise ParseError(str(path), line_no, f"non-integer field: {e}") from e
            if not 1 <= rating <= 5:
                raise DataError(f"{path}:{line_no}: rating {rating} outside 1..5")
            u = user_ids.setdefault(raw_user, len(user_ids))
            i = item_ids.setdefault(raw_item, len(item_ids))
            per_user.setdefault(u, []).append((i, float(rating), ts))
            n_ratings += 1

    clients = []
    for u in sorted(per_user):
        rows = per_user[u]
        items = np.array([r[0] for r in rows], dtype=np.int64)
        ratings = np.array([r[1] for r in rows])
        stamps = np.array([r[2] for r in rows], dtype=np.int64)
        order = np.argsort(stamps, kind="stable")
        clients.append(
            ClientDataset(
                client_id=u,
                features=items[order],
                targets=ratings[order],
                weights=np.ones(len(rows)),
                timestamps=stamps[order],
            )
        )
    return MovieLensData(
        clients=clients,
        num_users=len(user_ids),
        num_items=len(item_ids),
        num_ratings=n_ratings,
    )


# ---------------------------------------------------------------------------
# Synthetic low-rank ratings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticMFConfig:
    num_users: int = 200
    num_items: int = 60
    true_rank: int = 5
    noise_std: float = 0.3
    ratings_per_user: int = 30
    seed: int = 0
    signal_std: float = 0.8
    user_bias_std: float = 0.15

    def __post_init__(self):
        if self.true_rank < 1 or self.true_rank > min(self.num_users, self.num_items):
            raise ConfigError("true_rank must be in [1, min(users, items)]")
        if self.ratings_per_user < 1 or self.ratings_per_user > self.num_items:
            raise ConfigError("ratings_per_user must be in [1, num_items]")
        if self.noise_std < 0 or self.signal_std < 0 or self.user_bias_std < 0:
            raise ConfigError("noise/signal/bias spreads must be nonnegative")
        if self.true_rank > 1 and self.signal_std == 0:
            raise ConfigError("true_rank > 1 needs a positive signal_std")


def gen_synthetic_mf(
    cfg: SyntheticMFConfig,
) -> tuple[list[ClientDataset], np.ndarray, np.ndarray]:
    """Ground-truth-rank rating data: clean ratings are dot products of
    Gaussian factors (one factor dimension reserved for a per-user offset
    around 3 so the clean matrix is exactly rank `true_rank`, centered in
    the rating range, and spread like real explicit-rating data), then
    noised, rounded half-away-from-zero, and clipped onto 1..5."""
    streams = RngStreams(cfg.seed)
    rng = streams.generator("synthetic_mf")
    s = cfg.true_rank - 1
    bias = rng.normal(1.0, cfg.user_bias_std, size=(cfg.num_users, 1))
    if s > 0:
        # Var(alpha^2 * G.H) = alpha^4 * s = signal_std^2
        alpha = (cfg.signal_std**2 / s) ** 0.25
        p_true = np.hstack([alpha * rng.normal(size=(cfg.num_users, s)), bias])
        q_true = np.hstack([alpha * rng.normal(size=(cfg.num_items, s)),
                            3.0 * np.ones((cfg.num_items, 1))])
    else:
        p_true = bias
        q_true = 3.0 * np.ones((cfg.num_items, 1))

    clients = []
    for u in range(cfg.num_users):
        # arrival order stays random: timestamps must not correlate with item id
        items = rng.choice(cfg.num_items, size=cfg.ratings_per_user, replace=False)
        clean = q_true[items] @ p_true[u]
        noisy = clean + cfg.noise_std * rng.normal(size=len(items))
        ratings = np.clip(round_half_away(noisy), 1.0, 5.0)
        clients.append(
            ClientDataset(
                client_id=u,
                features=items.astype(np.int64),
                targets=ratings,
                weights=np.ones(len(items)),
                timestamps=np.arange(len(items), dtype=np.int64),
            )
        )
    return clients, p_true, q_true


# ---------------------------------------------------------------------------
# Token corpus for the next-word task
# ---------------------------------------------------------------------------


@dataclass
class SentenceRecord:
    client_id: int
    tokens: list[str]
    timestamp: int


def write_token_corpus(path: str | Path, records: Sequence[SentenceRecord]) -> None:
    """TSV, UTF-8: ``client_id <TAB> timestamp <TAB> space-joined tokens``."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(f"{rec.client_id}\t{rec.timestamp}\t{' '.join(rec.tokens)}\n")


def _parse_corpus(path: str | Path) -> list[SentenceRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"corpus file not found: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(str(path), line_no, f"expected 3 tab fields, got {len(parts)}")
            try:
                cid, ts = int(parts[0]), int(parts[1])
            except ValueError as e:
                raise ParseError(str(path), line_no, f"non-integer field: {e}") from e
            tokens = parts[2].split()
            if not tokens:
                raise ParseError(str(path), line_no, "sentence with no tokens")
            records.append(SentenceRecord(client_id=cid, tokens=tokens, timestamp=ts))
    return records


def build_vocabulary(records: Sequence[SentenceRecord], vocab_size: int) -> list[str]:
    """Top `vocab_size` tokens by frequency, ties broken lexicographically."""
    counts = Counter()
    for rec in records:
        counts.update(rec.tokens)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [w for w, _ in ranked[:vocab_size]]


def vocabulary_coverage(records: Sequence[SentenceRecord], vocab: Sequence[str]) -> float:
    known = set(vocab)
    total = hits = 0
    for rec in records:
        total += len(rec.tokens)
        hits += sum(1 for t in rec.tokens if t in known)
    return hits / total if total else 0.0


def _sentence_slots(tokens: Sequence[str], max_len: int) -> list[str]:
    # bos + tokens (truncated) + eos, right-padded to exactly max_len slots
    body = list(tokens[: max_len - 2])
    slots = ["<bos>"] + body + ["<eos>"]
    slots.extend(["<pad>"] * (max_len - len(slots)))
    return slots


_SPECIAL_IDS = {"<pad>": PAD_ID, "<bos>": BOS_ID, "<eos>": EOS_ID, "<oov>": OOV_ID}


def _context_id(codec: TokenCodec, token: str) -> int:
    sid = _SPECIAL_IDS.get(token)
    return sid if sid is not None else codec.context_id(token)


def _target_id(codec: TokenCodec, token: str) -> int:
    sid = _SPECIAL_IDS.get(token)
    return sid if sid is not None else codec.target_id(token)


def sentence_examples(
    codec: TokenCodec, tokens: Sequence[str], timestamp: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Window one sentence into (context, next-token) examples.

    Sentences occupy exactly ``max_sentence_len`` slots (bos, body, eos,
    padding); every position whose target is a real slot (not padding)
    yields one example whose context is the preceding ``context_window``
    slots, left-padded as needed.
    """
    cfg = codec.cfg
    slots = _sentence_slots(tokens, cfg.max_sentence_len)
    ctx_rows, targets = [], []
    for t in range(1, cfg.max_sentence_len):
        if slots[t] == "<pad>":
            break
        lo = max(0, t - cfg.context_window)
        window = ["<pad>"] * (cfg.context_window - (t - lo)) + slots[lo:t]
        ctx_rows.append([_context_id(codec, w) for w in window])
        targets.append(_target_id(codec, slots[t]))
    n = len(targets)
    return (
        np.asarray(ctx_rows, dtype=np.int64).reshape(n, cfg.context_window),
        np.asarray(targets, dtype=np.int64),
        np.full(n, timestamp, dtype=np.int64),
    )


def load_token_corpus(
    path: str | Path,
    cfg: NwpConfig,
    *,
    max_sentences_per_client: int = 1000,
) -> tuple[list[ClientDataset], list[str], TokenCodec]:
    """Parse a TSV corpus and window it into next-word examples."""
    return corpus_to_clients(
        _parse_corpus(path), cfg, max_sentences_per_client=max_sentences_per_client
    )


def corpus_to_clients(
    records: Sequence[SentenceRecord],
    cfg: NwpConfig,
    *,
    max_sentences_per_client: int = 1000,
) -> tuple[list[ClientDataset], list[str], TokenCodec]:
    """Build the frequency-ranked vocabulary, then window every sentence
    into next-word examples; clients keep at most
    ``max_sentences_per_client`` sentences, earliest by timestamp."""
    for tok in SPECIAL_TOKENS:
        for rec in records:
            if tok in rec.tokens:
                raise DataError(f"reserved token {tok!r} appears in the corpus")
    vocab = build_vocabulary(records, cfg.vocab_size)
    codec = TokenCodec(cfg, vocab)

    by_client: dict[int, list[SentenceRecord]] = {}
    for rec in records:
        by_client.setdefault(rec.client_id, []).append(rec)

    clients = []
    for cid in sorted(by_client):
        sentences = sorted(by_client[cid], key=lambda r: r.timestamp)
        sentences = sentences[:max_sentences_per_client]
        ctxs, tgts, stamps = [], [], []
        for rec in sentences:
            c, t, s = sentence_examples(codec, rec.tokens, rec.timestamp)
            ctxs.append(c)
            tgts.append(t)
            stamps.append(s)
        features = np.concatenate(ctxs)
        targets = np.concatenate(tgts)
        clients.append(
            ClientDataset(
                client_id=cid,
                features=features,
                targets=targets.astype(np.float64),
                weights=np.ones(len(targets)),
                timestamps=np.concatenate(stamps),
            )
        )
    return clients, vocab, codec


def gen_synthetic_corpus(
    *,
    num_clients: int = 32,
    sentences_per_client: int = 40,
    personal_tokens: int = 6,
    common_words: int = 42,
    pairs_per_sentence: int = 3,
    seed: int = 0,
) -> list[SentenceRecord]:
    """A corpus where each client uses its own out-of-vocabulary slang.

    Every client has `personal_tokens` private tokens; personal token j is
    always followed by the shared marker word ``sig<j>``, so predicting the
    word after a personal token is exactly as hard as telling the client's
    personal tokens apart.  Common words and markers are frequent enough to
    occupy the core vocabulary while personal tokens stay out of it.
    """
    rng = RngStreams(seed).generator("synthetic_corpus")
    commons = [f"w{k}" for k in range(common_words)]
    markers = [f"sig{j}" for j in range(personal_tokens)]
    records = []
    for cid in range(num_clients):
        personal = [f"p{cid}q{j}" for j in range(personal_tokens)]
        for snum in range(sentences_per_client):
            tokens: list[str] = []
            for _ in range(pairs_per_sentence):
                tokens.append(commons[rng.integers(len(commons))])
                j = int(rng.integers(personal_tokens))
                tokens.append(personal[j])
                tokens.append(markers[j])
            records.append(SentenceRecord(client_id=cid, tokens=tokens, timestamp=snum))
    return records


# ---------------------------------------------------------------------------
# Train / validation / test splits
# ---------------------------------------------------------------------------


def _three_way_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = min(math.ceil(fractions[0] * n), n)
    n_val = min(math.ceil(fractions[1] * n), n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_users(
    clients: Sequence[ClientDataset],
    rng: np.random.Generator,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> tuple[list[ClientDataset], list[ClientDataset], list[ClientDataset]]:
    """Random user-level partition (the unseen-user evaluation regime)."""
    order = rng.permutation(len(clients))
    n_train, n_val, _ = _three_way_sizes(len(clients), fractions)
    pick = lambda idx: [clients[i] for i in sorted(idx.tolist())]
    return (
        pick(order[:n_train]),
        pick(order[n_train : n_train + n_val]),
        pick(order[n_train + n_val :]),
    )


def split_each_client_by_time(
    ds: ClientDataset, fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
) -> tuple[ClientDataset, ClientDataset, ClientDataset]:
    """Timestamp-ordered per-client partition (the seen-user regime):
    earliest ceil(.8 n) examples train, next ceil(.1 n) validate, rest test."""
    order = np.argsort(ds.timestamps, kind="stable")
    n_train, n_val, _ = _three_way_sizes(ds.n, fractions)
    return (
        ds.subset(order[:n_train]),
        ds.subset(order[n_train : n_train + n_val]),
        ds.subset(order[n_train + n_val :]),
    )
