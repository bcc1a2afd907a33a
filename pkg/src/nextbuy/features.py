"""Spending aggregates, temporal features, SIC text embeddings and autoencoder inputs.

Input layout of the 784-wide autoencoder vector::

    [0]  amount                      [8]  user-category mean
    [1]  log(1 + amount)             [9]  user-category reservation price
    [2]  user txn count              [10] merchant txn count
    [3]  user mean                   [11] merchant mean
    [4]  user median                 [12] merchant median
    [5]  user total                  [13] merchant total
    [6]  user distinct MCC count     [14] amount / user mean
    [7]  user-category txn count     [15] amount / merchant mean
    [16:784] unit-norm SIC description embedding
"""

from __future__ import annotations

import hashlib
import math
import re
import statistics
from collections import defaultdict
from dataclasses import dataclass
from datetime import date
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence, TextIO

import numpy as np

from .datamodel import Dataset, Transaction
from .errors import DataError, DuplicateKeyError, FormatError, NotFoundError, OrderingError

N_FEATURES = 16
EMBED_DIM = 768
INPUT_DIM = N_FEATURES + EMBED_DIM
N_TEMPORAL = 4
DELTA_CAP_DAYS = 30

EMBEDDING_PROVIDER_VERSION = "hash-blake2b-v1"


@dataclass(frozen=True)
class UserAggregates:
    txn_count: int
    mean_amount: float
    median_amount: float
    total_amount: float
    distinct_mcc_count: int


@dataclass(frozen=True)
class CategoryAggregates:
    txn_count: int
    mean_amount: float
    reservation_price: float


@dataclass(frozen=True)
class MerchantAggregates:
    txn_count: int
    mean_amount: float
    median_amount: float
    total_amount: float


class Aggregates(NamedTuple):
    users: dict[str, UserAggregates]
    categories: dict[tuple[str, int], CategoryAggregates]
    merchants: dict[str, MerchantAggregates]


def compute_aggregates(txns: Dataset | Iterable[Transaction]) -> Aggregates:
    """User, user-category and merchant aggregates in one pass over the transactions."""
    by_user: dict[str, list[float]] = defaultdict(list)
    mccs: dict[str, set[int]] = defaultdict(set)
    by_cat: dict[tuple[str, int], list[float]] = defaultdict(list)
    by_merchant: dict[str, list[float]] = defaultdict(list)
    for t in txns:
        by_user[t.card_id].append(t.amount)
        mccs[t.card_id].add(t.mcc)
        by_cat[(t.card_id, t.mcc)].append(t.amount)
        by_merchant[t.supplier_id].append(t.amount)

    users = {
        u: UserAggregates(len(a), math.fsum(a) / len(a), statistics.median(a), math.fsum(a), len(mccs[u]))
        for u, a in by_user.items()
    }
    cats = {k: CategoryAggregates(len(a), math.fsum(a) / len(a), max(a)) for k, a in by_cat.items()}
    merchants = {
        m: MerchantAggregates(len(a), math.fsum(a) / len(a), statistics.median(a), math.fsum(a))
        for m, a in by_merchant.items()
    }
    return Aggregates(users, cats, merchants)


def cold_aggregates(aggs: Aggregates) -> tuple[UserAggregates, CategoryAggregates, MerchantAggregates]:
    """Stand-in aggregates for keys never seen when the aggregates were fitted.

    Counts are zero and dollar statistics fall back to the median over known users.
    """
    if not aggs.users:
        raise DataError("cannot derive cold-start aggregates from empty aggregates")
    means = [a.mean_amount for a in aggs.users.values()]
    medians = [a.median_amount for a in aggs.users.values()]
    mean, median = statistics.median(means), statistics.median(medians)
    return (
        UserAggregates(0, mean, median, 0.0, 0),
        CategoryAggregates(0, mean, mean),
        MerchantAggregates(0, mean, median, 0.0),
    )


# --------------------------------------------------------------------------
# SIC description embeddings

_TOKEN = re.compile(r"[a-z0-9]+")


def _token_slot(token: str) -> tuple[int, float]:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, person=b"sic-emb-v1").digest()
    h = int.from_bytes(digest, "little")
    return h % EMBED_DIM, (1.0 if (h >> 63) & 1 == 0 else -1.0)


def embed_sic_default(description: str) -> np.ndarray:
    """Signed feature hashing of the lowercase alphanumeric tokens, L2-normalized.

    Each token maps to one slot of the 768-vector through an 8-byte BLAKE2b
    digest (slot = digest mod 768, sign = top bit), so the result is stable
    across runs and platforms.
    """
    tokens = _TOKEN.findall(description.lower())
    if not tokens:
        raise DataError(f"cannot embed empty description {description!r}")
    v = np.zeros(EMBED_DIM)
    for tok in tokens:
        slot, sign = _token_slot(tok)
        v[slot] += sign
    norm = np.linalg.norm(v)
    if norm == 0.0:
        # every token cancelled against another; fall back to the unsigned histogram
        for tok in tokens:
            v[_token_slot(tok)[0]] += 1.0
        norm = np.linalg.norm(v)
    return v / norm


class SicEmbeddingTable:
    """SIC code -> unit-norm 768-vector, kept in ascending code order."""

    def __init__(self, vectors: Mapping[int, np.ndarray]):
        codes = sorted(int(c) for c in vectors)
        mat = np.empty((len(codes), EMBED_DIM))
        for i, c in enumerate(codes):
            v = np.asarray(vectors[c], dtype=np.float64)
            if v.shape != (EMBED_DIM,):
                raise FormatError(f"SIC {c}: embedding has {v.size} components, expected {EMBED_DIM}")
            n = np.linalg.norm(v)
            if not np.isfinite(n) or n == 0.0:
                raise FormatError(f"SIC {c}: zero or non-finite embedding")
            mat[i] = v / n
        self.codes = np.array(codes, dtype=np.int64)
        self.matrix = mat
        self._row = {c: i for i, c in enumerate(codes)}

    def __len__(self) -> int:
        return len(self.codes)

    def __contains__(self, sic: object) -> bool:
        return sic in self._row

    def __getitem__(self, sic: int) -> np.ndarray:
        try:
            return self.matrix[self._row[sic]]
        except KeyError:
            raise NotFoundError(f"no embedding for SIC {sic}") from None

    def row(self, sic: int) -> int:
        return self._row[sic]

    @classmethod
    def from_descriptions(
        cls, descriptions: Mapping[int, str], provider: Callable[[str], np.ndarray] = embed_sic_default
    ) -> "SicEmbeddingTable":
        return cls({sic: provider(desc) for sic, desc in descriptions.items()})

    @classmethod
    def from_dataset(cls, ds: Iterable[Transaction], provider: Callable[[str], np.ndarray] = embed_sic_default):
        descriptions: dict[int, str] = {}
        for t in ds:
            descriptions.setdefault(t.sic, t.sic_description)
        return cls.from_descriptions(descriptions, provider)

    def write(self, sink: TextIO) -> None:
        for c, v in zip(self.codes, self.matrix):
            sink.write(f"{c} " + " ".join(repr(float(x)) for x in v) + "\n")


def load_embeddings(source: TextIO | Iterable[str]) -> SicEmbeddingTable:
    """Read ``<sic> <768 numbers>`` lines; vectors are re-normalized on load."""
    vectors: dict[int, np.ndarray] = {}
    for lineno, line in enumerate(source, 1):
        parts = line.split()
        if not parts:
            continue
        try:
            sic = int(parts[0])
            vals = np.array([float(p) for p in parts[1:]])
        except ValueError as exc:
            raise FormatError(f"embedding line {lineno}: {exc}") from None
        if vals.size != EMBED_DIM:
            raise FormatError(f"SIC {sic}: embedding has {vals.size} components, expected {EMBED_DIM}")
        if sic in vectors:
            raise DuplicateKeyError(f"duplicate embedding for SIC {sic}")
        vectors[sic] = vals
    return SicEmbeddingTable(vectors)


# --------------------------------------------------------------------------
# temporal features


class TemporalFeatures(NamedTuple):
    day_of_week: int
    day_of_month: int
    is_weekend: int
    delta_days: int


def temporal_features(txn: Transaction, prev_date: date | None = None) -> TemporalFeatures:
    return temporal_for_date(txn.date, prev_date)


def temporal_for_date(d: date, prev_date: date | None = None) -> TemporalFeatures:
    if prev_date is not None and prev_date > d:
        raise OrderingError(f"previous transaction date {prev_date} is after {d}")
    dow = d.weekday()
    delta = 0 if prev_date is None else (d - prev_date).days
    return TemporalFeatures(dow, d.day, int(dow >= 5), delta)


def history_temporal(history: Sequence[Transaction]) -> list[TemporalFeatures]:
    out = []
    prev = None
    for t in history:
        out.append(temporal_features(t, prev))
        prev = t.date
    return out


# --------------------------------------------------------------------------
# normalization


def _column_stats(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    return mean, std


@dataclass(frozen=True)
class NormStats:
    """Column means/stds for the 16 transaction features and the capped delta-days feature."""

    feature_mean: np.ndarray
    feature_std: np.ndarray
    delta_mean: float = 0.0
    delta_std: float = 1.0

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return (np.asarray(raw, dtype=np.float64) - self.feature_mean) / self.feature_std

    def invert(self, normed: np.ndarray) -> np.ndarray:
        return np.asarray(normed, dtype=np.float64) * self.feature_std + self.feature_mean

    def temporal_vector(self, tf: TemporalFeatures) -> np.ndarray:
        """Weekday and day-of-month scaled into [0, 1], weekend flag as is, capped delta z-scored."""
        delta = min(tf.delta_days, DELTA_CAP_DAYS)
        return np.array(
            [
                tf.day_of_week / 6.0,
                (tf.day_of_month - 1) / 30.0,
                float(tf.is_weekend),
                (delta - self.delta_mean) / self.delta_std,
            ]
        )

    def to_dict(self) -> dict:
        return {
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "delta_mean": self.delta_mean,
            "delta_std": self.delta_std,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormStats":
        return cls(
            np.array(d["feature_mean"], dtype=np.float64),
            np.array(d["feature_std"], dtype=np.float64),
            float(d["delta_mean"]),
            float(d["delta_std"]),
        )


def fit_normalizer(
    feature_rows: Sequence[Sequence[float]] | np.ndarray,
    temporal_rows: Sequence[TemporalFeatures] | None = None,
) -> NormStats:
    """Population mean/std per column; constant columns get std 1."""
    rows = np.asarray(feature_rows, dtype=np.float64)
    if rows.size == 0:
        raise DataError("cannot fit a normalizer on no rows")
    if rows.ndim == 1:
        rows = rows[:, None]
    mean, std = _column_stats(rows)
    delta_mean, delta_std = 0.0, 1.0
    if temporal_rows:
        deltas = np.array([[min(tf.delta_days, DELTA_CAP_DAYS)] for tf in temporal_rows], dtype=np.float64)
        dm, ds = _column_stats(deltas)
        delta_mean, delta_std = float(dm[0]), float(ds[0])
    return NormStats(mean, std, delta_mean, delta_std)


# --------------------------------------------------------------------------
# input assembly


def raw_features(
    txn: Transaction,
    aggs: Aggregates,
    cold: tuple[UserAggregates, CategoryAggregates, MerchantAggregates] | None = None,
) -> np.ndarray:
    """The 16 un-normalized transaction features.

    With ``cold`` given, keys missing from ``aggs`` use those stand-ins;
    otherwise a missing key raises ``NotFoundError``.
    """
    try:
        u = aggs.users[txn.card_id]
    except KeyError:
        if cold is None:
            raise NotFoundError(f"no user aggregates for card {txn.card_id}") from None
        u = cold[0]
    try:
        c = aggs.categories[(txn.card_id, txn.mcc)]
    except KeyError:
        if cold is None:
            raise NotFoundError(f"no category aggregates for ({txn.card_id}, {txn.mcc})") from None
        c = cold[1]
    try:
        m = aggs.merchants[txn.supplier_id]
    except KeyError:
        if cold is None:
            raise NotFoundError(f"no merchant aggregates for {txn.supplier_id}") from None
        m = cold[2]
    a = txn.amount
    return np.array(
        [
            a,
            math.log1p(a),
            u.txn_count,
            u.mean_amount,
            u.median_amount,
            u.total_amount,
            u.distinct_mcc_count,
            c.txn_count,
            c.mean_amount,
            c.reservation_price,
            m.txn_count,
            m.mean_amount,
            m.median_amount,
            m.total_amount,
            a / u.mean_amount,
            a / m.mean_amount,
        ],
        dtype=np.float64,
    )


def assemble_input(
    txn: Transaction,
    aggs: Aggregates,
    table: SicEmbeddingTable,
    norm: NormStats,
    cold: tuple[UserAggregates, CategoryAggregates, MerchantAggregates] | None = None,
) -> np.ndarray:
    out = np.empty(INPUT_DIM)
    out[:N_FEATURES] = norm.apply(raw_features(txn, aggs, cold))
    out[N_FEATURES:] = table[txn.sic]
    return out


@dataclass
class FeatureContext:
    """Everything fitted on the training split that turns a transaction into model inputs."""

    aggregates: Aggregates
    table: SicEmbeddingTable
    norm: NormStats

    def __post_init__(self) -> None:
        self.cold = cold_aggregates(self.aggregates)

    def input_for(self, txn: Transaction, strict: bool = False) -> np.ndarray:
        return assemble_input(txn, self.aggregates, self.table, self.norm, None if strict else self.cold)

    def inputs_for(self, txns: Sequence[Transaction], strict: bool = False) -> np.ndarray:
        cold = None if strict else self.cold
        if not txns:
            return np.empty((0, INPUT_DIM))
        raw = np.stack([raw_features(t, self.aggregates, cold) for t in txns])
        out = np.empty((len(txns), INPUT_DIM))
        out[:, :N_FEATURES] = self.norm.apply(raw)
        out[:, N_FEATURES:] = self.table.matrix[[self.table.row(t.sic) for t in txns]]
        return out


def fit_features(
    train: Sequence[Transaction],
    all_txns: Iterable[Transaction] | None = None,
    provider: Callable[[str], np.ndarray] = embed_sic_default,
    table: SicEmbeddingTable | None = None,
) -> FeatureContext:
    """Fit aggregates and normalizer on ``train``.

    The embedding table covers every SIC in ``all_txns`` (defaults to ``train``)
    so held-out transactions in unseen industries can still be embedded.
    """
    if not train:
        raise DataError("no training transactions to fit features on")
    aggs = compute_aggregates(train)
    if table is None:
        table = SicEmbeddingTable.from_dataset(list(all_txns) if all_txns is not None else train, provider)
    raw = np.stack([raw_features(t, aggs) for t in train])
    by_user: dict[str, list[Transaction]] = defaultdict(list)
    for t in train:
        by_user[t.card_id].append(t)
    temporal = []
    for hist in by_user.values():
        hist.sort(key=lambda t: t.order_key)
        temporal.extend(history_temporal(hist))
    norm = fit_normalizer(raw, temporal)
    return FeatureContext(aggs, table, norm)
