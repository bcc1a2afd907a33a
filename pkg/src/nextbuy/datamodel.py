"""Transaction records, dataset container, preprocessing and a seeded synthetic corpus."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Iterable, Iterator, Mapping, Sequence, TextIO

import numpy as np

from .errors import ConfigError, DomainError, DuplicateKeyError, NotFoundError, ParseError

COLUMNS = ("card_id", "date", "seq_no", "amount", "supplier_id", "mcc", "sic", "sic_description")


@dataclass(frozen=True, order=True)
class Transaction:
    card_id: str
    date: date
    seq_no: int
    amount: float
    supplier_id: str
    mcc: int
    sic: int
    sic_description: str

    @property
    def key(self) -> tuple[str, date, int]:
        return (self.card_id, self.date, self.seq_no)

    @property
    def order_key(self) -> tuple[date, int]:
        return (self.date, self.seq_no)


class Dataset:
    """Immutable collection of transactions with a chronological per-user index."""

    def __init__(self, transactions: Iterable[Transaction], n_rejected: int = 0):
        self._txns: tuple[Transaction, ...] = tuple(transactions)
        self.n_rejected = n_rejected
        seen: set[tuple] = set()
        index: dict[str, list[int]] = defaultdict(list)
        for pos, t in enumerate(self._txns):
            if t.key in seen:
                raise DuplicateKeyError(
                    f"duplicate transaction key (card_id={t.card_id}, date={t.date}, seq_no={t.seq_no})"
                )
            seen.add(t.key)
            index[t.card_id].append(pos)
        self._index: dict[str, tuple[int, ...]] = {
            card: tuple(sorted(positions, key=lambda p: self._txns[p].order_key))
            for card, positions in index.items()
        }

    def __len__(self) -> int:
        return len(self._txns)

    def __iter__(self) -> Iterator[Transaction]:
        return iter(self._txns)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Dataset) and self._txns == other._txns

    @property
    def transactions(self) -> tuple[Transaction, ...]:
        return self._txns

    @property
    def users(self) -> list[str]:
        return sorted(self._index)

    def positions(self, card_id: str) -> tuple[int, ...]:
        try:
            return self._index[card_id]
        except KeyError:
            raise NotFoundError(f"unknown card_id {card_id!r}") from None

    def histories(self) -> Iterator[tuple[str, list[Transaction]]]:
        for card in self.users:
            yield card, user_history(self, card)

    def to_csv(self, sink: TextIO) -> None:
        write_transactions(self._txns, sink)


def user_history(ds: Dataset, card_id: str) -> list[Transaction]:
    """Transactions of one user, ascending by (date, seq_no)."""
    return [ds.transactions[p] for p in ds.positions(card_id)]


def _parse_row(row: Sequence[str], line: int) -> Transaction:
    if len(row) != len(COLUMNS):
        raise ParseError(f"expected {len(COLUMNS)} fields, got {len(row)}", line)
    card_id, d, seq_no, amount, supplier_id, mcc, sic, desc = (c.strip() for c in row)
    try:
        parsed_date = date.fromisoformat(d)
        seq = int(seq_no)
        amt = float(amount.lstrip("$"))
        mcc_i = int(mcc)
        sic_i = int(sic)
    except ValueError as exc:
        raise ParseError(str(exc), line) from None
    if not card_id or not supplier_id:
        raise ParseError("empty card_id or supplier_id", line)
    if seq < 0:
        raise ParseError("negative seq_no", line)
    if not desc:
        raise ParseError("empty sic_description", line)
    if not math.isfinite(amt):
        raise ParseError("non-finite amount", line)
    return Transaction(card_id, parsed_date, seq, amt, supplier_id, mcc_i, sic_i, desc)


def parse_transactions(source: TextIO | str) -> Dataset:
    """Read the delimited transaction format.

    Rows with amount <= 0 are dropped and counted in ``Dataset.n_rejected``;
    any other malformed row raises ``ParseError`` carrying the 1-based line number.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != COLUMNS:
        raise ParseError(f"header must be {','.join(COLUMNS)}", 1)
    txns: list[Transaction] = []
    rejected = 0
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        t = _parse_row(row, line)
        if t.amount <= 0:
            rejected += 1
            continue
        txns.append(t)
    return Dataset(txns, n_rejected=rejected)


def write_transactions(txns: Iterable[Transaction], sink: TextIO) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(COLUMNS)
    for t in txns:
        writer.writerow(
            [t.card_id, t.date.isoformat(), t.seq_no, repr(t.amount), t.supplier_id, t.mcc, t.sic, t.sic_description]
        )


def preprocess(ds: Dataset, min_txns: int = 10, min_categories: int = 5) -> Dataset:
    """Keep users with at least ``min_txns`` transactions AND ``min_categories`` distinct MCCs."""
    keep = set()
    for card in ds.users:
        hist = user_history(ds, card)
        if len(hist) >= min_txns and len({t.mcc for t in hist}) >= min_categories:
            keep.add(card)
    return Dataset((t for t in ds if t.card_id in keep), n_rejected=ds.n_rejected)


def density(n_users: int, n_items: int, n_interactions: int) -> float:
    if n_users <= 0 or n_items <= 0:
        raise DomainError("density needs at least one user and one item")
    return n_interactions / (n_users * n_items)


@dataclass(frozen=True)
class DatasetStats:
    n_users: int
    n_sics: int
    n_transactions: int
    density: float


def stats(ds: Dataset) -> DatasetStats:
    n_users = len(ds.users)
    n_sics = len({t.sic for t in ds})
    n = len(ds)
    d = density(n_users, n_sics, n) if n_users and n_sics else 0.0
    return DatasetStats(n_users, n_sics, n, d)


# --------------------------------------------------------------------------
# synthetic corpus

# (sic, mcc, description, typical dollar amount).  The first twenty typical amounts
# sit on a log-spaced ladder from $8 to $420, so no two default categories share
# a spending level.
SIC_CATALOG: tuple[tuple[int, int, str, float], ...] = (
    (5812, 5812, "Eating Places", 42.0),
    (5814, 5814, "Fast Food Restaurants", 10.0),
    (4121, 4121, "Taxicabs", 18.0),
    (4512, 3000, "Air Transportation Scheduled", 420.0),
    (7011, 7011, "Hotels and Motels", 277.0),
    (5541, 5541, "Gasoline Service Stations", 52.0),
    (5411, 5411, "Grocery Stores", 79.0),
    (5912, 5912, "Drug Stores and Proprietary Stores", 15.0),
    (7512, 7512, "Passenger Car Rental", 182.0),
    (5813, 5813, "Drinking Places Alcoholic Beverages", 28.0),
    (4111, 4111, "Local Suburban Transit Commuter Passenger Transportation", 8.0),
    (4011, 4112, "Railroads Line Haul Operating", 120.0),
    (5942, 5942, "Book Stores", 23.0),
    (5732, 5732, "Radio Television Consumer Electronics Stores", 225.0),
    (5311, 5311, "Department Stores", 98.0),
    (7523, 7523, "Parking Lots and Garages", 12.0),
    (4722, 4722, "Travel Agencies Tour Operators", 341.0),
    (5999, 5999, "Miscellaneous Retail Stores", 34.0),
    (7991, 7991, "Tourist Attractions and Exhibits", 64.0),
    (5661, 5661, "Shoe Stores", 148.0),
    (5651, 5651, "Family Clothing Stores", 78.0),
    (8062, 8062, "General Medical Hospitals", 120.0),
    (7832, 7832, "Motion Picture Theaters", 19.0),
    (5192, 5192, "Newspapers Periodicals Wholesale", 8.0),
    (4814, 4814, "Telecommunication Services", 70.0),
    (5462, 5462, "Bakeries", 11.0),
    (5441, 5441, "Candy Nut Confectionery Stores", 7.0),
    (7997, 7997, "Membership Clubs Sports Recreation", 60.0),
    (8999, 8999, "Professional Services", 150.0),
    (5111, 5111, "Stationery Office Supplies", 33.0),
)


@dataclass
class SyntheticConfig:
    n_users: int = 500
    n_sics: int = 20
    n_merchants: int = 400
    txns_per_user: tuple[int, int] = (80, 120)
    transition_matrix: np.ndarray | None = None
    dominant_prob: float = 0.95
    amount_params: dict[int, tuple[float, float]] | None = None
    amount_sigma: float = 0.15
    start_date: date = date(2018, 9, 30)
    end_date: date = date(2019, 3, 31)
    seed: int = 7

    def __post_init__(self) -> None:
        if isinstance(self.start_date, str):
            self.start_date = date.fromisoformat(self.start_date)
        if isinstance(self.end_date, str):
            self.end_date = date.fromisoformat(self.end_date)
        self.txns_per_user = tuple(int(v) for v in self.txns_per_user)  # type: ignore[assignment]
        if self.transition_matrix is not None:
            self.transition_matrix = np.asarray(self.transition_matrix, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if self.n_users < 1 or self.n_sics < 1 or self.n_merchants < self.n_sics:
            raise ConfigError("need n_users >= 1, n_sics >= 1 and n_merchants >= n_sics")
        lo, hi = self.txns_per_user
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad txns_per_user range {self.txns_per_user}")
        n_days = (self.end_date - self.start_date).days + 1
        if hi > n_days:
            raise ConfigError(
                f"{hi} transactions per user cannot have strictly increasing dates in {n_days} days"
            )
        if not 0.0 <= self.dominant_prob <= 1.0:
            raise ConfigError("dominant_prob must lie in [0, 1]")
        if self.transition_matrix is not None:
            P = self.transition_matrix
            if P.shape != (self.n_sics, self.n_sics):
                raise ConfigError(f"transition matrix must be {self.n_sics}x{self.n_sics}")
            if (P < 0).any() or np.abs(P.sum(axis=1) - 1.0).max() > 1e-9:
                raise ConfigError("transition matrix rows must be non-negative and sum to 1")
        if self.amount_params is not None:
            if any(s < 0 for _, s in self.amount_params.values()):
                raise ConfigError("log-normal sigma must be >= 0")

    @classmethod
    def from_mapping(cls, data: Mapping) -> "SyntheticConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "amount_params" in kwargs and kwargs["amount_params"] is not None:
            kwargs["amount_params"] = {int(k): tuple(v) for k, v in kwargs["amount_params"].items()}
        return cls(**kwargs)

    def categories(self) -> list[tuple[int, int, str, float]]:
        cats = list(SIC_CATALOG[: self.n_sics])
        for k in range(len(cats), self.n_sics):
            cats.append((9000 + k, 9000 + k, f"Industry Category {k}", 50.0))
        return cats

    def resolved_transition_matrix(self) -> np.ndarray:
        if self.transition_matrix is not None:
            return self.transition_matrix
        return planted_transition_matrix(self.n_sics, self.dominant_prob, self.seed)

    def resolved_amount_params(self) -> dict[int, tuple[float, float]]:
        params = {sic: (math.log(typical), self.amount_sigma) for sic, _, _, typical in self.categories()}
        if self.amount_params:
            params.update(self.amount_params)
        return params


def planted_transition_matrix(n: int, dominant: float = 0.95, seed: int = 0) -> np.ndarray:
    """Row-stochastic matrix where each state has one preferred successor.

    The successor map is a random permutation; the remaining ``1 - dominant``
    mass is spread over the other states with Dirichlet(1) weights.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    succ = rng.permutation(n)
    P = np.zeros((n, n))
    for i in range(n):
        if n == 1:
            P[i, 0] = 1.0
            continue
        rest = rng.dirichlet(np.ones(n - 1)) * (1.0 - dominant)
        others = [j for j in range(n) if j != succ[i]]
        P[i, others] = rest
        P[i, succ[i]] = dominant
    P /= P.sum(axis=1, keepdims=True)
    return P


def bayes_optimal_top1(P: np.ndarray, prev_states: Sequence[int] | None = None) -> float:
    """Best achievable top-1 accuracy for next-state prediction given the current state.

    Averages ``max_j P[i, j]`` over ``prev_states`` when given, otherwise over
    the stationary distribution of the chain.
    """
    best = P.max(axis=1)
    if prev_states is not None:
        return float(np.mean(best[np.asarray(prev_states)]))
    w, v = np.linalg.eig(P.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    pi = pi / pi.sum()
    return float(pi @ best)


def _card_hash(seed: int, u: int) -> str:
    return hashlib.sha256(f"{seed}:{u}".encode()).hexdigest()[:24]


@dataclass(frozen=True)
class SyntheticMerchant:
    supplier_id: str
    sic: int
    mcc: int
    latitude: float
    longitude: float


@dataclass
class SyntheticCorpus:
    dataset: Dataset
    merchants: list[SyntheticMerchant] = field(default_factory=list)
    transition_matrix: np.ndarray | None = None
    sic_codes: list[int] = field(default_factory=list)


def generate_corpus(cfg: SyntheticConfig, center: tuple[float, float] = (40.7128, -74.0060)) -> SyntheticCorpus:
    """Generate transactions plus the merchant geography they were drawn from."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    cats = cfg.categories()
    sics = [c[0] for c in cats]
    P = cfg.resolved_transition_matrix()
    cum = np.cumsum(P, axis=1)
    amount_params = cfg.resolved_amount_params()
    n_days = (cfg.end_date - cfg.start_date).days + 1

    merchants: list[SyntheticMerchant] = []
    by_sic: dict[int, list[int]] = defaultdict(list)
    for m in range(cfg.n_merchants):
        s = m % cfg.n_sics
        sid = str(5_400_000_000 + m * 7919)
        lat = center[0] + float(rng.normal(0.0, 0.05))
        lon = center[1] + float(rng.normal(0.0, 0.05))
        merchants.append(SyntheticMerchant(sid, cats[s][0], cats[s][1], round(lat, 6), round(lon, 6)))
        by_sic[s].append(m)

    txns: list[Transaction] = []
    seq = 100_000
    lo, hi = cfg.txns_per_user
    for u in range(cfg.n_users):
        card = _card_hash(cfg.seed, u)
        n = int(rng.integers(lo, hi + 1))
        days = np.sort(rng.choice(n_days, size=n, replace=False))
        state = int(rng.integers(cfg.n_sics))
        draws = rng.random(n)
        normals = rng.standard_normal(n)
        picks = rng.random(n)
        for i in range(n):
            if i > 0:
                state = int(min(np.searchsorted(cum[state], draws[i], side="right"), cfg.n_sics - 1))
            sic, mcc, desc, _ = cats[state]
            mu, sigma = amount_params[sic]
            amount = max(round(math.exp(mu + sigma * normals[i]), 2), 0.01)
            pool = by_sic[state]
            merchant = merchants[pool[int(picks[i] * len(pool))]]
            seq += 1
            txns.append(
                Transaction(
                    card,
                    cfg.start_date + timedelta(days=int(days[i])),
                    seq,
                    amount,
                    merchant.supplier_id,
                    mcc,
                    sic,
                    desc,
                )
            )
    return SyntheticCorpus(Dataset(txns), merchants, P, sics)


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    return generate_corpus(cfg).dataset


def sic_sequences(ds: Dataset) -> dict[str, list[int]]:
    return {card: [t.sic for t in hist] for card, hist in ds.histories()}


def sic_frequencies(ds: Dataset) -> Counter:
    return Counter(t.sic for t in ds)
