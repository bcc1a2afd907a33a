"""Ranking/regression metrics, reference rankers and evaluation reports."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datamodel import Dataset, Transaction
from .errors import DataError, DomainError


@dataclass(frozen=True)
class RankedList:
    ranked: tuple[int, ...]
    target: int
    target_amount: float = float("nan")

    def __post_init__(self) -> None:
        object.__setattr__(self, "ranked", tuple(self.ranked))
        _check_unique(self.ranked)


def _check_unique(ranked: Sequence[int]) -> None:
    if len(set(ranked)) != len(ranked):
        raise DataError(f"ranked list contains duplicate entries: {list(ranked)}")


def _rank(target: int, ranked: Sequence[int], K: int) -> int | None:
    if K < 1:
        raise DomainError("K must be >= 1")
    for r, item in enumerate(ranked[:K], 1):
        if item == target:
            return r
    return None


def ap_at_k(target: int, ranked: Sequence[int], K: int) -> float:
    """Average precision at K for a single relevant item: 1/rank if ranked within K, else 0."""
    _check_unique(ranked)
    r = _rank(target, ranked, K)
    return 0.0 if r is None else 1.0 / r


def _cases(cases: Sequence[RankedList]) -> Sequence[RankedList]:
    if not cases:
        raise DomainError("no evaluation cases")
    return cases


def map_at_k(cases: Sequence[RankedList], K: int) -> float:
    cases = _cases(cases)
    return math.fsum(ap_at_k(c.target, c.ranked, K) for c in cases) / len(cases)


def recall_at_k(cases: Sequence[RankedList], K: int) -> float:
    cases = _cases(cases)
    return sum(_rank(c.target, c.ranked, K) is not None for c in cases) / len(cases)


def mrr_at_k(cases: Sequence[RankedList], K: int) -> float:
    cases = _cases(cases)
    total = []
    for c in cases:
        r = _rank(c.target, c.ranked, K)
        total.append(0.0 if r is None else 1.0 / r)
    return math.fsum(total) / len(cases)


def amount_mae(pairs: Iterable[tuple[float, float]]) -> float:
    pairs = list(pairs)
    if not pairs:
        raise DomainError("no amount pairs")
    return math.fsum(abs(p - a) for p, a in pairs) / len(pairs)


def pearson(x: Sequence[float], y: Sequence[float]) -> tuple[float, bool]:
    """Pearson correlation and whether it is defined; a constant input yields (0.0, False)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        return 0.0, False
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        return 0.0, False
    return float(dx @ dy) / (sx * sy), True


@dataclass(frozen=True)
class SicMae:
    n: int
    mae: float
    mean_amount: float


@dataclass(frozen=True)
class MaeBySic:
    table: dict[int, SicMae]
    correlation: float
    correlation_defined: bool
    min_cases: int


def mae_by_sic(records: Iterable[tuple[int, float, float]], min_cases: int = 5) -> MaeBySic:
    """Per-SIC amount MAE from (sic, predicted, actual) triples.

    The correlation between per-SIC MAE and per-SIC mean actual amount only
    uses SICs with at least ``min_cases`` cases.
    """
    groups: dict[int, list[tuple[float, float]]] = defaultdict(list)
    for sic, pred, actual in records:
        groups[sic].append((pred, actual))
    table = {
        sic: SicMae(len(g), amount_mae(g), math.fsum(a for _, a in g) / len(g)) for sic, g in sorted(groups.items())
    }
    eligible = [v for v in table.values() if v.n >= min_cases]
    r, ok = pearson([v.mae for v in eligible], [v.mean_amount for v in eligible])
    return MaeBySic(table, r, ok, min_cases)


# ---- reference rankers --------------------------------------------------------


def _sequences(train: Dataset | Mapping[str, Sequence[int]] | Iterable[Transaction]) -> dict[str, list[int]]:
    if isinstance(train, Mapping):
        return {k: list(v) for k, v in train.items()}
    by_user: dict[str, list[Transaction]] = defaultdict(list)
    for t in train:
        by_user[t.card_id].append(t)
    return {u: [t.sic for t in sorted(h, key=lambda t: t.order_key)] for u, h in sorted(by_user.items())}


class PopularityRanker:
    """Same ranking for every query: global training frequency, ties by SIC code."""

    def __init__(self, counts: Mapping[int, int]):
        self.counts = dict(counts)
        self.order = tuple(sorted(self.counts, key=lambda s: (-self.counts[s], s)))

    def rank(self, last_sic: int | None = None) -> tuple[int, ...]:
        return self.order


def popularity_baseline(train) -> PopularityRanker:
    counts: Counter = Counter()
    for seq in _sequences(train).values():
        counts.update(seq)
    if not counts:
        raise DataError("popularity baseline needs at least one transaction")
    return PopularityRanker(counts)


class MarkovRanker:
    """First-order transition model with additive smoothing.

    Next-SIC candidates are ordered by P(next | last); equal probabilities fall
    back to popularity order.  Unknown current SICs get the popularity ranking.
    """

    def __init__(self, transitions: Mapping[int, Counter], popularity: PopularityRanker, smoothing: float = 1.0):
        self.smoothing = smoothing
        self.popularity = popularity
        self.states = popularity.order
        self.transitions = {s: Counter(c) for s, c in transitions.items()}
        self._pop_pos = {s: i for i, s in enumerate(self.states)}

    def probabilities(self, last_sic: int) -> dict[int, float]:
        row = self.transitions.get(last_sic)
        if row is None:
            total = sum(self.popularity.counts.values())
            return {s: self.popularity.counts[s] / total for s in self.states}
        denom = sum(row.values()) + self.smoothing * len(self.states)
        return {s: (row.get(s, 0) + self.smoothing) / denom for s in self.states}

    def rank(self, last_sic: int | None) -> tuple[int, ...]:
        if last_sic not in self.transitions:
            return self.popularity.order
        p = self.probabilities(last_sic)
        return tuple(sorted(self.states, key=lambda s: (-p[s], self._pop_pos[s])))


def markov_baseline(train, smoothing: float = 1.0) -> MarkovRanker:
    seqs = _sequences(train)
    pop = popularity_baseline(seqs)
    transitions: dict[int, Counter] = defaultdict(Counter)
    for seq in seqs.values():
        for a, b in zip(seq, seq[1:]):
            transitions[a][b] += 1
    return MarkovRanker(transitions, pop, smoothing)


# ---- reports ---------------------------------------------------------------------

K_DEFAULT = (1, 5, 10)


@dataclass(frozen=True)
class MetricRow:
    model: str
    metric: str
    K: int | None
    L: int
    value: float


@dataclass
class EvalReport:
    L: int
    seed: int
    corpus_id: str
    rows: list[MetricRow] = field(default_factory=list)
    mae_by_sic: MaeBySic | None = None
    n_test: int = 0
    metadata: dict = field(default_factory=dict)

    def value(self, model: str, metric: str, K: int | None = None) -> float:
        for r in self.rows:
            if r.model == model and r.metric == metric and r.K == K:
                return r.value
        raise KeyError((model, metric, K))

    def add_ranking_rows(self, model: str, cases: Sequence[RankedList], K_values: Sequence[int] = K_DEFAULT):
        for K in K_values:
            self.rows.append(MetricRow(model, "MAP", K, self.L, map_at_k(cases, K)))
        for K in K_values:
            self.rows.append(MetricRow(model, "Recall", K, self.L, recall_at_k(cases, K)))

    def to_records(self) -> str:
        """Machine-readable ``metric,K,L,value`` lines; metric is ``<model>:<name>``."""
        lines = ["metric,K,L,value"]
        for r in self.rows:
            lines.append(f"{r.model}:{r.metric},{'' if r.K is None else r.K},{r.L},{r.value!r}")
        if self.mae_by_sic is not None:
            lines.append(f"seqnbt:MAE_SIC_corr,,{self.L},{self.mae_by_sic.correlation!r}")
        return "\n".join(lines) + "\n"


def format_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text table with one line per (model, L) and MAP/Recall columns per K."""
    Ks = sorted({r.K for rep in reports for r in rep.rows if r.K is not None})
    header = ["model", "L"] + [f"MAP@{k}" for k in Ks] + [f"Recall@{k}" for k in Ks] + ["MAE($)"]
    lines = []
    for rep in reports:
        models = list(dict.fromkeys(r.model for r in rep.rows))
        for model in models:
            cells = [model, str(rep.L)]
            for metric in ("MAP", "Recall"):
                for k in Ks:
                    try:
                        cells.append(f"{rep.value(model, metric, k):.4f}")
                    except KeyError:
                        cells.append("-")
            try:
                cells.append(f"{rep.value(model, 'MAE'):.2f}")
            except KeyError:
                cells.append("-")
            lines.append(cells)
    widths = [max(len(row[i]) for row in [header] + lines) for i in range(len(header))]
    fmt = lambda row: "  ".join(c.rjust(w) if i > 0 else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))  # noqa: E731
    out = [fmt(header), "  ".join("-" * w for w in widths)]
    out.extend(fmt(r) for r in lines)
    return "\n".join(out) + "\n"
