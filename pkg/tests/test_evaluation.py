"""Ranking metrics, amount error, reference rankers, reports and the L sweep."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nextbuy.errors import DataError, DomainError
from nextbuy.evaluation import (
    EvalReport,
    MetricRow,
    RankedList,
    amount_mae,
    ap_at_k,
    format_table,
    mae_by_sic,
    map_at_k,
    markov_baseline,
    mrr_at_k,
    pearson,
    popularity_baseline,
    recall_at_k,
)
from nextbuy.experiment import evaluate_length, run_sweep
from nextbuy.seqmodel import SeqTrainConfig


def ap_literal(target: int, ranked, K: int) -> float:
    """Average precision summed term by term: precision at k times relevance at k, over T=1 relevant item."""
    T = 1
    total = 0.0
    hits = 0
    for k in range(1, K + 1):
        rel = 1 if k <= len(ranked) and ranked[k - 1] == target else 0
        hits += rel
        total += (hits / k) * rel
    return total / T


ranked_lists = st.lists(st.integers(0, 30), min_size=0, max_size=15, unique=True)


class TestAveragePrecision:
    def test_rank_one(self):
        assert ap_at_k(7, [7, 1, 2, 3, 4], 5) == 1.0

    def test_rank_three(self):
        assert ap_at_k(7, [1, 2, 7, 3, 4], 5) == pytest.approx(1 / 3, abs=1e-9)

    def test_absent_from_top(self):
        assert ap_at_k(7, [1, 2, 3, 4, 5, 7], 5) == 0.0

    def test_duplicates_rejected(self):
        with pytest.raises(DataError):
            ap_at_k(1, [1, 1, 2], 3)

    def test_k_must_be_positive(self):
        with pytest.raises(DomainError):
            ap_at_k(1, [1], 0)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 30), ranked_lists, st.integers(1, 20))
    def test_matches_literal_sum(self, target, ranked, K):
        assert ap_at_k(target, ranked, K) == ap_literal(target, ranked, K)


class TestAggregates:
    def test_hit_and_miss(self):
        cases = [RankedList((3, 1, 2), 3), RankedList((1, 2, 4, 5, 6, 7), 9)]
        assert map_at_k(cases, 5) == 0.5
        assert recall_at_k(cases, 5) == 0.5

    def test_all_first(self):
        assert map_at_k([RankedList((i, 99), i) for i in range(5)], 5) == 1.0

    def test_empty(self):
        for fn in (map_at_k, recall_at_k, mrr_at_k):
            with pytest.raises(DomainError):
                fn([], 1)

    def test_reciprocal_rank(self):
        assert mrr_at_k([RankedList((1, 2, 3), 2)], 2) == 0.5
        assert mrr_at_k([RankedList((1, 2, 3), 4)], 3) == 0.0

    def test_ranked_list_rejects_duplicates(self):
        with pytest.raises(DataError):
            RankedList((1, 2, 1), 2)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 30), ranked_lists), min_size=1, max_size=20), st.integers(1, 12))
    def test_identities(self, raw, K):
        cases = [RankedList(tuple(r), t) for t, r in raw]
        assert map_at_k(cases, K) == mrr_at_k(cases, K)
        assert recall_at_k(cases, 1) == map_at_k(cases, 1)
        assert 0.0 <= map_at_k(cases, K) <= recall_at_k(cases, K) <= 1.0

    def test_thousand_random_lists(self):
        rng = np.random.default_rng(0)
        cases = []
        for _ in range(1000):
            ranked = tuple(int(x) for x in rng.permutation(40)[: rng.integers(1, 20)])
            cases.append(RankedList(ranked, int(rng.integers(0, 40))))
        for K in (1, 5, 10):
            assert all(ap_at_k(c.target, c.ranked, K) == ap_literal(c.target, c.ranked, K) for c in cases)
            assert map_at_k(cases, K) == mrr_at_k(cases, K)


class TestAmountError:
    def test_perfect(self):
        assert amount_mae([(3.0, 3.0), (8.5, 8.5)]) == 0.0

    def test_pairs(self):
        assert amount_mae([(10, 20), (30, 10)]) == 15.0

    def test_single(self):
        assert amount_mae([(0.0, 56.73)]) == pytest.approx(56.73)

    def test_empty(self):
        with pytest.raises(DomainError):
            amount_mae([])


def pearson_literal(x, y) -> float:
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    return cov / math.sqrt(sum((a - mx) ** 2 for a in x) * sum((b - my) ** 2 for b in y))


class TestMaeBySic:
    def test_constant_mae_reports_zero(self):
        records = [(sic, mean + 2.0, mean) for sic, mean in [(1, 10.0), (2, 50.0), (3, 90.0)] for _ in range(5)]
        out = mae_by_sic(records)
        assert out.correlation == 0.0 and not out.correlation_defined

    def test_proportional_is_one(self):
        records = [(sic, 1.5 * mean, mean) for sic, mean in [(1, 10.0), (2, 50.0), (3, 90.0)] for _ in range(6)]
        assert mae_by_sic(records).correlation == pytest.approx(1.0, abs=1e-12)

    def test_matches_literal_pearson(self, rng):
        records = []
        for sic in range(8):
            for _ in range(7):
                actual = float(rng.uniform(5, 200))
                records.append((sic, actual + float(rng.normal(scale=10 + sic)), actual))
        out = mae_by_sic(records)
        maes = [out.table[s].mae for s in range(8)]
        means = [out.table[s].mean_amount for s in range(8)]
        assert out.correlation == pytest.approx(pearson_literal(maes, means), abs=1e-12)

    def test_small_groups_left_out_of_correlation(self):
        records = [(1, 11.0, 10.0)] * 5 + [(2, 60.0, 50.0)] * 5 + [(3, 0.0, 1000.0)] * 2
        out = mae_by_sic(records)
        assert out.table[3].n == 2
        assert out.correlation == pytest.approx(1.0)

    def test_pearson_short_input(self):
        assert pearson([1.0], [2.0]) == (0.0, False)


class TestBaselines:
    def test_popularity_order(self):
        seqs = {"u": [1, 1, 1, 2, 2], "v": [1, 2, 1]}  # 1: 5 of 8, 2: 3 of 8
        assert popularity_baseline(seqs).rank() == (1, 2)

    def test_popularity_ties_by_code(self):
        assert popularity_baseline({"u": [9, 4, 7]}).rank(9) == (4, 7, 9)

    def test_single_sic(self):
        assert popularity_baseline({"u": [5, 5]}).rank()[0] == 5

    def test_popularity_empty(self):
        with pytest.raises(DataError):
            popularity_baseline({"u": []})

    def test_markov_alternating_chain(self):
        m = markov_baseline({"u": [1, 2, 1, 2, 1, 2]})
        assert m.rank(1)[0] == 2 and m.rank(2)[0] == 1

    def test_markov_unseen_state_falls_back(self):
        m = markov_baseline({"u": [1, 2, 2, 2, 3]})
        assert m.rank(42) == popularity_baseline({"u": [1, 2, 2, 2, 3]}).rank()

    def test_markov_rows_normalize(self):
        m = markov_baseline({"u": [1, 2, 3, 1, 3, 3, 2], "v": [2, 2, 1]})
        for s in (1, 2, 3):
            assert math.fsum(m.probabilities(s).values()) == pytest.approx(1.0, abs=1e-12)

    def test_markov_smoothing_counts(self):
        m = markov_baseline({"u": [1, 2, 1, 3, 1, 2]})
        # from 1: two moves to 2, one to 3; three states, smoothing 1
        assert m.probabilities(1) == pytest.approx({1: 1 / 6, 2: 3 / 6, 3: 2 / 6})

    def test_transactions_accepted(self, make_txn):
        txns = [make_txn(d=f"2019-01-0{i + 1}", sic=s, mcc=s) for i, s in enumerate([1, 2, 1, 2])]
        assert markov_baseline(txns).rank(1)[0] == 2


class TestReport:
    def make(self) -> EvalReport:
        rep = EvalReport(L=5, seed=3, corpus_id="abc")
        rep.add_ranking_rows("seqnbt", [RankedList((1, 2, 3), 2), RankedList((4, 5), 4)], (1, 5))
        rep.rows.append(MetricRow("seqnbt", "MAE", None, 5, 12.5))
        return rep

    def test_rows_per_k(self):
        rep = self.make()
        assert rep.value("seqnbt", "MAP", 1) == 0.5
        assert rep.value("seqnbt", "MAP", 5) == 0.75
        assert rep.value("seqnbt", "Recall", 5) == 1.0
        with pytest.raises(KeyError):
            rep.value("markov", "MAP", 1)

    def test_records(self):
        text = self.make().to_records()
        lines = text.splitlines()
        assert lines[0] == "metric,K,L,value"
        assert "seqnbt:MAP,1,5,0.5" in lines
        assert "seqnbt:MAE,,5,12.5" in lines

    def test_table(self):
        table = format_table([self.make()])
        assert table.splitlines()[0].split() == ["model", "L", "MAP@1", "MAP@5", "Recall@1", "Recall@5", "MAE($)"]
        assert "12.50" in table


class TestPipelineEvaluation:
    def test_report_structure(self, trained):
        prepared, seq = trained
        res = evaluate_length(prepared, SeqTrainConfig(L=5), model=seq)
        models = {r.model for r in res.report.rows}
        assert models == {"seqnbt", "popularity", "markov"}
        for model in ("seqnbt", "popularity", "markov"):
            for K in (1, 5, 10):
                assert res.report.value(model, "MAP", K) <= res.report.value(model, "Recall", K)
        assert res.report.n_test == len(res.samples[2]) > 0
        assert res.report.value("seqnbt", "MAE") >= 0.0

    def test_sweep_skips_unsupported_length(self, trained):
        prepared, _ = trained
        result = run_sweep(prepared, L_values=(3, 60), seq_cfg=SeqTrainConfig(epochs=1, hidden=8, n_layers=1))
        assert [r.L for r in result.reports] == [3]
        assert result.skipped == [60]
        assert result.best_L() == 3
