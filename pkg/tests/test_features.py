import hashlib
import io
import math
from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nextbuy.datamodel import Dataset
from nextbuy.errors import DataError, DuplicateKeyError, FormatError, NotFoundError, OrderingError
from nextbuy.features import (
    EMBED_DIM,
    INPUT_DIM,
    N_FEATURES,
    FeatureContext,
    NormStats,
    SicEmbeddingTable,
    assemble_input,
    compute_aggregates,
    embed_sic_default,
    fit_features,
    fit_normalizer,
    load_embeddings,
    raw_features,
    temporal_features,
)


def hashed_embedding(description: str) -> np.ndarray:
    """Independent re-derivation of the documented hash provider."""
    v = np.zeros(EMBED_DIM)
    for tok in "".join(c if c.isalnum() else " " for c in description.lower()).split():
        h = int.from_bytes(hashlib.blake2b(tok.encode(), digest_size=8, person=b"sic-emb-v1").digest(), "little")
        v[h % EMBED_DIM] += -1.0 if h >> 63 else 1.0
    return v / np.linalg.norm(v)


class TestAggregates:
    def test_single_transaction_user(self, make_txn):
        aggs = compute_aggregates([make_txn(amount=36.0)])
        u = aggs.users["c1"]
        assert (u.txn_count, u.mean_amount, u.median_amount, u.total_amount) == (1, 36.0, 36.0, 36.0)

    def test_reservation_price_is_max(self, make_txn):
        aggs = compute_aggregates([make_txn(seq=1, amount=10.0), make_txn(seq=2, amount=20.0)])
        assert aggs.categories[("c1", 5812)].reservation_price == 20.0

    def test_merchant_median(self, make_txn):
        rows = [make_txn(card=f"u{i}", amount=a, supplier="m") for i, a in enumerate([5.0, 15.0, 100.0])]
        assert compute_aggregates(rows).merchants["m"].median_amount == 15.0

    def test_even_median(self, make_txn):
        rows = [make_txn(seq=i, amount=a) for i, a in enumerate([4.0, 1.0, 3.0, 10.0])]
        assert compute_aggregates(rows).users["c1"].median_amount == 3.5

    def test_empty(self):
        aggs = compute_aggregates([])
        assert aggs.users == {} and aggs.categories == {} and aggs.merchants == {}

    def test_pure(self, small_corpus):
        assert compute_aggregates(small_corpus.dataset) == compute_aggregates(small_corpus.dataset)

    @given(amounts=st.lists(st.floats(0.01, 1e4), min_size=1, max_size=20), extra=st.floats(0.01, 1e4))
    @settings(max_examples=60, deadline=None)
    def test_smaller_transaction_keeps_reservation(self, amounts, extra):
        from tests.conftest import txn

        rows = [txn(seq=i, amount=a) for i, a in enumerate(amounts)]
        before = compute_aggregates(rows).categories[("c1", 5812)].reservation_price
        assert before == max(amounts)
        smaller = min(extra, before)
        after = compute_aggregates(rows + [txn(seq=len(rows), amount=smaller)]).categories[("c1", 5812)]
        assert after.reservation_price == before


class TestEmbedding:
    def test_deterministic(self):
        np.testing.assert_array_equal(embed_sic_default("Eating Places"), embed_sic_default("Eating Places"))

    def test_matches_documented_hash(self):
        for desc in ("Fast Food Restaurants", "Air Transportation, Scheduled", "Hotels & Motels 2"):
            np.testing.assert_array_equal(embed_sic_default(desc), hashed_embedding(desc))

    def test_shared_tokens_dominate(self):
        a = embed_sic_default("Fast Food Restaurants")
        # two of three tokens shared and no slot collisions: cosine exactly 2/3
        assert a @ embed_sic_default("Fast Food Restaurant") == pytest.approx(2 / 3, abs=1e-12)
        assert a @ embed_sic_default("Fast Food Restaurant") > a @ embed_sic_default("Airlines")

    @pytest.mark.parametrize("desc", ["", "   ", "--"])
    def test_empty_rejected(self, desc):
        with pytest.raises(DataError):
            embed_sic_default(desc)

    @given(st.text(min_size=1, max_size=60).filter(lambda s: any(c.isascii() and c.isalnum() for c in s)))
    @settings(max_examples=80, deadline=None)
    def test_unit_norm(self, desc):
        assert np.linalg.norm(embed_sic_default(desc)) == pytest.approx(1.0, abs=1e-9)


def _embedding_file(rows: dict[int, np.ndarray]) -> io.StringIO:
    return io.StringIO("".join(f"{k} " + " ".join(repr(float(x)) for x in v) + "\n" for k, v in rows.items()))


class TestLoadEmbeddings:
    def test_three_rows(self, rng):
        table = load_embeddings(_embedding_file({s: rng.normal(size=EMBED_DIM) for s in (10, 20, 30)}))
        assert len(table) == 3

    def test_short_row_names_sic(self, rng):
        with pytest.raises(FormatError, match="4121"):
            load_embeddings(_embedding_file({4121: rng.normal(size=EMBED_DIM - 1)}))

    def test_renormalized(self):
        v = np.zeros(EMBED_DIM)
        v[3] = 2.0
        table = load_embeddings(_embedding_file({7: v}))
        assert np.linalg.norm(table[7]) == pytest.approx(1.0)

    def test_duplicate(self, rng):
        f = io.StringIO("".join(f"5 " + " ".join(repr(float(x)) for x in rng.normal(size=EMBED_DIM)) + "\n" for _ in range(2)))
        with pytest.raises(DuplicateKeyError):
            load_embeddings(f)

    def test_write_round_trip(self, small_corpus):
        table = SicEmbeddingTable.from_dataset(small_corpus.dataset)
        buf = io.StringIO()
        table.write(buf)
        buf.seek(0)
        again = load_embeddings(buf)
        np.testing.assert_array_equal(again.codes, table.codes)
        np.testing.assert_allclose(again.matrix, table.matrix, atol=1e-15)

    def test_unknown_sic(self, small_corpus):
        with pytest.raises(NotFoundError):
            SicEmbeddingTable.from_dataset(small_corpus.dataset)[1]


class TestTemporal:
    def test_first_transaction_sunday(self, make_txn):
        assert tuple(temporal_features(make_txn(d="2018-09-30"))) == (6, 30, 1, 0)

    def test_monday_after_sunday(self, make_txn):
        assert tuple(temporal_features(make_txn(d="2018-10-01"), date(2018, 9, 30))) == (0, 1, 0, 1)

    def test_same_day(self, make_txn):
        assert temporal_features(make_txn(d="2018-10-01"), date(2018, 10, 1)).delta_days == 0

    def test_out_of_order(self, make_txn):
        with pytest.raises(OrderingError):
            temporal_features(make_txn(d="2018-10-01"), date(2018, 10, 2))

    @given(st.dates(date(2000, 1, 1), date(2030, 12, 31)))
    def test_weekend_flag(self, d):
        from tests.conftest import txn

        tf = temporal_features(txn(d=d))
        assert tf.is_weekend == int(tf.day_of_week in (5, 6))
        assert tf.day_of_week == d.weekday()


class TestNormalizer:
    def test_two_point_column(self):
        ns = fit_normalizer([[1.0], [3.0]])
        assert ns.feature_mean[0] == 2.0 and ns.feature_std[0] == 1.0

    def test_constant_column(self):
        ns = fit_normalizer([[5.0], [5.0], [5.0]])
        assert ns.feature_std[0] == 1.0
        assert ns.apply([5.0])[0] == 0.0

    def test_empty(self):
        with pytest.raises(DataError):
            fit_normalizer([])

    @given(
        rows=arrays(np.float64, (6, N_FEATURES), elements=st.floats(-1e6, 1e6)),
        x=arrays(np.float64, N_FEATURES, elements=st.floats(-1e6, 1e6)),
    )
    @settings(max_examples=60, deadline=None)
    def test_round_trip(self, rows, x):
        ns = fit_normalizer(rows)
        np.testing.assert_allclose(ns.invert(ns.apply(x)), x, rtol=1e-9, atol=1e-9 * max(1.0, np.abs(x).max()))

    def test_dict_round_trip(self):
        ns = NormStats(np.arange(16.0), np.arange(1.0, 17.0), 3.5, 2.0)
        again = NormStats.from_dict(ns.to_dict())
        np.testing.assert_array_equal(again.feature_mean, ns.feature_mean)
        assert (again.delta_mean, again.delta_std) == (3.5, 2.0)


@pytest.fixture(scope="module")
def ctx(small_corpus):
    return fit_features(list(small_corpus.dataset), small_corpus.dataset)


class TestAssembly:
    def test_length_and_amount_slot(self, ctx, small_corpus):
        t = small_corpus.dataset.transactions[5]
        x = assemble_input(t, ctx.aggregates, ctx.table, ctx.norm)
        assert x.shape == (INPUT_DIM,)
        assert ctx.norm.invert(x[:N_FEATURES])[0] == pytest.approx(t.amount, abs=1e-9)
        assert np.linalg.norm(x[N_FEATURES:]) == pytest.approx(1.0)

    def test_layout(self, ctx, small_corpus):
        t = small_corpus.dataset.transactions[0]
        raw = raw_features(t, ctx.aggregates)
        u = ctx.aggregates.users[t.card_id]
        m = ctx.aggregates.merchants[t.supplier_id]
        assert raw[1] == pytest.approx(math.log1p(t.amount))
        assert raw[2] == u.txn_count and raw[6] == u.distinct_mcc_count
        assert raw[9] == ctx.aggregates.categories[(t.card_id, t.mcc)].reservation_price
        assert raw[14] == pytest.approx(t.amount / u.mean_amount)
        assert raw[15] == pytest.approx(t.amount / m.mean_amount)

    def test_same_sic_same_embedding(self, ctx, small_corpus):
        by_sic = {}
        for t in small_corpus.dataset:
            if t.sic in by_sic and by_sic[t.sic].card_id != t.card_id:
                a = assemble_input(by_sic[t.sic], ctx.aggregates, ctx.table, ctx.norm)
                b = assemble_input(t, ctx.aggregates, ctx.table, ctx.norm)
                np.testing.assert_array_equal(a[N_FEATURES:], b[N_FEATURES:])
                return
            by_sic.setdefault(t.sic, t)
        pytest.fail("corpus has no SIC shared across users")

    def test_missing_key_strict(self, ctx, make_txn):
        stranger = make_txn(card="stranger", sic=int(ctx.table.codes[0]))
        with pytest.raises(NotFoundError):
            assemble_input(stranger, ctx.aggregates, ctx.table, ctx.norm)
        assert ctx.input_for(stranger).shape == (INPUT_DIM,)

    def test_vectorized_matches_single(self, ctx, small_corpus):
        txns = list(small_corpus.dataset)[:40]
        batch = ctx.inputs_for(txns)
        for t, row in zip(txns, batch):
            np.testing.assert_allclose(row, ctx.input_for(t), rtol=0, atol=1e-12)

    def test_fit_needs_rows(self):
        with pytest.raises(DataError):
            fit_features([], Dataset([]))

    def test_context_type(self, ctx):
        assert isinstance(ctx, FeatureContext)
