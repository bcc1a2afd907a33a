"""Window extraction, splitting, the GRU sequence model and its training loop."""

from __future__ import annotations

import io
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nextbuy import neural as nn
from nextbuy.errors import FormatError, ShapeError
from nextbuy.experiment import make_samples
from nextbuy.seqmodel import (
    HistoryStep,
    SeqModel,
    SeqTrainConfig,
    SequenceSample,
    extract_windows,
    predict_next,
    seq_init,
    seq_load,
    seq_loss_graph,
    seq_save,
    split_samples,
    train_seqnbt,
    window_starts,
)


def make_history(n: int, seed: int = 0) -> list[HistoryStep]:
    rng = np.random.default_rng(seed)
    day0 = date(2019, 1, 1)
    return [
        HistoryStep(rng.normal(size=32), rng.uniform(size=4), (day0 + timedelta(days=i // 2), i % 2 + 1), sic=i)
        for i in range(n)
    ]


def brute_force_starts(n: int, L: int, stride: int) -> list[int]:
    return [s for s in range(n) if s % stride == 0 and s + L <= n - 1]


def fake_samples(user: str, k: int) -> list[SequenceSample]:
    return [
        SequenceSample(np.zeros((2, 36)), np.zeros(32), user, (date(2019, 1, 1) + timedelta(days=i), 1))
        for i in range(k)
    ]


class TestWindows:
    def test_worked_example(self):
        hist = make_history(10)
        position = {h.key: i for i, h in enumerate(hist)}
        samples = extract_windows(hist, L=3, stride=2)
        assert [position[s.input_keys[0]] for s in samples] == [0, 2, 4, 6]

    def test_history_equal_to_L_gives_nothing(self):
        assert extract_windows(make_history(5), L=5) == []

    def test_history_of_L_plus_one_gives_one(self):
        (only,) = extract_windows(make_history(6), L=5)
        assert only.target_key == make_history(6)[5].key

    def test_sample_contents(self):
        hist = make_history(8, seed=3)
        s = extract_windows(hist, L=3, stride=2, user="u")[1]
        np.testing.assert_array_equal(s.inputs, np.stack([h.row for h in hist[2:5]]))
        np.testing.assert_array_equal(s.target, hist[5].encoding)
        assert s.inputs.shape == (3, 36)
        assert s.user == "u" and s.target_sic == 5 and s.last_sic == 4

    @pytest.mark.parametrize("L,stride", [(0, 2), (3, 0)])
    def test_invalid_arguments(self, L, stride):
        with pytest.raises(ValueError):
            extract_windows(make_history(5), L, stride)

    def test_exhaustive_brute_force(self):
        for n in range(31):
            hist = make_history(n)
            for L in range(1, 11):
                for stride in range(1, 4):
                    got = [s.input_keys[0] for s in extract_windows(hist, L, stride)]
                    want = [hist[s].key for s in brute_force_starts(n, L, stride)]
                    assert got == want, (n, L, stride)
                    assert len(got) == max(0, (n - L - 1) // stride + 1)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 40), st.integers(1, 12), st.integers(1, 4))
    def test_no_lookahead(self, n, L, stride):
        for s in extract_windows(make_history(n), L, stride):
            assert len(s.input_keys) == L
            assert list(s.input_keys) == sorted(s.input_keys)
            assert all(k < s.target_key for k in s.input_keys)

    def test_window_starts_range(self):
        assert list(window_starts(10, 3, 2)) == [0, 2, 4, 6]


class TestSplit:
    def test_four_samples(self):
        train, val, test = split_samples({"a": fake_samples("a", 4)})
        assert (len(train), len(val), len(test)) == (2, 1, 1)
        assert test[0].target_key > val[0].target_key > train[-1].target_key

    def test_two_samples_train_only(self):
        assert tuple(map(len, split_samples({"a": fake_samples("a", 2)}))) == (2, 0, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.dictionaries(st.text("abc", min_size=1, max_size=3), st.integers(0, 8), max_size=6))
    def test_partition(self, counts):
        by_user = {u: fake_samples(u, k) for u, k in counts.items()}
        train, val, test = split_samples(by_user)
        ids = [id(s) for part in (train, val, test) for s in part]
        assert len(ids) == len(set(ids)) == sum(counts.values())
        assert len(test) == len(val) == sum(1 for k in counts.values() if k >= 3)


class TestModel:
    def test_dimensions(self):
        m = seq_init(0)
        assert [(p.d_in, p.d_h) for p in m.layers] == [(36, 64), (64, 64), (64, 64)]
        assert (m.head.fan_in, m.head.fan_out) == (64, 32)
        assert m.d_in == 36

    def test_same_seed_same_model(self):
        a, b = seq_init(3).tensors(), seq_init(3).tensors()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_tensor_names(self):
        names = seq_init(0, n_layers=2).tensors()
        assert {"head.W", "head.b"} <= set(names)
        assert all(k.startswith(("gru.0.", "gru.1.", "head.")) for k in names)

    def test_predict_shape_and_purity(self, rng):
        m = seq_init(1)
        X = rng.normal(size=(5, 36))
        a, b = predict_next(m, X), predict_next(m, X)
        assert a.shape == (32,)
        assert np.array_equal(a, b)

    def test_batch_matches_single(self, rng):
        m = seq_init(1)
        X = rng.normal(size=(3, 5, 36))
        np.testing.assert_allclose(predict_next(m, X)[1], predict_next(m, X[1]), rtol=0, atol=1e-12)

    def test_matches_numpy_forward(self, rng):
        m = seq_init(2, n_layers=2)
        X = rng.normal(size=(2, 4, 36))
        h = nn.gru_stack_forward(X, m.layers)
        np.testing.assert_allclose(predict_next(m, X), nn.dense_forward(h, m.head), rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("shape", [(5, 35), (0, 36), (2, 3, 4, 36)])
    def test_bad_inputs(self, shape):
        with pytest.raises(ShapeError):
            predict_next(seq_init(0), np.zeros(shape))

    def test_gradient_at_reduced_width(self, rng):
        m = seq_init(5, d_in=36, hidden=6, n_layers=3, d_out=32)
        X, Y = rng.normal(size=(3, 4, 36)), rng.normal(size=(3, 32))

        def f(leaves):
            return seq_loss_graph(X, Y, leaves, m.prefixes)

        assert nn.grad_check(f, m.tensors(), h=1e-5, n_samples=10, seed=1) < 1e-4


class TestTraining:
    def test_memorizes_single_sample(self, rng):
        sample = SequenceSample(rng.normal(size=(5, 36)), rng.normal(size=32), "u", (date(2019, 1, 1), 1))
        _, history = train_seqnbt([sample], SeqTrainConfig(epochs=600, seed=0))
        assert history[-1] < 1e-3

    def test_fixed_seed_reproducible(self, trained):
        prepared, _ = trained
        train, _, _ = make_samples(prepared.histories, 5, 2)
        cfg = SeqTrainConfig(epochs=2, seed=8, hidden=8)
        (m1, h1), (m2, h2) = train_seqnbt(train, cfg), train_seqnbt(train, cfg)
        assert h1 == h2
        assert all(np.array_equal(m1.tensors()[k], m2.tensors()[k]) for k in m1.tensors())

    def test_loss_falls(self, trained):
        prepared, _ = trained
        train, _, _ = make_samples(prepared.histories, 5, 2)
        _, history = train_seqnbt(train, SeqTrainConfig(epochs=6, seed=1))
        assert history[-1] < history[0]

    def test_without_dropout_seed_only_sets_init(self, rng):
        samples = [SequenceSample(rng.normal(size=(3, 36)), rng.normal(size=32), "u", (date(2019, 1, 1), i))
                   for i in range(12)]
        start = seq_init(4, hidden=8, n_layers=2)
        cfg = SeqTrainConfig(epochs=2, batch_size=5, dropout=0.0, shuffle=False, hidden=8, n_layers=2)
        _, h1 = train_seqnbt(samples, cfg, seed=1, model=seq_load_copy(start))
        _, h2 = train_seqnbt(samples, cfg, seed=2, model=seq_load_copy(start))
        assert h1 == h2

    def test_empty_training_set(self):
        with pytest.raises(ValueError):
            train_seqnbt([], SeqTrainConfig(epochs=1))

    @pytest.mark.parametrize("kw", [{"L": 0}, {"stride": 0}, {"batch_size": 0}, {"dropout": 1.0}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            SeqTrainConfig(**kw)

    def test_table_defaults(self):
        cfg = SeqTrainConfig()
        assert (cfg.batch_size, cfg.epochs, cfg.dropout, cfg.hidden, cfg.n_layers, cfg.L, cfg.stride) == (
            200, 60, 0.25, 64, 3, 5, 2)
        assert nn.lr_at(0, cfg.schedule) == 0.001


def seq_load_copy(m: SeqModel) -> SeqModel:
    buf = io.BytesIO()
    seq_save(m, buf)
    return seq_load(io.BytesIO(buf.getvalue()))


class TestOrderSensitivity:
    def test_permuting_rows_changes_prediction(self, trained):
        _, seq = trained
        rng = np.random.default_rng(0)
        X = rng.normal(size=(5, 36))
        assert not np.allclose(predict_next(seq, X), predict_next(seq, X[::-1]))


class TestPersistence:
    def test_round_trip(self, trained, rng):
        _, seq = trained
        loaded = seq_load_copy(seq)
        assert all(np.array_equal(loaded.tensors()[k], v) for k, v in seq.tensors().items())
        X = rng.normal(size=(5, 36))
        assert np.array_equal(predict_next(loaded, X), predict_next(seq, X))

    def test_file_round_trip(self, tmp_path):
        m = seq_init(0, hidden=4, n_layers=2)
        seq_save(m, str(tmp_path / "seq.nbt"))
        assert len(seq_load(str(tmp_path / "seq.nbt")).layers) == 2

    def test_version_mismatch(self):
        buf = io.BytesIO()
        seq_save(seq_init(0, hidden=4, n_layers=1), buf)
        data = bytearray(buf.getvalue())
        data[4:6] = (nn.CONTAINER_VERSION + 7).to_bytes(2, "little")
        with pytest.raises(nn.ContainerVersionError):
            seq_load(io.BytesIO(bytes(data)))

    def test_autoencoder_container_rejected(self):
        from nextbuy.autoencoder import ae_init, ae_save

        buf = io.BytesIO()
        ae_save(ae_init(0, (784, 8, 4)), buf)
        with pytest.raises(FormatError):
            seq_load(io.BytesIO(buf.getvalue()))

    def test_truncated(self):
        buf = io.BytesIO()
        seq_save(seq_init(0, hidden=4, n_layers=1), buf)
        with pytest.raises(FormatError):
            seq_load(io.BytesIO(buf.getvalue()[:-20]))
