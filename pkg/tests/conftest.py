"""Shared fixtures: a tiny trained pipeline reused by the serving and CLI tests."""

from __future__ import annotations

from datetime import date
from pathlib import Path

import numpy as np
import pytest

from nextbuy.autoencoder import AeTrainConfig
from nextbuy.datamodel import SyntheticConfig, Transaction, generate_corpus, preprocess
from nextbuy.experiment import make_samples, prepare_corpus
from nextbuy.seqmodel import SeqTrainConfig, train_seqnbt


def txn(card="c1", d="2018-10-01", seq=1, amount=10.0, supplier="m1", mcc=5812, sic=5812,
        desc="Eating Places") -> Transaction:
    return Transaction(card, date.fromisoformat(d) if isinstance(d, str) else d, seq, amount, supplier, mcc, sic,
                       desc)


@pytest.fixture
def make_txn():
    return txn


@pytest.fixture(scope="session")
def small_corpus():
    cfg = SyntheticConfig(n_users=24, n_sics=8, n_merchants=160, txns_per_user=(30, 40), seed=21)
    return generate_corpus(cfg)


@pytest.fixture(scope="session")
def trained(small_corpus):
    """Features, a briefly trained autoencoder and sequence model on the small corpus."""
    ds = preprocess(small_corpus.dataset)
    prepared = prepare_corpus(ds, AeTrainConfig(epochs=4, seed=3))
    train, _, _ = make_samples(prepared.histories, 5, 2)
    seq, _ = train_seqnbt(train, SeqTrainConfig(epochs=3, seed=4))
    return prepared, seq


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def workdir(tmp_path: Path) -> Path:
    return tmp_path


_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict(capsys):
    """Record one pass/fail line for an acceptance criterion, print it, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[number] = line
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
