"""End-to-end offline pipeline: features, both models, evaluation, L sweep."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autoencoder import AeTrainConfig, AutoencoderModel, encode_dataset, train_autoencoder
from .datamodel import Dataset, Transaction
from .errors import DataError
from .evaluation import (
    K_DEFAULT,
    EvalReport,
    MetricRow,
    RankedList,
    amount_mae,
    mae_by_sic,
    markov_baseline,
    popularity_baseline,
)
from .features import FeatureContext, fit_features
from .recommend import decode_prediction, predict_amount, rank_sics_batch
from .seqmodel import (
    HistoryStep,
    SeqModel,
    SeqTrainConfig,
    SequenceSample,
    build_histories,
    extract_windows,
    predict_next,
    split_samples,
    train_seqnbt,
)

log = logging.getLogger(__name__)

# Held-out targets for any L (stride 2) fall within a user's last four transactions.
HOLDOUT_TAIL = 4


def split_transactions(ds: Dataset, tail: int = HOLDOUT_TAIL) -> list[Transaction]:
    """Transactions usable for fitting features and the autoencoder: all but each user's last ``tail``."""
    train = []
    for _, hist in ds.histories():
        train.extend(hist[: max(0, len(hist) - tail)])
    return train


def corpus_id(ds: Dataset) -> str:
    h = hashlib.sha256()
    for t in ds:
        h.update(f"{t.card_id}|{t.date}|{t.seq_no}|{t.amount!r}|{t.sic}\n".encode())
    return h.hexdigest()[:16]


@dataclass
class PreparedCorpus:
    dataset: Dataset
    train_txns: list[Transaction]
    features: FeatureContext
    autoencoder: AutoencoderModel
    ae_history: list[float]
    encodings: dict
    histories: dict[str, list[HistoryStep]]


def prepare_corpus(
    ds: Dataset,
    ae_cfg: AeTrainConfig = AeTrainConfig(),
    features: FeatureContext | None = None,
    autoencoder: AutoencoderModel | None = None,
    tail: int = HOLDOUT_TAIL,
) -> PreparedCorpus:
    """Fit features and the autoencoder on the training split, then encode every transaction."""
    train = split_transactions(ds, tail)
    if not train:
        raise DataError("corpus has no training transactions after holding out each user's tail")
    if features is None:
        features = fit_features(train, ds)
    history: list[float] = []
    if autoencoder is None:
        autoencoder, history = train_autoencoder(features.inputs_for(train), ae_cfg)
    encodings = encode_dataset(autoencoder, ds, features)
    histories = build_histories(ds, encodings, features.norm)
    return PreparedCorpus(ds, train, features, autoencoder, history, encodings, histories)


def make_samples(
    histories: Mapping[str, Sequence[HistoryStep]], L: int, stride: int
) -> tuple[list[SequenceSample], list[SequenceSample], list[SequenceSample]]:
    by_user = {u: extract_windows(h, L, stride, user=u) for u, h in histories.items()}
    return split_samples(by_user)


@dataclass
class Predictions:
    cases: list[RankedList]
    amounts: list[tuple[float, float]]
    sics: list[int]


def predict_cases(
    model: SeqModel, samples: Sequence[SequenceSample], prepared: PreparedCorpus, chunk: int = 2048
) -> Predictions:
    cases, amounts, sics = [], [], []
    for s in range(0, len(samples), chunk):
        part = samples[s:s + chunk]
        enc = predict_next(model, np.stack([p.inputs for p in part]))
        feats, embs = decode_prediction(enc, prepared.autoencoder, prepared.features.norm)
        rankings = rank_sics_batch(embs, prepared.features.table)
        for smp, f, rk in zip(part, feats, rankings):
            cases.append(RankedList(tuple(rk.sics), smp.target_sic, smp.target_amount))
            amounts.append((predict_amount(f), smp.target_amount))
            sics.append(smp.target_sic)
    return Predictions(cases, amounts, sics)


@dataclass
class LResult:
    report: EvalReport
    model: SeqModel
    loss_history: list[float]
    samples: tuple[list[SequenceSample], list[SequenceSample], list[SequenceSample]]
    predictions: Predictions


def evaluate_length(
    prepared: PreparedCorpus,
    seq_cfg: SeqTrainConfig,
    K_values: Sequence[int] = K_DEFAULT,
    seed: int | None = None,
    model: SeqModel | None = None,
) -> LResult:
    """Train (unless ``model`` is given) and evaluate the sequence model at ``seq_cfg.L``."""
    train, val, test = make_samples(prepared.histories, seq_cfg.L, seq_cfg.stride)
    if not train or not test:
        raise DataError(f"corpus too small for L={seq_cfg.L}")
    history: list[float] = []
    if model is None:
        model, history = train_seqnbt(train, seq_cfg, seed)
    preds = predict_cases(model, test, prepared)
    report = EvalReport(seq_cfg.L, seq_cfg.seed if seed is None else seed, corpus_id(prepared.dataset))
    report.n_test = len(test)
    report.add_ranking_rows("seqnbt", preds.cases, K_values)
    report.rows.append(MetricRow("seqnbt", "MAE", None, seq_cfg.L, amount_mae(preds.amounts)))
    report.mae_by_sic = mae_by_sic((s, p, a) for s, (p, a) in zip(preds.sics, preds.amounts))

    pop = popularity_baseline(prepared.train_txns)
    markov = markov_baseline(prepared.train_txns)
    report.add_ranking_rows("popularity", [RankedList(pop.rank(), s.target_sic) for s in test], K_values)
    report.add_ranking_rows("markov", [RankedList(markov.rank(s.last_sic), s.target_sic) for s in test], K_values)
    report.metadata.update(
        n_train=len(train), n_val=len(val), n_test=len(test), final_train_loss=history[-1] if history else None
    )
    return LResult(report, model, history, (train, val, test), preds)


@dataclass
class SweepResult:
    reports: list[EvalReport] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    def best_L(self, metric: str = "MAP", K: int = 1) -> int | None:
        if not self.reports:
            return None
        return max(self.reports, key=lambda r: r.value("seqnbt", metric, K)).L


def run_sweep(
    prepared: PreparedCorpus,
    L_values: Sequence[int] = (3, 5, 7, 10),
    K_values: Sequence[int] = K_DEFAULT,
    seq_cfg: SeqTrainConfig = SeqTrainConfig(),
) -> SweepResult:
    """Evaluate each sequence length; lengths the corpus cannot support are skipped with a warning."""
    result = SweepResult()
    for L in L_values:
        cfg = SeqTrainConfig(**{**seq_cfg.__dict__, "L": L})
        try:
            result.reports.append(evaluate_length(prepared, cfg, K_values).report)
        except DataError as exc:
            log.warning("skipping L=%d: %s", L, exc)
            result.skipped.append(L)
    return result
