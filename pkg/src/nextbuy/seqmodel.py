"""Sliding-window samples and the stacked-GRU next-encoding model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date
from typing import BinaryIO, Mapping, Sequence

import numpy as np

from . import neural as nn
from .datamodel import Dataset
from .errors import NumericError, ShapeError
from .features import N_TEMPORAL, NormStats, history_temporal

log = logging.getLogger(__name__)

MODEL_KIND = "seqnbt"
CODE_DIM = 32
STEP_DIM = CODE_DIM + N_TEMPORAL


@dataclass(frozen=True)
class HistoryStep:
    """One encoded transaction in a user's chronological history."""

    encoding: np.ndarray
    temporal: np.ndarray
    key: tuple[date, int]
    sic: int = -1
    amount: float = float("nan")

    @property
    def row(self) -> np.ndarray:
        return np.concatenate([self.encoding, self.temporal])


@dataclass(frozen=True)
class SequenceSample:
    inputs: np.ndarray  # (L, 36), oldest first
    target: np.ndarray  # (32,)
    user: str
    target_key: tuple[date, int]
    input_keys: tuple[tuple[date, int], ...] = ()
    target_sic: int = -1
    target_amount: float = float("nan")
    last_sic: int = -1


def build_histories(
    ds: Dataset, encodings: Mapping[tuple, np.ndarray], norm: NormStats
) -> dict[str, list[HistoryStep]]:
    out: dict[str, list[HistoryStep]] = {}
    for card, hist in ds.histories():
        temporal = history_temporal(hist)
        out[card] = [
            HistoryStep(encodings[t.key], norm.temporal_vector(tf), t.order_key, t.sic, t.amount)
            for t, tf in zip(hist, temporal)
        ]
    return out


def window_starts(n: int, L: int, stride: int) -> range:
    return range(0, max(0, n - L), stride)


def extract_windows(
    history: Sequence[HistoryStep], L: int, stride: int = 2, user: str = ""
) -> list[SequenceSample]:
    """Windows of L inputs plus the following step as target, starting every ``stride`` steps."""
    if L < 1 or stride < 1:
        raise ValueError("L and stride must be >= 1")
    samples = []
    for s in window_starts(len(history), L, stride):
        steps = history[s:s + L]
        tgt = history[s + L]
        samples.append(
            SequenceSample(
                inputs=np.stack([st.row for st in steps]),
                target=tgt.encoding,
                user=user,
                target_key=tgt.key,
                input_keys=tuple(st.key for st in steps),
                target_sic=tgt.sic,
                target_amount=tgt.amount,
                last_sic=steps[-1].sic,
            )
        )
    return samples


def split_samples(
    by_user: Mapping[str, Sequence[SequenceSample]],
) -> tuple[list[SequenceSample], list[SequenceSample], list[SequenceSample]]:
    """Per user: newest window to test, next newest to validation, rest to train.

    Users with fewer than three windows contribute only training samples.
    """
    train: list[SequenceSample] = []
    val: list[SequenceSample] = []
    test: list[SequenceSample] = []
    for user in sorted(by_user):
        samples = list(by_user[user])
        if len(samples) >= 3:
            train.extend(samples[:-2])
            val.append(samples[-2])
            test.append(samples[-1])
        else:
            train.extend(samples)
    return train, val, test


@dataclass
class SeqModel:
    layers: list[nn.GruLayerParams]
    head: nn.DenseParams

    def __post_init__(self) -> None:
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.d_in != prev.d_h:
                raise ShapeError("GRU layer dimensions do not chain")
        if self.head.fan_in != self.layers[-1].d_h:
            raise ShapeError("output head does not match the last GRU width")

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def prefixes(self) -> list[str]:
        return [f"gru.{i}" for i in range(len(self.layers))]

    def tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, p in enumerate(self.layers):
            out.update(p.named(f"gru.{i}"))
        out.update(self.head.named("head"))
        return out

    @classmethod
    def from_tensors(cls, t: Mapping[str, np.ndarray]) -> "SeqModel":
        layers = []
        i = 0
        while f"gru.{i}.W_z" in t:
            layers.append(nn.GruLayerParams.from_named(t, f"gru.{i}"))
            i += 1
        if not layers or "head.W" not in t or len(t) != 9 * len(layers) + 2:
            raise ShapeError("tensor set does not describe a sequence model")
        return cls(layers, nn.DenseParams(t["head.W"], t["head.b"]))


def seq_init(seed: int, d_in: int = STEP_DIM, hidden: int = 64, n_layers: int = 3, d_out: int = CODE_DIM) -> SeqModel:
    rng = np.random.default_rng([seed, 0x5E0])
    layers = [nn.GruLayerParams.init(rng, d_in if i == 0 else hidden, hidden) for i in range(n_layers)]
    return SeqModel(layers, nn.DenseParams.lecun_normal(rng, hidden, d_out))


def seq_graph(
    X: np.ndarray,
    leaves: Mapping[str, nn.Var],
    prefixes: Sequence[str],
    dropout: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> nn.Var:
    h = nn.gru_stack_graph(X, leaves, prefixes, dropout, training, rng)
    return nn.dense_graph(h, leaves, "head", "identity")


def seq_loss_graph(
    X: np.ndarray, Y: np.ndarray, leaves: Mapping[str, nn.Var], prefixes: Sequence[str],
    dropout: float = 0.0, training: bool = False, rng: np.random.Generator | None = None,
) -> nn.Var:
    return nn.mse_op(seq_graph(X, leaves, prefixes, dropout, training, rng), nn.Var(Y), name="loss")


def predict_next(m: SeqModel, inputs: np.ndarray) -> np.ndarray:
    """Predicted next encoding for a (L, d_in) window or a (batch, L, d_in) stack; dropout off."""
    X = np.asarray(inputs, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.ndim != 3 or X.shape[1] < 1 or X.shape[2] != m.d_in:
        raise ShapeError(f"expected windows of width {m.d_in}, got shape {np.shape(inputs)}")
    out = seq_graph(X, nn.make_consts(m.tensors()), m.prefixes).value
    return out[0] if single else out


@dataclass
class SeqTrainConfig:
    batch_size: int = 200
    epochs: int = 60
    dropout: float = 0.25
    schedule: nn.LrSchedule = field(default_factory=nn.LrSchedule)
    L: int = 5
    stride: int = 2
    hidden: int = 64
    n_layers: int = 3
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self) -> None:
        if isinstance(self.schedule, Mapping):
            self.schedule = nn.LrSchedule(**self.schedule)
        if self.L < 1 or self.stride < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("L, stride, batch_size and epochs must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def stack_samples(samples: Sequence[SequenceSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.inputs for s in samples]), np.stack([s.target for s in samples])


def train_seqnbt(
    train: Sequence[SequenceSample],
    cfg: SeqTrainConfig = SeqTrainConfig(),
    seed: int | None = None,
    model: SeqModel | None = None,
) -> tuple[SeqModel, list[float]]:
    """Mini-batch Adam on the MSE between predicted and actual next encodings.

    The learning rate follows ``cfg.schedule`` by global step; dropout is
    active between GRU layers only here, never at prediction time.
    """
    if not train:
        raise ValueError("need at least one training sample")
    seed = cfg.seed if seed is None else seed
    X, Y = stack_samples(train)
    if model is None:
        model = seq_init(seed, X.shape[2], cfg.hidden, cfg.n_layers, Y.shape[1])
    params = model.tensors()
    state = nn.AdamState()
    shuffle_rng = np.random.default_rng([seed, 0x5F1]) if cfg.shuffle else None
    drop_rng = np.random.default_rng([seed, 0xD0])
    history: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in nn.iterate_minibatches(len(X), cfg.batch_size, shuffle_rng):
            leaves = nn.make_leaves(params)
            try:
                loss = seq_loss_graph(X[idx], Y[idx], leaves, model.prefixes, cfg.dropout, True, drop_rng)
                grads = nn.backward(loss, leaves)
            except NumericError as exc:
                raise NumericError(f"sequence training diverged at epoch {epoch + 1}: {exc}", exc.node) from exc
            nn.adam_step(params, grads, state, nn.lr_at(step, cfg.schedule))
            step += 1
            total += float(loss.value) * len(idx)
        history.append(total / len(X))
        log.debug("seqnbt epoch %d loss %.6f", epoch + 1, history[-1])
    return model, history


def seq_save(m: SeqModel, sink: str | BinaryIO) -> None:
    nn.save_tensors(sink, m.tensors(), MODEL_KIND)


def seq_load(source: str | BinaryIO) -> SeqModel:
    return SeqModel.from_tensors(nn.load_tensors(source, MODEL_KIND))
