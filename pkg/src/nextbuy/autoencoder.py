"""Stacked symmetric autoencoder producing 32-d transaction encodings."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import date
from typing import BinaryIO, Mapping, Sequence

import numpy as np

from . import neural as nn
from .datamodel import Dataset, Transaction
from .errors import NumericError, ShapeError
from .features import INPUT_DIM, N_FEATURES, FeatureContext

log = logging.getLogger(__name__)

DEFAULT_WIDTHS = (INPUT_DIM, 512, 128, 32)
MODEL_KIND = "autoencoder"


@dataclass
class AutoencoderModel:
    encoder: list[nn.DenseParams]
    decoder: list[nn.DenseParams]

    def __post_init__(self) -> None:
        enc = [self.encoder[0].fan_in] + [p.fan_out for p in self.encoder]
        dec = [self.decoder[0].fan_in] + [p.fan_out for p in self.decoder]
        if enc != dec[::-1]:
            raise ShapeError(f"encoder widths {enc} are not mirrored by decoder widths {dec}")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple([self.encoder[0].fan_in] + [p.fan_out for p in self.encoder])

    @property
    def code_dim(self) -> int:
        return self.encoder[-1].fan_out

    def tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, p in enumerate(self.encoder):
            out.update(p.named(f"enc.{i}"))
        for i, p in enumerate(self.decoder):
            out.update(p.named(f"dec.{i}"))
        return out

    @classmethod
    def from_tensors(cls, t: Mapping[str, np.ndarray]) -> "AutoencoderModel":
        def chain(prefix):
            layers = []
            i = 0
            while f"{prefix}.{i}.W" in t:
                layers.append(nn.DenseParams(t[f"{prefix}.{i}.W"], t[f"{prefix}.{i}.b"]))
                i += 1
            return layers

        enc, dec = chain("enc"), chain("dec")
        if not enc or not dec or len(t) != 2 * (len(enc) + len(dec)):
            raise ShapeError("tensor set does not describe an autoencoder")
        return cls(enc, dec)

    def copy(self) -> "AutoencoderModel":
        return AutoencoderModel.from_tensors({k: v.copy() for k, v in self.tensors().items()})


def ae_init(seed: int, widths: Sequence[int] = DEFAULT_WIDTHS) -> AutoencoderModel:
    """LeCun-normal SELU layers, zero biases; deterministic in ``seed``.

    The linear output layer starts at zero so the untrained reconstruction is
    the zero vector rather than unit-variance noise swamping the small
    embedding components.
    """
    rng = np.random.default_rng([seed, 0xAE])
    enc = [nn.DenseParams.lecun_normal(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]
    rev = list(widths)[::-1]
    dec = [nn.DenseParams.lecun_normal(rng, a, b) for a, b in zip(rev[:-1], rev[1:])]
    dec[-1] = nn.DenseParams(np.zeros_like(dec[-1].W), np.zeros_like(dec[-1].b))
    return AutoencoderModel(enc, dec)


def encoder_graph(x: nn.Var, leaves: Mapping[str, nn.Var], n_layers: int) -> nn.Var:
    h = x
    for i in range(n_layers):
        h = nn.dense_graph(h, leaves, f"enc.{i}", "selu")
    return h


def decoder_graph(code: nn.Var, leaves: Mapping[str, nn.Var], n_layers: int) -> nn.Var:
    h = code
    for i in range(n_layers):
        h = nn.dense_graph(h, leaves, f"dec.{i}", "selu" if i < n_layers - 1 else "identity")
    return h


def ae_loss_graph(x: nn.Var, y: nn.Var) -> nn.Var:
    """Feature-part MSE plus embedding-part MSE, each averaged over the batch."""
    d = x.value.shape[1]
    return nn.add(
        nn.mse_op(nn.columns(y, 0, N_FEATURES), nn.columns(x, 0, N_FEATURES), name="loss.features"),
        nn.mse_op(nn.columns(y, N_FEATURES, d), nn.columns(x, N_FEATURES, d), name="loss.embedding"),
        name="loss",
    )


def ae_loss(x: np.ndarray, y: np.ndarray) -> float:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape or x.shape[1] <= N_FEATURES:
        raise ShapeError(f"ae_loss needs equal shapes wider than {N_FEATURES}, got {x.shape} and {y.shape}")
    return nn.mse(x[:, :N_FEATURES], y[:, :N_FEATURES]) + nn.mse(x[:, N_FEATURES:], y[:, N_FEATURES:])


def _check_width(m: AutoencoderModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.widths[0]:
        raise ShapeError(f"autoencoder expects inputs of width {m.widths[0]}, got {x.shape[-1]}")
    return x


def encode(m: AutoencoderModel, x: np.ndarray) -> np.ndarray:
    x = _check_width(m, x)
    single = x.ndim == 1
    out = encoder_graph(nn.Var(np.atleast_2d(x)), nn.make_consts(m.tensors()), len(m.encoder)).value
    return out[0] if single else out


def decode(m: AutoencoderModel, code: np.ndarray) -> np.ndarray:
    code = np.asarray(code, dtype=np.float64)
    if code.shape[-1] != m.code_dim:
        raise ShapeError(f"decoder expects codes of width {m.code_dim}, got {code.shape[-1]}")
    single = code.ndim == 1
    out = decoder_graph(nn.Var(np.atleast_2d(code)), nn.make_consts(m.tensors()), len(m.decoder)).value
    return out[0] if single else out


def ae_forward(m: AutoencoderModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    code = encode(m, x)
    return code, decode(m, code)


@dataclass
class AeTrainConfig:
    batch_size: int = 128
    epochs: int = 100
    learning_rate: float = 5e-5
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


def full_loss(m: AutoencoderModel, inputs: np.ndarray, chunk: int = 4096) -> float:
    """Mean per-sample loss over ``inputs``."""
    total = 0.0
    for s in range(0, len(inputs), chunk):
        xb = inputs[s:s + chunk]
        total += ae_loss(xb, ae_forward(m, xb)[1]) * len(xb)
    return total / len(inputs)


def train_autoencoder(
    inputs: np.ndarray | Sequence[np.ndarray],
    cfg: AeTrainConfig = AeTrainConfig(),
    widths: Sequence[int] | None = None,
    model: AutoencoderModel | None = None,
) -> tuple[AutoencoderModel, list[float]]:
    """Mini-batch Adam on the two-part reconstruction loss.

    Returns the model and the per-epoch mean training loss.
    """
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ShapeError("need a non-empty (n, width) input matrix")
    if model is None:
        model = ae_init(cfg.seed, widths or (X.shape[1],) + tuple(DEFAULT_WIDTHS[1:]))
    _check_width(model, X[0])
    params = model.tensors()
    state = nn.AdamState()
    rng = np.random.default_rng([cfg.seed, 0xBA7C]) if cfg.shuffle else None
    n_enc, n_dec = len(model.encoder), len(model.decoder)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in nn.iterate_minibatches(len(X), cfg.batch_size, rng):
            xb = nn.Var(X[idx])
            leaves = nn.make_leaves(params)
            try:
                loss = ae_loss_graph(xb, decoder_graph(encoder_graph(xb, leaves, n_enc), leaves, n_dec))
                grads = nn.backward(loss, leaves)
            except NumericError as exc:
                raise NumericError(f"autoencoder training diverged at epoch {epoch + 1}: {exc}", exc.node) from exc
            nn.adam_step(params, grads, state, cfg.learning_rate)
            total += float(loss.value) * len(idx)
        history.append(total / len(X))
        log.debug("autoencoder epoch %d loss %.6f", epoch + 1, history[-1])
    return model, history


TxnKey = tuple[str, date, int]


def encode_dataset(
    m: AutoencoderModel, ds: Dataset | Sequence[Transaction], features: FeatureContext, chunk: int = 4096
) -> dict[TxnKey, np.ndarray]:
    txns = list(ds)
    out: dict[TxnKey, np.ndarray] = {}
    for s in range(0, len(txns), chunk):
        part = txns[s:s + chunk]
        codes = encode(m, features.inputs_for(part))
        for t, c in zip(part, codes):
            out[t.key] = c
    return out


def ae_save(m: AutoencoderModel, sink: str | BinaryIO) -> None:
    nn.save_tensors(sink, m.tensors(), MODEL_KIND)


def ae_load(source: str | BinaryIO) -> AutoencoderModel:
    return AutoencoderModel.from_tensors(nn.load_tensors(source, MODEL_KIND))
