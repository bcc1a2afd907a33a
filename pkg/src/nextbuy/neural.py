"""Small float64 neural toolkit: reverse-mode autodiff, dense/GRU layers, Adam.

Graphs are built eagerly from ``Var`` nodes; ``backward`` walks them in reverse
topological order.  Only the handful of operators the two models need exist.
"""

from __future__ import annotations

import io
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import FormatError, NumericError, ShapeError

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name", "requires_grad")

    def __init__(self, value, parents: tuple["Var", ...] = (), backward_fn=None, name: str = "const",
                 requires_grad: bool = False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var({self.name}, shape={np.shape(self.value)})"


def const(value) -> Var:
    return Var(np.asarray(value, dtype=np.float64))


def leaf(value: np.ndarray, name: str) -> Var:
    return Var(value, name=name, requires_grad=True)


def _node(value, parents, backward_fn, name) -> Var:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced at node '{name}'", node=name)
    needs = any(p.requires_grad for p in parents)
    return Var(value, parents if needs else (), backward_fn if needs else None, name, needs)


def _acc(v: Var, g) -> None:
    if not v.requires_grad:
        return
    if v.grad is None:
        v.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        v.grad += g


# ---- operators -------------------------------------------------------------


def linear(x: Var, W: Var, b: Var | None = None, name: str = "linear") -> Var:
    """x @ W.T (+ b) for x of shape (batch, in) and W of shape (out, in)."""
    if x.value.shape[-1] != W.value.shape[1]:
        raise ShapeError(f"{name}: input width {x.value.shape[-1]} != weight fan-in {W.value.shape[1]}")
    out = x.value @ W.value.T
    if b is not None:
        out = out + b.value
    parents = (x, W) if b is None else (x, W, b)

    def back(g):
        if x.requires_grad:
            _acc(x, g @ W.value)
        if W.requires_grad:
            _acc(W, g.T @ x.value)
        if b is not None and b.requires_grad:
            _acc(b, g.sum(axis=0))

    return _node(out, parents, back, name)


def add(a: Var, b: Var, name: str = "add") -> Var:
    def back(g):
        _acc(a, g)
        _acc(b, g)

    return _node(a.value + b.value, (a, b), back, name)


def sub(a: Var, b: Var, name: str = "sub") -> Var:
    def back(g):
        _acc(a, g)
        _acc(b, -g)

    return _node(a.value - b.value, (a, b), back, name)


def mul(a: Var, b: Var, name: str = "mul") -> Var:
    def back(g):
        if a.requires_grad:
            _acc(a, g * b.value)
        if b.requires_grad:
            _acc(b, g * a.value)

    return _node(a.value * b.value, (a, b), back, name)


def one_minus(a: Var, name: str = "one_minus") -> Var:
    return _node(1.0 - a.value, (a,), lambda g: _acc(a, -g), name)


def selu_values(x: np.ndarray) -> np.ndarray:
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def selu_op(x: Var, name: str = "selu") -> Var:
    v = x.value
    neg = SELU_LAMBDA * SELU_ALPHA * np.exp(np.minimum(v, 0.0))
    slope = np.where(v > 0, SELU_LAMBDA, neg)
    return _node(selu_values(v), (x,), lambda g: _acc(x, g * slope), name)


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_op(x: Var, name: str = "sigmoid") -> Var:
    s = sigmoid_values(x.value)
    return _node(s, (x,), lambda g: _acc(x, g * s * (1.0 - s)), name)


def tanh_op(x: Var, name: str = "tanh") -> Var:
    t = np.tanh(x.value)
    return _node(t, (x,), lambda g: _acc(x, g * (1.0 - t * t)), name)


def identity_op(x: Var, name: str = "identity") -> Var:
    return x


def scale_mask(x: Var, mask: np.ndarray, name: str = "dropout") -> Var:
    return _node(x.value * mask, (x,), lambda g: _acc(x, g * mask), name)


def columns(x: Var, start: int, stop: int, name: str = "columns") -> Var:
    def back(g):
        full = np.zeros_like(x.value)
        full[:, start:stop] = g
        _acc(x, full)

    return _node(x.value[:, start:stop], (x,), back, name)


def mse_op(pred: Var, target: Var, name: str = "mse") -> Var:
    """Mean of squared differences over every element."""
    if pred.value.shape != target.value.shape:
        raise ShapeError(f"{name}: shapes {pred.value.shape} and {target.value.shape} differ")
    diff = pred.value - target.value
    n = diff.size

    def back(g):
        coef = 2.0 * g / n
        _acc(pred, coef * diff)
        _acc(target, -coef * diff)

    return _node(np.array(np.mean(diff * diff)), (pred, target), back, name)


ACTIVATIONS: dict[str, Callable[[Var], Var]] = {
    "selu": selu_op,
    "identity": identity_op,
    "tanh": tanh_op,
    "sigmoid": sigmoid_op,
}


def _topo(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Var, leaves: Mapping[str, Var] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode pass from a scalar ``loss``; returns gradients for ``leaves``.

    Leaves that the loss does not depend on get zero gradients.
    """
    if np.size(loss.value) != 1:
        raise ShapeError("backward needs a scalar loss")
    order = _topo(loss)
    for node in order:
        node.grad = None
    for v in (leaves or {}).values():
        v.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            if not np.all(np.isfinite(node.grad)):
                raise NumericError(f"non-finite gradient at node '{node.name}'", node=node.name)
            node.backward_fn(node.grad)
    if leaves is None:
        return {}
    return {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in leaves.items()}


def make_leaves(tensors: Mapping[str, np.ndarray]) -> dict[str, Var]:
    return {k: leaf(v, k) for k, v in tensors.items()}


def make_consts(tensors: Mapping[str, np.ndarray]) -> dict[str, Var]:
    return {k: Var(v, name=k) for k, v in tensors.items()}


# ---- layers ----------------------------------------------------------------


@dataclass
class DenseParams:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"dense params: W {self.W.shape} incompatible with b {self.b.shape}")

    @property
    def fan_in(self) -> int:
        return self.W.shape[1]

    @property
    def fan_out(self) -> int:
        return self.W.shape[0]

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}

    @classmethod
    def lecun_normal(cls, rng: np.random.Generator, n_in: int, n_out: int) -> "DenseParams":
        return cls(rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_out, n_in)), np.zeros(n_out))


GRU_NAMES = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


@dataclass
class GruLayerParams:
    W_z: np.ndarray
    U_z: np.ndarray
    b_z: np.ndarray
    W_r: np.ndarray
    U_r: np.ndarray
    b_r: np.ndarray
    W_h: np.ndarray
    U_h: np.ndarray
    b_h: np.ndarray

    def __post_init__(self) -> None:
        d_h, d_in = self.W_z.shape
        for g in "zrh":
            if getattr(self, f"W_{g}").shape != (d_h, d_in) or getattr(self, f"U_{g}").shape != (d_h, d_h) \
                    or getattr(self, f"b_{g}").shape != (d_h,):
                raise ShapeError(f"GRU gate {g}: inconsistent shapes for d_in={d_in}, d_h={d_h}")

    @property
    def d_in(self) -> int:
        return self.W_z.shape[1]

    @property
    def d_h(self) -> int:
        return self.W_z.shape[0]

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.{n}": getattr(self, n) for n in GRU_NAMES}

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_h: int) -> "GruLayerParams":
        def u(shape, fan_in):
            lim = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-lim, lim, size=shape)

        kw = {}
        for g in "zrh":
            kw[f"W_{g}"] = u((d_h, d_in), d_in)
            kw[f"U_{g}"] = u((d_h, d_h), d_h)
            kw[f"b_{g}"] = np.zeros(d_h)
        return cls(**kw)

    @classmethod
    def from_named(cls, tensors: Mapping[str, np.ndarray], prefix: str) -> "GruLayerParams":
        return cls(**{n: tensors[f"{prefix}.{n}"] for n in GRU_NAMES})


def dense_graph(x: Var, leaves: Mapping[str, Var], prefix: str, activation: str = "identity") -> Var:
    y = linear(x, leaves[f"{prefix}.W"], leaves[f"{prefix}.b"], name=f"{prefix}.linear")
    return ACTIVATIONS[activation](y, name=f"{prefix}.{activation}") if activation != "identity" else y


def gru_step_graph(x: Var, h: Var, leaves: Mapping[str, Var], prefix: str) -> Var:
    """z = σ(W_z x + U_z h + b_z); r = σ(W_r x + U_r h + b_r);
    h~ = tanh(W_h x + U_h (r ⊙ h) + b_h); h' = (1 - z) ⊙ h + z ⊙ h~."""
    L = lambda n: leaves[f"{prefix}.{n}"]  # noqa: E731
    z = sigmoid_op(add(linear(x, L("W_z"), L("b_z")), linear(h, L("U_z"))), name=f"{prefix}.z")
    r = sigmoid_op(add(linear(x, L("W_r"), L("b_r")), linear(h, L("U_r"))), name=f"{prefix}.r")
    cand = tanh_op(add(linear(x, L("W_h"), L("b_h")), linear(mul(r, h), L("U_h"))), name=f"{prefix}.cand")
    return add(mul(one_minus(z), h), mul(z, cand), name=f"{prefix}.h")


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by 1/(1 - rate)."""
    if rate <= 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def gru_stack_graph(
    seq: Var | np.ndarray,
    leaves: Mapping[str, Var],
    prefixes: Sequence[str],
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Var:
    """Run stacked GRU layers over ``seq`` of shape (batch, T, d_in); returns the last layer's final state.

    Inverted dropout is applied between layers (never after the last) when training.
    """
    X = seq.value if isinstance(seq, Var) else np.asarray(seq, dtype=np.float64)
    if X.ndim != 3 or X.shape[1] == 0:
        raise ShapeError(f"GRU stack expects a non-empty (batch, T, d_in) sequence, got shape {X.shape}")
    batch, T, _ = X.shape
    inputs = [Var(X[:, t, :]) for t in range(T)]
    use_dropout = training and dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("dropout during training needs an rng")
    for li, prefix in enumerate(prefixes):
        d_h = leaves[f"{prefix}.U_z"].value.shape[0]
        h = Var(np.zeros((batch, d_h)))
        outs = []
        for t in range(T):
            h = gru_step_graph(inputs[t], h, leaves, prefix)
            outs.append(h)
        if use_dropout and li < len(prefixes) - 1:
            outs = [scale_mask(o, dropout_mask(rng, o.value.shape, dropout_rate), name=f"{prefix}.dropout")
                    for o in outs]
        inputs = outs
    return inputs[-1]


# ---- plain-array conveniences -----------------------------------------------


def selu(x):
    """Scaled exponential linear unit (λ·x for x > 0, λ·α·(eˣ − 1) otherwise)."""
    out = selu_values(np.asarray(x, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def dense_forward(x: np.ndarray, p: DenseParams, activation: str = "identity") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.fan_in:
        raise ShapeError(f"dense input width {x.shape[-1]} != {p.fan_in}")
    single = x.ndim == 1
    out = dense_graph(Var(np.atleast_2d(x)), make_consts(p.named("d")), "d", activation).value
    return out[0] if single else out


def gru_cell(x: np.ndarray, h: np.ndarray, p: GruLayerParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if x.shape[-1] != p.d_in or h.shape[-1] != p.d_h:
        raise ShapeError(f"GRU cell expects x width {p.d_in} and h width {p.d_h}")
    single = x.ndim == 1
    out = gru_step_graph(Var(np.atleast_2d(x)), Var(np.atleast_2d(h)), make_consts(p.named("g")), "g").value
    return out[0] if single else out


def gru_stack_forward(
    seq: np.ndarray,
    layers: Sequence[GruLayerParams],
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Final hidden state of the last layer for a (T, d_in) or (batch, T, d_in) sequence."""
    seq = np.asarray(seq, dtype=np.float64)
    single = seq.ndim == 2
    if single:
        seq = seq[None]
    if seq.ndim != 3 or seq.shape[1] == 0:
        raise ShapeError("empty or mis-shaped sequence")
    for prev, nxt in zip(layers, layers[1:]):
        if nxt.d_in != prev.d_h:
            raise ShapeError("GRU layer dimensions do not chain")
    tensors: dict[str, np.ndarray] = {}
    for i, p in enumerate(layers):
        tensors.update(p.named(f"gru.{i}"))
    out = gru_stack_graph(seq, make_consts(tensors), [f"gru.{i}" for i in range(len(layers))],
                          dropout_rate, training, rng).value
    return out[0] if single else out


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a - b
    return float(np.mean(d * d))


# ---- gradient checking -------------------------------------------------------


def grad_check(
    f: Callable[[Mapping[str, Var]], Var],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    n_samples: int | None = 20,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` builds a scalar loss graph from the given leaves.  For each tensor,
    ``n_samples`` coordinates (all of them when None) are perturbed by ±h.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(seed)
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    leaves = make_leaves(work)
    analytic = backward(f(leaves), leaves)
    worst = 0.0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if n_samples is not None and flat.size > n_samples:
            idx = rng.choice(flat.size, size=n_samples, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(make_consts(work)).value)
            flat[i] = orig - h
            fm = float(f(make_consts(work)).value)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = float(a_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst


# ---- optimization ------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    initial: float = 1e-3
    decay: float = 0.9
    interval: int = 100_000
    staircase: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.decay <= 1.0 or self.interval <= 0 or self.initial <= 0.0:
            raise ValueError("need initial > 0, 0 < decay <= 1 and interval > 0")


def lr_at(step: int, sched: LrSchedule) -> float:
    exponent = step // sched.interval if sched.staircase else step / sched.interval
    return sched.initial * sched.decay**exponent


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator | None) -> Iterable[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ---- serialization -----------------------------------------------------------

MAGIC = b"NBTC"
CONTAINER_VERSION = 1


class ContainerVersionError(FormatError):
    pass


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def dump_tensors(tensors: Mapping[str, np.ndarray], kind: str) -> bytes:
    """Container layout: magic, version, kind, count, then (name, shape, float64 LE data); CRC32 trailer."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", CONTAINER_VERSION))
    buf.write(_pack_str(kind))
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        buf.write(_pack_str(name))
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def parse_tensors(data: bytes, kind: str | None = None) -> dict[str, np.ndarray]:
    if len(data) < 10 or data[:4] != MAGIC:
        raise FormatError("not a tensor container (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CONTAINER_VERSION:
        raise ContainerVersionError(f"unsupported container version {version}; expected {CONTAINER_VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("tensor container is corrupted (checksum mismatch)")
    try:
        off = 6

        def read_str():
            nonlocal off
            (n,) = struct.unpack_from("<H", body, off)
            off += 2
            s = body[off:off + n].decode("utf-8")
            off += n
            return s

        found_kind = read_str()
        if kind is not None and found_kind != kind:
            raise FormatError(f"container holds a {found_kind!r} model, expected {kind!r}")
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = read_str()
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
            off += 8 * n
            out[name] = arr
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"truncated or malformed tensor container: {exc}") from None
    if off != len(body):
        raise FormatError("trailing bytes in tensor container")
    return out


def save_tensors(sink: str | BinaryIO, tensors: Mapping[str, np.ndarray], kind: str) -> None:
    data = dump_tensors(tensors, kind)
    if isinstance(sink, (str, bytes)) or hasattr(sink, "__fspath__"):
        with open(sink, "wb") as fh:
            fh.write(data)
    else:
        sink.write(data)


def load_tensors(source: str | BinaryIO, kind: str | None = None) -> dict[str, np.ndarray]:
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = source.read()
    return parse_tensors(data, kind)
