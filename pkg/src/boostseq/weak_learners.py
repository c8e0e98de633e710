"""Per-frame CNN and over-sequence RNN weak learners.

Every learner maps its input to one unbounded logit per tool.  CNNs see one
``(H, W, C)`` frame; RNNs see a sequence of ``|tools|``-vectors (the CNN
block's probabilities) and emit a sequence of the same length.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Graph, Node, Parameter

CNN_ARCHS = ("A", "B", "C", "linear", "bias")
DEFAULT_CNN_MENU = ("A", "B", "C")
RNN_CELLS = ("lstm", "gru", "identity", "lazy")

CHECKPOINT_MAGIC = b"BSEQWL1\n"


class TrainingDivergence(dc.NumericError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


# --------------------------------------------------------------------------
# specs

@dataclass(frozen=True)
class CnnSpec:
    arch: str
    height: int = 24
    width: int = 24
    channels: int = 3
    n_outputs: int = 8

    family = "cnn"

    def __post_init__(self):
        if self.arch not in CNN_ARCHS:
            raise ValueError(f"unknown CNN architecture {self.arch!r}")

    @property
    def id(self) -> str:
        return f"cnn-{self.arch}"

    def to_dict(self) -> dict:
        return {"family": "cnn", **asdict(self)}


@dataclass(frozen=True)
class RnnSpec:
    cell: str
    width: int = 16
    layers: int = 2
    bidirectional: bool = False
    n_inputs: int = 8
    n_outputs: int = 8

    family = "rnn"

    def __post_init__(self):
        if self.cell not in RNN_CELLS:
            raise ValueError(f"unknown RNN cell {self.cell!r}")
        if self.layers < 1 or self.width < 1:
            raise ValueError("RNN needs layers >= 1 and width >= 1")
        if self.cell in ("identity", "lazy") and self.n_inputs != self.n_outputs:
            raise ValueError(f"{self.cell} RNN needs n_inputs == n_outputs")

    @property
    def id(self) -> str:
        if self.cell in ("identity", "lazy"):
            return f"rnn-{self.cell}"
        d = "bi" if self.bidirectional else "uni"
        return f"rnn-{self.cell}{self.width}x{self.layers}-{d}"

    def to_dict(self) -> dict:
        return {"family": "rnn", **asdict(self)}


Spec = Union[CnnSpec, RnnSpec]


def spec_from_dict(d: dict) -> Spec:
    d = dict(d)
    family = d.pop("family")
    return CnnSpec(**d) if family == "cnn" else RnnSpec(**d)


def default_rnn_menu(n_tools: int, bidirectional: bool = False) -> list[RnnSpec]:
    return [RnnSpec(cell, width, 2, bidirectional, n_tools, n_tools)
            for cell in ("lstm", "gru") for width in (8, 16, 32)]


def default_cnn_menu(n_tools: int, height: int = 24, width: int = 24, channels: int = 3) -> list[CnnSpec]:
    return [CnnSpec(a, height, width, channels, n_tools) for a in DEFAULT_CNN_MENU]


# --------------------------------------------------------------------------
# learner

@dataclass
class WeakLearner:
    spec: Spec
    params: dict[str, Parameter]
    provenance: str = "fresh"

    @property
    def family(self) -> str:
        return self.spec.family

    @property
    def n_params(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def copy(self) -> "WeakLearner":
        return WeakLearner(self.spec, {k: p.copy() for k, p in self.params.items()}, self.provenance)

    def load_values_from(self, other: "WeakLearner") -> None:
        if other.spec != self.spec:
            raise ValueError(f"cannot warm-start {self.spec.id} from {other.spec.id}")
        for k, p in self.params.items():
            p.value = other.params[k].value.copy()
            p.sq_avg = np.zeros_like(p.value)

    def forward(self, graph: Graph, x: Node, lengths: Sequence[int] | None = None,
                overrides: dict[str, Node] | None = None) -> Node:
        """Output node; ``overrides`` substitutes nodes for named parameters."""
        overrides = overrides or {}
        nodes = {k: overrides[k] if k in overrides else graph.param(p) for k, p in self.params.items()}
        if self.family == "cnn":
            return _CNN_FORWARD[self.spec.arch](nodes, x, self.spec)
        return _rnn_graph(self.spec, nodes, x, lengths)


def build(spec: Spec, seed: int) -> WeakLearner:
    """Fresh learner for ``spec``; parameters depend only on ``(spec, seed)``."""
    rng = dc.make_rng(seed, spec.id)
    if spec.family == "cnn":
        if spec.arch not in _CNN_INIT:
            raise ValueError(f"unknown CNN architecture {spec.arch!r}")
        if spec.arch in ("A", "B", "C") and (spec.height % 4 or spec.width % 4):
            raise ValueError("menu CNNs need frame extents divisible by 4")
        arrays = _CNN_INIT[spec.arch](spec, rng)
    else:
        arrays = _rnn_init(spec, rng)
    return WeakLearner(spec, {k: Parameter(v, k) for k, v in arrays.items()})


# --------------------------------------------------------------------------
# CNN architectures

def _conv_init(rng, k, cin, cout):
    return dc.glorot_uniform(rng, (k, k, cin, cout), k * k * cin, k * k * cout)


def _dense_init(rng, fin, fout):
    return dc.glorot_uniform(rng, (fin, fout), fin, fout)


def _init_a(spec, rng, extra=False):
    h4 = (spec.height // 4) * (spec.width // 4)
    p = {
        "conv1.w": _conv_init(rng, 3, spec.channels, 8), "conv1.b": np.zeros(8),
        "conv2.w": _conv_init(rng, 3, 8, 16), "conv2.b": np.zeros(16),
    }
    if extra:
        p["conv3.w"] = _conv_init(rng, 3, 16, 16)
        p["conv3.b"] = np.zeros(16)
    p["out.w"] = _dense_init(rng, h4 * 16, spec.n_outputs)
    p["out.b"] = np.zeros(spec.n_outputs)
    return p


def _init_c(spec, rng):
    fin = (spec.height // 4) * (spec.width // 4) * spec.channels
    return {
        "hid.w": _dense_init(rng, fin, 32), "hid.b": np.zeros(32),
        "out.w": _dense_init(rng, 32, spec.n_outputs), "out.b": np.zeros(spec.n_outputs),
    }


def _init_linear(spec, rng):
    fin = spec.height * spec.width * spec.channels
    return {"out.w": _dense_init(rng, fin, spec.n_outputs), "out.b": np.zeros(spec.n_outputs)}


def _init_bias(spec, rng):
    return {"out.b": np.zeros(spec.n_outputs)}


def _flatten(x: Node) -> Node:
    return dc.reshape(x, (x.shape[0], -1))


def _fwd_a(p, x, spec, extra=False):
    h = dc.maxpool2(dc.relu(dc.conv2d(x, p["conv1.w"], p["conv1.b"])))
    h = dc.maxpool2(dc.relu(dc.conv2d(h, p["conv2.w"], p["conv2.b"])))
    if extra:
        h = dc.relu(dc.conv2d(h, p["conv3.w"], p["conv3.b"]))
    return dc.dense(_flatten(h), p["out.w"], p["out.b"])


def _fwd_c(p, x, spec):
    N, H, W, C = x.shape
    small = dc.mean(dc.reshape(x, (N, H // 4, 4, W // 4, 4, C)), axis=(2, 4))
    h = dc.relu(dc.dense(_flatten(small), p["hid.w"], p["hid.b"]))
    return dc.dense(h, p["out.w"], p["out.b"])


def _fwd_linear(p, x, spec):
    return dc.dense(_flatten(x), p["out.w"], p["out.b"])


def _fwd_bias(p, x, spec):
    zeros = x.graph.input(np.zeros((x.shape[0], spec.n_outputs)))
    return dc.add(zeros, p["out.b"])


_CNN_INIT: dict[str, Callable] = {
    "A": _init_a, "B": lambda s, r: _init_a(s, r, extra=True), "C": _init_c,
    "linear": _init_linear, "bias": _init_bias,
}
_CNN_FORWARD: dict[str, Callable] = {
    "A": _fwd_a, "B": lambda p, x, s: _fwd_a(p, x, s, extra=True), "C": _fwd_c,
    "linear": _fwd_linear, "bias": _fwd_bias,
}


# --------------------------------------------------------------------------
# RNN architectures

def _rnn_init(spec: RnnSpec, rng) -> dict[str, np.ndarray]:
    if spec.cell == "identity":
        return {}
    if spec.cell == "lazy":
        p = {}
        for j in range(spec.n_inputs):
            p[f"ch{j}.wx"] = dc.glorot_uniform(rng, (1, 3), 1, 3)
            p[f"ch{j}.wh"] = dc.glorot_uniform(rng, (1, 3), 1, 3)
            p[f"ch{j}.b"] = np.zeros(3)
        p["out.scale"] = dc.glorot_uniform(rng, (spec.n_outputs,), 1, 1)
        p["out.b"] = np.zeros(spec.n_outputs)
        return p
    k = 4 if spec.cell == "lstm" else 3
    C = spec.width
    p = {}
    for direction in ("fwd", "bwd") if spec.bidirectional else ("fwd",):
        fin = spec.n_inputs
        for i in range(spec.layers):
            b = np.zeros(k * C)
            if spec.cell == "lstm":
                b[C:2 * C] = 1.0
            p[f"{direction}.{i}.wx"] = dc.glorot_uniform(rng, (fin, k * C), fin, k * C)
            p[f"{direction}.{i}.wh"] = dc.glorot_uniform(rng, (C, k * C), C, k * C)
            p[f"{direction}.{i}.b"] = b
            fin = C
    width = C * (2 if spec.bidirectional else 1)
    p["out.w"] = _dense_init(rng, width, spec.n_outputs)
    p["out.b"] = np.zeros(spec.n_outputs)
    return p


def _rnn_graph(spec: RnnSpec, p: dict[str, Node], x: Node, lengths) -> Node:
    if spec.cell == "identity":
        return x
    if spec.cell == "lazy":
        B, T, F = x.shape
        chans = []
        for j in range(F):
            xj = dc.reshape(dc.take_column(x, j), (B, T, 1))
            chans.append(dc.gru_layer(xj, p[f"ch{j}.wx"], p[f"ch{j}.wh"], p[f"ch{j}.b"]))
        h = dc.concat(chans, axis=-1)
        return dc.add(dc.mul(h, p["out.scale"]), p["out.b"])
    layer = dc.lstm_layer if spec.cell == "lstm" else dc.gru_layer

    def stack(direction, h):
        for i in range(spec.layers):
            h = layer(h, p[f"{direction}.{i}.wx"], p[f"{direction}.{i}.wh"], p[f"{direction}.{i}.b"])
        return h

    h = stack("fwd", x)
    if spec.bidirectional:
        back = dc.reverse_time(stack("bwd", dc.reverse_time(x, lengths)), lengths)
        h = dc.concat([h, back], axis=-1)
    return dc.dense(h, p["out.w"], p["out.b"])


# --------------------------------------------------------------------------
# inference

def pad_batch(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs])
    if lengths.size == 0 or lengths.min() == 0:
        raise ValueError("empty sequence")
    out = np.zeros((len(seqs), int(lengths.max())) + seqs[0].shape[1:])
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


def cnn_forward(learner: WeakLearner, frames: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Logits ``(batch, tools)`` for a stack of frames."""
    spec = learner.spec
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[1:] != (spec.height, spec.width, spec.channels):
        raise ValueError(f"frames of shape {frames.shape} do not match {spec.id}")
    out = np.empty((len(frames), spec.n_outputs))
    for s in range(0, len(frames), batch_size):
        g = Graph()
        out[s:s + batch_size] = learner.forward(g, g.input(frames[s:s + batch_size])).value
        g.release()
    return out


def rnn_forward(learner: WeakLearner, inputs, batch_size: int = 64):
    """Output sequence(s) for one ``(T, tools)`` array or a list of them."""
    single = isinstance(inputs, np.ndarray) and inputs.ndim == 2
    seqs = [inputs] if single else list(inputs)
    for s in seqs:
        if len(s) == 0:
            raise ValueError("empty sequence")
        if s.shape[-1] != learner.spec.n_inputs:
            raise ValueError(f"input width {s.shape[-1]} != {learner.spec.n_inputs}")
    outs: list[np.ndarray] = [None] * len(seqs)  # type: ignore[list-item]
    order = sorted(range(len(seqs)), key=lambda i: len(seqs[i]))
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        x, lengths = pad_batch([seqs[i] for i in idx])
        g = Graph()
        y = learner.forward(g, g.input(x), lengths).value
        g.release()
        for row, i in enumerate(idx):
            outs[i] = y[row, :lengths[row]].copy()
    return outs[0] if single else outs


def predict(learner: WeakLearner, data, **kw):
    if learner.family == "cnn":
        return cnn_forward(learner, data, **kw)
    return rnn_forward(learner, data, **kw)


# --------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    loss: str = "nll"
    lr: float = 0.01
    lr_decay: float = 0.95
    rho: float = 0.9
    epsilon: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 5
    steps_per_epoch: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("nll", "l2"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be >= 1")

    @classmethod
    def for_cnn(cls, **kw) -> "TrainConfig":
        base = dict(lr=0.01, lr_decay=0.95, batch_size=32)
        base.update(kw)
        return cls(**base)

    @classmethod
    def for_rnn(cls, **kw) -> "TrainConfig":
        base = dict(lr=0.001, lr_decay=1.0, batch_size=8)
        base.update(kw)
        return cls(**base)


@dataclass
class TrainResult:
    learner: WeakLearner
    best_loss: float
    best_epoch: int
    history: list[float] = field(default_factory=list)

    def __iter__(self):
        return iter((self.learner, self.best_loss))


_LOG_CLAMP = -math.log(1e-12)


def nll_and_grad(h: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed logistic NLL of logits ``h`` against +/-1 labels, and its gradient."""
    z = -labels * h
    per = np.logaddexp(0.0, z)
    clamped = per > _LOG_CLAMP
    loss = float(np.where(clamped, _LOG_CLAMP, per).sum())
    grad = -labels * dc.sigmoid_array(z)
    grad[clamped] = 0.0
    return loss, grad


def l2_and_grad(h: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    d = h - targets
    return float(np.sum(d * d)), 2.0 * d


def _loss_fn(kind):
    return nll_and_grad if kind == "nll" else l2_and_grad


def _as_sequences(x):
    return [np.asarray(s, dtype=np.float64) for s in x]


def evaluate_loss(learner: WeakLearner, data, targets, kind: str) -> float:
    fn = _loss_fn(kind)
    if learner.family == "cnn":
        return fn(cnn_forward(learner, data), np.asarray(targets))[0]
    outs = rnn_forward(learner, _as_sequences(data))
    return float(sum(fn(o, np.asarray(t))[0] for o, t in zip(outs, targets)))


def _check_shapes(learner, data, targets):
    if learner.family == "cnn":
        if len(data) != len(targets) or np.shape(targets)[1:] != (learner.spec.n_outputs,):
            raise ValueError("targets do not match data")
    else:
        if len(data) != len(targets) or any(len(a) != len(b) for a, b in zip(data, targets)):
            raise ValueError("targets do not match data")


def _fit(learner: WeakLearner, data, targets, config: TrainConfig, validation=None) -> TrainResult:
    if not learner.params:
        loss = evaluate_loss(learner, *(validation or (data, targets)), config.loss)
        return TrainResult(learner, loss, 0, [loss])
    _check_shapes(learner, data, targets)
    fn = _loss_fn(config.loss)
    is_cnn = learner.family == "cnn"
    if not is_cnn:
        data, targets = _as_sequences(data), _as_sequences(targets)
    else:
        targets = np.asarray(targets, dtype=np.float64)
    val = validation if validation is not None else (data, targets)
    params = list(learner.params.values())
    for p in params:
        p.sq_avg = np.zeros_like(p.value)

    best = evaluate_loss(learner, *val, config.loss)
    if not math.isfinite(best):
        raise TrainingDivergence(0)
    best_values = {k: p.value.copy() for k, p in learner.params.items()}
    best_epoch, history, stale = 0, [best], 0
    n = len(data)
    for epoch in range(1, config.max_epochs + 1):
        rng = dc.make_rng(config.seed, "epoch", epoch)
        order = rng.permutation(n)
        batches = [order[s:s + config.batch_size] for s in range(0, n, config.batch_size)]
        if config.steps_per_epoch is not None:
            batches = batches[:config.steps_per_epoch]
        lr = config.lr * config.lr_decay ** (epoch - 1)
        for idx in batches:
            g = Graph()
            if is_cnn:
                out = learner.forward(g, g.input(data[idx]))
                _, grad = fn(out.value, targets[idx])
            else:
                x, lengths = pad_batch([data[i] for i in idx])
                t, _ = pad_batch([targets[i] for i in idx])
                out = learner.forward(g, g.input(x), lengths)
                _, grad = fn(out.value, t)
                mask = np.arange(x.shape[1])[None, :] < lengths[:, None]
                grad = grad * mask[..., None]
            try:
                grads = dc.backward(g, out, grad)
                dc.rmsprop_step(params, grads, lr, config.rho, config.epsilon)
            except dc.NumericError as exc:
                raise TrainingDivergence(epoch, str(exc)) from exc
            finally:
                g.release()
        try:
            loss = evaluate_loss(learner, *val, config.loss)
        except dc.NumericError as exc:
            raise TrainingDivergence(epoch, str(exc)) from exc
        if not math.isfinite(loss):
            raise TrainingDivergence(epoch)
        history.append(loss)
        if loss < best:
            best, best_epoch, stale = loss, epoch, 0
            best_values = {k: p.value.copy() for k, p in learner.params.items()}
        else:
            stale += 1
            if stale >= config.patience:
                break
    for k, p in learner.params.items():
        p.value = best_values[k]
        p.sq_avg = np.zeros_like(p.value)
    return TrainResult(learner, best, best_epoch, history)


def train_nll(learner: WeakLearner, data, labels, config: TrainConfig, validation=None) -> TrainResult:
    """Fit to +/-1 labels under the logistic NLL; keeps the best-validation epoch."""
    for lab in ([labels] if learner.family == "cnn" else labels):
        if not np.all(np.isin(lab, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
    if config.loss != "nll":
        config = TrainConfig(**{**asdict(config), "loss": "nll"})
    return _fit(learner, data, labels, config, validation)


def train_l2(learner: WeakLearner, data, targets, config: TrainConfig, validation=None,
             init_from: WeakLearner | None = None) -> TrainResult:
    """Least-squares fit to sample weights; optionally warm-started."""
    for t in ([targets] if learner.family == "cnn" else targets):
        if not np.all(np.isfinite(t)):
            raise ValueError("targets must be finite")
    if init_from is not None:
        learner.load_values_from(init_from)
        learner.provenance = f"fine-tuned from {init_from.provenance}"
    if config.loss != "l2":
        config = TrainConfig(**{**asdict(config), "loss": "l2"})
    return _fit(learner, data, targets, config, validation)


# --------------------------------------------------------------------------
# checkpoints

def dumps_learner(learner: WeakLearner) -> bytes:
    names = sorted(learner.params)
    header = {
        "spec": learner.spec.to_dict(),
        "provenance": learner.provenance,
        "params": [{"name": k, "shape": list(learner.params[k].value.shape)} for k in names],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    for k in names:
        buf.write(np.ascontiguousarray(learner.params[k].value, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_learner(blob: bytes) -> WeakLearner:
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a weak-learner checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    header = json.loads(blob[off:off + hlen].decode("utf-8"))
    off += hlen
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
        params[entry["name"]] = Parameter(arr, entry["name"])
    if off != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return WeakLearner(spec_from_dict(header["spec"]), params, header["provenance"])


def save_learner(learner: WeakLearner, path) -> bytes:
    blob = dumps_learner(learner)
    Path(path).write_bytes(blob)
    return blob


def load_learner(path) -> WeakLearner:
    return loads_learner(Path(path).read_bytes())
