"""Gradient boosting over CNN and RNN weak learners.

A strong learner holds two blocks.  The CNN block maps each frame to logits
``H`` and probabilities ``p = sigmoid(H)``.  The RNN block reads the sequence
of ``p`` vectors (per stride-``M`` subsequence) and produces logits ``H'`` and
probabilities ``q``.  Boosting adds one weak learner per iteration, chosen
with its weight ``alpha >= 0`` to minimise the summed logistic NLL of the
network's final output.

Two drivers are provided: ``sequential`` boosts the CNN block to convergence
and then the RNN block; ``joint`` offers both families at every iteration and,
once an RNN exists, trains new CNNs against the gradient of the final NLL
taken through the RNN block.
"""

from __future__ import annotations

import logging
import math
import multiprocessing as mp
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .sequences import subsample_indices
from .weak_learners import (
    CnnSpec,
    RnnSpec,
    TrainConfig,
    TrainingDivergence,
    WeakLearner,
    build,
    cnn_forward,
    nll_and_grad,
    pad_batch,
    rnn_forward,
    train_l2,
    train_nll,
)

log = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class BoostError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# data

@dataclass
class BoostData:
    """One split: stacked frames and labels plus video/subsequence indexing."""

    frames: np.ndarray
    labels: np.ndarray
    videos: list[np.ndarray]
    M: int = 4
    subsequences: list[np.ndarray] = field(init=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        subs = []
        for v in self.videos:
            M = min(self.M, len(v))
            subs.extend(v[idx] for idx in subsample_indices(len(v), M))
        self.subsequences = subs

    @classmethod
    def from_videos(cls, frames: Sequence[np.ndarray], labels: Sequence[np.ndarray], M: int = 4) -> "BoostData":
        lengths = [len(f) for f in frames]
        starts = np.cumsum([0] + lengths)
        videos = [np.arange(starts[i], starts[i + 1]) for i in range(len(lengths))]
        return cls(np.concatenate(frames), np.concatenate(labels), videos, M)

    @property
    def n_tools(self) -> int:
        return self.labels.shape[1]

    def gather(self, values: np.ndarray) -> list[np.ndarray]:
        return [values[idx] for idx in self.subsequences]

    def scatter(self, parts: Sequence[np.ndarray]) -> np.ndarray:
        out = np.empty((len(self.labels),) + parts[0].shape[1:])
        for idx, part in zip(self.subsequences, parts):
            out[idx] = part
        return out


# --------------------------------------------------------------------------
# strong learner and losses

@dataclass
class StrongLearner:
    cnn_block: list[tuple[WeakLearner, float]] = field(default_factory=list)
    rnn_block: list[tuple[WeakLearner, float]] = field(default_factory=list)

    def __post_init__(self):
        for _, a in self.cnn_block + self.rnn_block:
            if a < 0:
                raise ValueError("weights must be nonnegative")
        if self.rnn_block and not self.cnn_block:
            raise ValueError("an RNN block needs a CNN block to read from")


def strong_logits(block: Sequence[tuple[WeakLearner, float]], x, n_tools: int | None = None):
    """``H(x) = sum_l alpha_l h_l(x)``; an empty block gives zeros."""
    if not block:
        if isinstance(x, np.ndarray) and x.ndim in (2, 4):
            if n_tools is None:
                raise ValueError("n_tools required for an empty block")
            return np.zeros((len(x), n_tools))
        return [np.zeros((len(s), n_tools)) for s in x]
    total = None
    for learner, alpha in block:
        out = cnn_forward(learner, x) if learner.family == "cnn" else rnn_forward(learner, x)
        if isinstance(out, list):
            total = [alpha * o for o in out] if total is None else [t + alpha * o for t, o in zip(total, out)]
        else:
            total = alpha * out if total is None else total + alpha * out
    return total


def nll(H: np.ndarray, labels: np.ndarray) -> float:
    """Summed logistic NLL; probabilities are clamped to [1e-12, 1 - 1e-12]."""
    return nll_and_grad(np.asarray(H, dtype=np.float64), np.asarray(labels, dtype=np.float64))[0]


def sample_weights(H: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Negative NLL gradient: ``1 - sigmoid(H)`` on positives, ``-sigmoid(H)`` on negatives."""
    H = np.asarray(H, dtype=np.float64)
    s = dc.sigmoid_array(H)
    return np.where(np.asarray(labels) > 0, 1.0 - s, -s)


def rnn_block_logits(rnn_block, p: np.ndarray, data: BoostData) -> np.ndarray:
    """RNN-block logits over all frames of ``data`` given CNN probabilities ``p``."""
    H2 = np.zeros_like(p)
    if not rnn_block:
        return H2
    seqs = data.gather(p)
    for learner, alpha in rnn_block:
        H2 += alpha * data.scatter(rnn_forward(learner, seqs))
    return H2


def composite_nll(strong: StrongLearner, H_cnn: np.ndarray, data: BoostData) -> float:
    """Loss of the whole network given CNN-block logits."""
    if not strong.rnn_block:
        return nll(H_cnn, data.labels)
    return nll(rnn_block_logits(strong.rnn_block, dc.sigmoid_array(H_cnn), data), data.labels)


def joint_sample_weights_from_logits(rnn_block, H_cnn: np.ndarray, data: BoostData,
                                     extra_q_factor: bool = False, batch_size: int = 64) -> np.ndarray:
    """Sample weights for a new CNN when an RNN block sits on top.

    ``omega(t, theta) = p (1 - p) * sum_l alpha'_l * sum_{u, phi} seed(u, phi)
    dh'_l(u, phi) / dp(t, theta)`` with ``seed = 1 - q`` where the label is +1
    and ``-q`` where it is -1.  The inner sums are one backward pass per RNN
    learner per batch of subsequences; the Jacobian is never formed.

    ``extra_q_factor`` additionally multiplies the seed by ``q (1 - q)``.  It
    exists for comparison only and does not match the NLL gradient.
    """
    if not rnn_block:
        raise ValueError("joint sample weights need a nonempty RNN block")
    H_cnn = np.asarray(H_cnn, dtype=np.float64)
    if H_cnn.shape != data.labels.shape:
        raise ValueError("logits and labels differ in shape")
    p = dc.sigmoid_array(H_cnn)
    q = dc.sigmoid_array(rnn_block_logits(rnn_block, p, data))
    seed_full = np.where(data.labels > 0, 1.0 - q, -q)
    if extra_q_factor:
        seed_full = seed_full * q * (1.0 - q)
    grad_p = np.zeros_like(p)
    subs = data.subsequences
    order = sorted(range(len(subs)), key=lambda i: len(subs[i]))
    for learner, alpha in rnn_block:
        if alpha == 0:
            continue
        for s in range(0, len(order), batch_size):
            idx = [subs[i] for i in order[s:s + batch_size]]
            x, lengths = pad_batch([p[i] for i in idx])
            seed, _ = pad_batch([seed_full[i] for i in idx])
            g = dc.Graph()
            xin = g.input(x, requires_grad=True)
            out = learner.forward(g, xin, lengths)
            gx = dc.backward(g, out, alpha * seed).get(xin)
            g.release()
            if gx is None:
                continue
            for row, ii in enumerate(idx):
                grad_p[ii] += gx[row, :len(ii)]
    return p * (1.0 - p) * grad_p


def joint_sample_weights(strong: StrongLearner, data: BoostData, extra_q_factor: bool = False) -> np.ndarray:
    H = strong_logits(strong.cnn_block, data.frames, data.n_tools)
    return joint_sample_weights_from_logits(strong.rnn_block, H, data, extra_q_factor)


# --------------------------------------------------------------------------
# line search

def line_search_alpha(loss: Callable[[float], float], alpha_max: float = 10.0,
                      tol: float = 1e-4) -> tuple[float, float]:
    """Golden-section minimisation of ``loss`` on ``[0, alpha_max]``.

    Endpoints are always probed and win ties, ``0`` first, so a flat or
    increasing loss returns ``alpha = 0`` exactly.
    """
    if not alpha_max > 0 or not tol > 0:
        raise ValueError("alpha_max and tol must be positive")

    def f(a):
        v = float(loss(a))
        if not math.isfinite(v):
            raise dc.NumericError(f"non-finite loss at alpha={a}")
        return v

    f0 = f(0.0)
    fmax = f(alpha_max)
    lo, hi = 0.0, alpha_max
    c = hi - GOLDEN * (hi - lo)
    d = lo + GOLDEN * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - GOLDEN * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + GOLDEN * (hi - lo)
            fd = f(d)
    a_mid, f_mid = (c, fc) if fc <= fd else (d, fd)
    best = min([(f0, 0, 0.0), (f_mid, 1, a_mid), (fmax, 2, alpha_max)])
    return best[2], best[0]


# --------------------------------------------------------------------------
# engine state

@dataclass
class BoostConfig:
    strategy: str = "joint"
    alpha_max: float = 10.0
    line_search_tol: float = 1e-4
    stop_tol: float = 1e-4
    patience: int = 1
    max_iterations: int = 8
    cnn_train: TrainConfig = field(default_factory=lambda: TrainConfig.for_cnn(max_epochs=8, steps_per_epoch=60))
    rnn_train: TrainConfig = field(default_factory=lambda: TrainConfig.for_rnn(max_epochs=150, batch_size=4, patience=10))
    seed: int = 0
    extra_q_factor: bool = False
    workers: int | None = None

    def __post_init__(self):
        if self.strategy not in ("joint", "sequential"):
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class CandidateReport:
    id: str
    family: str
    n_params: int
    weak_loss: float | None
    alpha: float | None
    loss: float | None
    error: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class IterationRecord:
    iteration: int
    objective: str
    loss_before: float
    val_before: float
    candidates: list[CandidateReport]
    selected: str | None
    family: str | None
    alpha: float
    train_loss: float
    val_loss: float
    accepted: bool
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["candidates"] = [c.to_dict() for c in self.candidates]
        return d


@dataclass
class BoostState:
    config: BoostConfig
    strong: StrongLearner = field(default_factory=StrongLearner)
    history: list[IterationRecord] = field(default_factory=list)
    phase: str = "cnn"
    last_trained: dict[str, WeakLearner] = field(default_factory=dict)
    H_learn: np.ndarray | None = None
    H_val: np.ndarray | None = None
    H2_learn: np.ndarray | None = None
    H2_val: np.ndarray | None = None
    iteration: int = 0
    block_iterations: int = 0

    @property
    def done(self) -> bool:
        return self.phase == "done"

    @property
    def accepted(self) -> list[IterationRecord]:
        return [r for r in self.history if r.accepted]

    def current_losses(self, learn: BoostData, val: BoostData) -> tuple[str, float, float]:
        if self.uses_rnn_objective():
            return ("rnn", nll(self.H2_learn, learn.labels), nll(self.H2_val, val.labels))
        return ("cnn", nll(self.H_learn, learn.labels), nll(self.H_val, val.labels))

    def uses_rnn_objective(self) -> bool:
        if self.config.strategy == "sequential":
            return self.phase == "rnn"
        return bool(self.strong.rnn_block)


def init_state(config: BoostConfig, learn: BoostData, val: BoostData) -> BoostState:
    st = BoostState(config)
    st.H_learn = np.zeros(learn.labels.shape)
    st.H_val = np.zeros(val.labels.shape)
    st.H2_learn = np.zeros(learn.labels.shape)
    st.H2_val = np.zeros(val.labels.shape)
    return st


# --------------------------------------------------------------------------
# candidate training

def _worker_count(config: BoostConfig) -> int:
    if config.workers is not None:
        return max(1, int(config.workers))
    try:
        return max(1, int(os.environ.get("BOOSTSEQ_THREADS", "1")))
    except ValueError:
        return 1


_SHARED: dict = {}


def _train_task(task):
    kind, learner, init_from, cfg = task[:4]
    data, targets, val = _SHARED[task[4]]
    try:
        if kind == "nll":
            res = train_nll(learner, data, targets, cfg, validation=val)
        else:
            res = train_l2(learner, data, targets, cfg, validation=val, init_from=init_from)
        return res.learner, res.best_loss, None
    except (TrainingDivergence, dc.NumericError) as exc:
        return learner, None, str(exc)


def _run_tasks(tasks, shared, workers):
    _SHARED.clear()
    _SHARED.update(shared)
    try:
        if workers <= 1 or len(tasks) <= 1 or "fork" not in mp.get_all_start_methods():
            return [_train_task(t) for t in tasks]
        with mp.get_context("fork").Pool(min(workers, len(tasks))) as pool:
            return pool.map(_train_task, tasks)
    finally:
        _SHARED.clear()


def _seed_for(config: BoostConfig, iteration: int, spec) -> int:
    return int(dc.derive_seed(config.seed, "candidate", iteration, spec.id).generate_state(1)[0])


def _candidate_tasks(state: BoostState, specs, family: str, learn: BoostData, val: BoostData):
    """Training jobs and shared data for one family's candidates."""
    cfg = state.config
    it = state.iteration
    if family == "cnn":
        if not state.strong.cnn_block:
            kind, tgt, vtgt = "nll", learn.labels, val.labels
        elif state.strong.rnn_block and cfg.strategy == "joint":
            kind = "l2"
            tgt = joint_sample_weights_from_logits(state.strong.rnn_block, state.H_learn, learn, cfg.extra_q_factor)
            vtgt = joint_sample_weights_from_logits(state.strong.rnn_block, state.H_val, val, cfg.extra_q_factor)
        else:
            kind = "l2"
            tgt, vtgt = sample_weights(state.H_learn, learn.labels), sample_weights(state.H_val, val.labels)
        shared = (learn.frames, tgt, (val.frames, vtgt))
        base = cfg.cnn_train
    else:
        p_learn = dc.sigmoid_array(state.H_learn)
        p_val = dc.sigmoid_array(state.H_val)
        if not state.strong.rnn_block:
            kind, tgt, vtgt = "nll", learn.labels, val.labels
        else:
            kind = "l2"
            tgt, vtgt = sample_weights(state.H2_learn, learn.labels), sample_weights(state.H2_val, val.labels)
        shared = (learn.gather(p_learn), learn.gather(tgt), (val.gather(p_val), val.gather(vtgt)))
        base = cfg.rnn_train
    tasks = []
    for spec in specs:
        seed = _seed_for(cfg, it, spec)
        prior = state.last_trained.get(spec.id)
        learner = build(spec, seed)
        tcfg = replace(base, seed=seed)
        init_from = None
        if prior is not None:
            if kind == "nll":
                learner.load_values_from(prior)
            else:
                init_from = prior
        tasks.append((kind, learner, init_from, tcfg, family, prior is not None))
    return tasks, shared, kind


def boost_step(state: BoostState, cnn_menu: Sequence[CnnSpec], rnn_menu: Sequence[RnnSpec],
               learn: BoostData, val: BoostData) -> BoostState:
    """Train every admissible candidate, line-search its weight, add the best."""
    cfg = state.config
    if state.done:
        return state
    state.iteration += 1
    it = state.iteration
    objective, loss_before, val_before = state.current_losses(learn, val)

    if cfg.strategy == "sequential":
        families = ["cnn"] if state.phase == "cnn" else ["rnn"]
    else:
        families = ["cnn"] if not state.strong.cnn_block else ["cnn", "rnn"]
    menus = {"cnn": list(cnn_menu), "rnn": list(rnn_menu)}
    families = [f for f in families if menus[f]]

    all_tasks, shared, kinds = [], {}, {}
    for fam in families:
        tasks, sh, kind = _candidate_tasks(state, menus[fam], fam, learn, val)
        shared[fam] = sh
        kinds[fam] = kind
        all_tasks.extend(tasks)
    results = _run_tasks(all_tasks, shared, _worker_count(cfg))

    reports: list[CandidateReport] = []
    options = []
    p_learn = dc.sigmoid_array(state.H_learn)
    rnn_seqs = learn.gather(p_learn)
    for order, (task, (learner, weak_loss, err)) in enumerate(zip(all_tasks, results)):
        fam = task[4]
        learner.provenance = f"iteration {it}" + (" (warm start)" if task[5] else " (fresh)")
        state.last_trained[learner.spec.id] = learner
        if err is not None:
            reports.append(CandidateReport(learner.spec.id, fam, learner.n_params, None, None, None, err))
            continue
        try:
            if fam == "cnn":
                h = cnn_forward(learner, learn.frames)
                if objective == "rnn":
                    f = lambda a, h=h: composite_nll(state.strong, state.H_learn + a * h, learn)
                else:
                    f = lambda a, h=h: nll(state.H_learn + a * h, learn.labels)
            else:
                h = learn.scatter(rnn_forward(learner, rnn_seqs))
                f = lambda a, h=h: nll(state.H2_learn + a * h, learn.labels)
            alpha, loss = line_search_alpha(f, cfg.alpha_max, cfg.line_search_tol)
        except dc.NumericError as exc:
            reports.append(CandidateReport(learner.spec.id, fam, learner.n_params, weak_loss, None, None, str(exc)))
            continue
        reports.append(CandidateReport(learner.spec.id, fam, learner.n_params, weak_loss, alpha, loss))
        options.append((loss, learner.n_params, order, learner, alpha, fam))

    if not options:
        raise BoostError(f"all candidates failed to train at iteration {it}")
    loss, _, _, chosen, alpha, fam = min(options, key=lambda o: o[:3])

    # tentative update, then validation-driven acceptance
    new_strong = StrongLearner(list(state.strong.cnn_block), list(state.strong.rnn_block))
    H_l, H_v, H2_l, H2_v = state.H_learn, state.H_val, state.H2_learn, state.H2_val
    if fam == "cnn":
        new_strong.cnn_block.append((chosen, alpha))
        H_l = H_l + alpha * cnn_forward(chosen, learn.frames)
        H_v = H_v + alpha * cnn_forward(chosen, val.frames)
        if new_strong.rnn_block:
            H2_l = rnn_block_logits(new_strong.rnn_block, dc.sigmoid_array(H_l), learn)
            H2_v = rnn_block_logits(new_strong.rnn_block, dc.sigmoid_array(H_v), val)
    else:
        new_strong.rnn_block.append((chosen, alpha))
        H2_l = H2_l + alpha * learn.scatter(rnn_forward(chosen, learn.gather(dc.sigmoid_array(H_l))))
        H2_v = H2_v + alpha * val.scatter(rnn_forward(chosen, val.gather(dc.sigmoid_array(H_v))))
    uses_rnn = (fam == "rnn") or objective == "rnn"
    train_loss = nll(H2_l if uses_rnn else H_l, learn.labels)
    val_loss = nll(H2_v if uses_rnn else H_v, val.labels)

    improvement = (val_before - val_loss) / max(abs(val_before), 1e-300)
    accepted = alpha > 0 and improvement >= cfg.stop_tol
    rec = IterationRecord(it, objective, loss_before, val_before, reports, chosen.spec.id, fam, alpha,
                          train_loss, val_loss, accepted)
    state.history.append(rec)
    log.info("iteration %d: %s alpha=%.4g train=%.6g val=%.6g %s", it, chosen.spec.id, alpha,
             train_loss, val_loss, "accepted" if accepted else "rejected")
    if accepted:
        state.strong = new_strong
        state.H_learn, state.H_val, state.H2_learn, state.H2_val = H_l, H_v, H2_l, H2_v
        state.block_iterations += 1
    if not accepted or state.block_iterations >= cfg.max_iterations:
        _advance_phase(state, rnn_menu)
    return state


def _advance_phase(state: BoostState, rnn_menu) -> None:
    if state.config.strategy == "sequential" and state.phase == "cnn" and rnn_menu and state.strong.cnn_block:
        state.phase = "rnn"
        state.block_iterations = 0
    else:
        state.phase = "done"


def run_boosting(config: BoostConfig, cnn_menu: Sequence[CnnSpec], rnn_menu: Sequence[RnnSpec],
                 learn: BoostData, val: BoostData, on_iteration: Callable | None = None) -> BoostState:
    """Boost until the validation loss stops improving (per block when sequential)."""
    if not cnn_menu:
        raise ValueError("the CNN menu must not be empty")
    state = init_state(config, learn, val)
    while not state.done:
        boost_step(state, cnn_menu, rnn_menu, learn, val)
        if on_iteration is not None:
            on_iteration(state)
    return state


# --------------------------------------------------------------------------
# inference

def predict(strong: StrongLearner, data: BoostData) -> tuple[np.ndarray, np.ndarray | None]:
    """Final-stage probabilities ``(p, q)``; ``q`` is None without an RNN block."""
    H = strong_logits(strong.cnn_block, data.frames, data.n_tools)
    p = dc.sigmoid_array(H)
    if not strong.rnn_block:
        return p, None
    return p, dc.sigmoid_array(rnn_block_logits(strong.rnn_block, p, data))
