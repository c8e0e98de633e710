"""Shared oracles for the test suite."""

from __future__ import annotations

import numpy as np

from boostseq import diffcore as dc


def random_functional(rng, shape):
    """A fixed random linear functional, so every output coefficient gets its own weight."""
    return rng.standard_normal(shape)


def kernel_check(op, args, which, rng, tol=1e-5, step=1e-5):
    """grad_check of ``sum(R * op(*args))`` with respect to ``args[which]``."""
    out_shape = op(*[dc.Graph().input(a) for a in args]).shape
    R = random_functional(rng, out_shape)

    def fn(node):
        g = node.graph
        nodes = [node if i == which else g.input(a) for i, a in enumerate(args)]
        out = op(*nodes)
        return dc.total(dc.mul(out, g.input(R)))

    return dc.grad_check(fn, args[which], step=step, tol=tol)


def directional_check(learner, x, rng, lengths=None, tol=1e-4, step=1e-5, mask=None):
    """Directional derivative of an L2 loss along a random joint (parameters, input) direction.

    Full nets have thousands of coordinates, so the central difference is
    taken along one random direction covering every parameter and pixel.
    """
    base = {k: p.value.copy() for k, p in learner.params.items()}
    dirs = {k: rng.standard_normal(v.shape) for k, v in base.items()}
    dx = rng.standard_normal(x.shape)
    g0 = dc.Graph()
    out_shape = learner.forward(g0, g0.input(x), lengths).shape
    target = rng.standard_normal(out_shape)
    weight = np.ones(out_shape) if mask is None else mask

    def fn(t):
        g = t.graph
        over = {k: dc.add(g.input(base[k]), dc.mul(t, g.input(dirs[k]))) for k in base}
        xin = dc.add(g.input(x), dc.mul(t, g.input(dx)))
        out = learner.forward(g, xin, lengths, over)
        d = dc.mul(dc.sub(out, g.input(target)), g.input(weight))
        return dc.scale(dc.total(dc.mul(d, d)), 0.5)

    return dc.grad_check(fn, np.zeros(1), step=step, tol=tol)


def _separated(rng, shape, gap=0.05):
    """Values with no near-ties and no entries near zero (keeps max and relu away from their kinks)."""
    n = int(np.prod(shape))
    v = (rng.permutation(n) - n / 2 + 0.5) * gap
    return v.reshape(shape) + rng.uniform(-gap / 4, gap / 4, size=shape)


# (name, op, argument factory, argument indices to check)
KERNELS = [
    ("sigmoid", dc.sigmoid, lambda r: [r.normal(size=(3, 4))], [0]),
    ("relu", dc.relu, lambda r: [_separated(r, (3, 4))], [0]),
    ("tanh", dc.tanh, lambda r: [r.normal(size=(3, 4))], [0]),
    ("add", dc.add, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))], [0, 1]),
    ("sub", dc.sub, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))], [0, 1]),
    ("mul", dc.mul, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(3, 4))], [0, 1]),
    ("scale", lambda x: dc.scale(x, -1.7), lambda r: [r.normal(size=(5,))], [0]),
    ("dense", dc.dense, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5)), r.normal(size=(5,))], [0, 1, 2]),
    ("conv2d", dc.conv2d, lambda r: [r.normal(size=(2, 5, 4, 2)), r.normal(size=(3, 3, 2, 3)), r.normal(size=(3,))],
     [0, 1, 2]),
    ("maxpool2", dc.maxpool2, lambda r: [_separated(r, (2, 4, 6, 2))], [0]),
    ("concat", lambda a, b: dc.concat([a, b], axis=1), lambda r: [r.normal(size=(2, 3, 2)), r.normal(size=(2, 1, 2))],
     [0, 1]),
    ("reshape", lambda x: dc.reshape(x, (4, 3)), lambda r: [r.normal(size=(2, 6))], [0]),
    ("mean", lambda x: dc.mean(x, (0, 2)), lambda r: [r.normal(size=(3, 2, 4))], [0]),
    ("total", dc.total, lambda r: [r.normal(size=(3, 2))], [0]),
    ("take_column", lambda x: dc.take_column(x, 1), lambda r: [r.normal(size=(2, 3, 4))], [0]),
    ("reverse_time", lambda x: dc.reverse_time(x, [4, 2]), lambda r: [r.normal(size=(2, 4, 3))], [0]),
    ("lstm_layer", dc.lstm_layer,
     lambda r: [r.normal(size=(2, 4, 3)), 0.5 * r.normal(size=(3, 12)), 0.5 * r.normal(size=(3, 12)),
                0.5 * r.normal(size=(12,))], [0, 1, 2, 3]),
    ("gru_layer", dc.gru_layer,
     lambda r: [r.normal(size=(2, 4, 3)), 0.5 * r.normal(size=(3, 9)), 0.5 * r.normal(size=(3, 9)),
                0.5 * r.normal(size=(9,))], [0, 1, 2, 3]),
]


def check_kernel(entry, seed, tol=1e-5):
    """Worst relative error over every checked argument of one kernel at one seed."""
    name, op, make, which = entry
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    args = make(rng)
    return max(kernel_check(op, args, w, rng, tol=tol).max_rel_error for w in which)


def toy_sequences(rng, n_videos=2, length=12, tools=3, M=1, frame_shape=(4, 4, 3)):
    """Tiny BoostData with random labels and frames, for oracles that never touch pixels."""
    from boostseq.boosting import BoostData

    frames = [rng.random((length,) + frame_shape) for _ in range(n_videos)]
    labels = [np.where(rng.random((length, tools)) < 0.4, 1.0, -1.0) for _ in range(n_videos)]
    return BoostData.from_videos(frames, labels, M)


def fd_composite_gradient(strong, H, data, step=1e-5):
    """Central differences of the composite NLL with respect to every CNN logit."""
    from boostseq.boosting import composite_nll

    grad = np.zeros_like(H)
    for idx in np.ndindex(H.shape):
        Hp, Hm = H.copy(), H.copy()
        Hp[idx] += step
        Hm[idx] -= step
        grad[idx] = (composite_nll(strong, Hp, data) - composite_nll(strong, Hm, data)) / (2 * step)
    return grad


def trained_rnn(cell, bidirectional, tools=3, seed=0, epochs=15):
    """A briefly trained 2-layer RNN, so the Jacobian is not that of a fresh initialisation."""
    from boostseq import weak_learners as wl

    rng = np.random.default_rng(seed)
    learner = wl.build(wl.RnnSpec(cell, 6, 2, bidirectional, tools, tools), seed)
    seqs = [rng.random((12, tools)) for _ in range(4)]
    labels = [np.where(s > 0.5, 1.0, -1.0) for s in seqs]
    wl.train_nll(learner, seqs, labels, wl.TrainConfig.for_rnn(max_epochs=epochs, batch_size=2, patience=epochs))
    return learner


# Null-simulation p-values from tests/oracles/ttest_monte_carlo.py (1e6 draws each).
TTEST_REFERENCE = [
    ([0.5, -0.5, 0.3, -0.3, 0.1], 0.9193),
    ([-0.546, -1.081, -0.048, 1.3], 0.8660),
    ([1.027, 0.465, 1.719, 1.351, -0.102, -0.943, -0.246, -0.302, 0.806, -1.781], 0.5750),
    ([-0.67, -0.509, 0.166, -1.168, 0.12, 0.234, 0.245, -0.739], 0.1776),
    ([0.238, -1.13, 0.131], 0.6223),
    ([-2.023, -1.241, 0.059, -0.103, -0.417, -0.945, -0.488], 0.0362),
    ([-0.522, 0.279, -0.718, -0.499, 0.347], 0.3731),
    ([-0.887, -1.135, -0.1, 0.964, -0.055, -0.658, -1.727, 0.543], 0.2645),
    ([-0.766, 0.727, 1.44, -1.766, 0.456, 0.711, 0.446, 1.467, 0.491, -1.038], 0.5368),
    ([-0.348, 0.042, 1.378, 1.862, 0.778, -1.902, -1.808], 0.9996),
    ([-0.452, -1.875, -1.423, -0.931, -0.961, -0.297, -0.413, -0.525, -1.104, -1.318], 0.0003),
    ([0.774, 0.948, -1.138, 1.33, 0.491, 1.547], 0.1532),
    ([0.83, 1.271, -0.338, -0.473, -0.569, -0.033, 2.572, -0.216, 0.482, -1.651], 0.6239),
    ([-0.677, 0.641, -2.912], 0.4438),
    ([-1.272, 2.239, 1.242, -0.496, 1.211, 1.373], 0.2409),
    ([0.964, -0.089, -0.445, 0.725, -0.62, -2.633, -0.38, -1.75], 0.2498),
    ([-0.119, 0.361, 0.949], 0.3278),
    ([0.302, 2.244, -0.354], 0.4483),
    ([0.023, 0.65, -0.328, -0.385, 0.728, 1.943, 1.252, -1.816, -0.169, 1.255], 0.3799),
    ([0.309, -1.515, -1.788, -1.222, 0.909, -0.57], 0.1994),
    ([-1.086, -0.468, -2.414, -0.876, -0.094], 0.0670),
]


def auc_by_pairs(scores, labels):
    """Exhaustive pair counting: wins plus half the ties over all (pos, neg) pairs."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def ap_by_thresholds(scores, labels):
    """Walk every distinct threshold from the top, summing recall increments times precision."""
    n_pos = sum(bool(y) for y in labels)
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores), reverse=True):
        picked = [y for s, y in zip(scores, labels) if s >= thr]
        tp = sum(bool(y) for y in picked)
        recall = tp / n_pos
        ap += (recall - prev_recall) * tp / len(picked)
        prev_recall = recall
    return ap


def random_instance(rng):
    """Small instance with both classes and deliberate score ties."""
    n = int(rng.integers(2, 15))
    labels = rng.random(n) < rng.uniform(0.2, 0.8)
    labels[0], labels[1] = True, False
    scores = np.round(rng.random(n), int(rng.integers(1, 3)))
    return scores, labels


def _logits(learner, x, lengths=None):
    from boostseq import diffcore as dc

    g = dc.Graph()
    return learner.forward(g, g.input(x), lengths).value


def fd_hue_gradient(learner, frame, step=1e-6):
    """Signed d sum(H(m*I))/dm by central differences, one pixel mask entry at a time."""
    H, W, _ = frame.shape
    out = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            m = np.ones((H, W, 1))
            m[y, x] += step
            up = _logits(learner, (m * frame)[None]).sum()
            m[y, x] -= 2 * step
            down = _logits(learner, (m * frame)[None]).sum()
            out[y, x] = (up - down) / (2 * step)
    return out


def fd_gradient_matrix(learner, seq, step=1e-6):
    """G[phi, theta] for one sequence: perturb every p(t, theta) and difference each output sum."""
    T, F = seq.shape
    n_out = _logits(learner, seq[None], [T]).shape[-1]
    G = np.zeros((n_out, F))
    for t in range(T):
        for th in range(F):
            xp, xm = seq.copy(), seq.copy()
            xp[t, th] += step
            xm[t, th] -= step
            diff = _logits(learner, xp[None], [T]) - _logits(learner, xm[None], [T])
            G[:, th] += diff[0].sum(axis=0) / (2 * step)
    return G


def causal_gradient_matrix(learner, seq):
    """Triple sum restricted to u >= t, from the full Jacobian via one-hot backward seeds."""
    from boostseq import diffcore as dc

    T, F = seq.shape
    g = dc.Graph()
    x = g.input(seq[None], requires_grad=True)
    out = learner.forward(g, x, [T])
    G = np.zeros((out.shape[-1], F))
    for u in range(T):
        for phi in range(out.shape[-1]):
            seed = np.zeros(out.shape)
            seed[0, u, phi] = 1.0
            G[phi] += dc.backward(g, out, seed)[x][0, :u + 1].sum(axis=0)
    return G


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300))
