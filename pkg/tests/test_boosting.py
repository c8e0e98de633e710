import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from boostseq import boosting as bs
from boostseq import diffcore as dc
from boostseq import synthdata as sd
from boostseq import weak_learners as wl
from helpers import fd_composite_gradient, toy_sequences, trained_rnn


def bias_learner(values, height=4, width=4):
    l = wl.build(wl.CnnSpec("bias", height, width, 3, len(values)), 0)
    l.params["out.b"].value[:] = values
    return l


def identity_rnn(tools):
    return wl.build(wl.RnnSpec("identity", n_inputs=tools, n_outputs=tools), 0)


# --- strong learner --------------------------------------------------------

def test_strong_logits_examples():
    frames = np.zeros((2, 4, 4, 3))
    assert np.array_equal(bs.strong_logits([], frames, 3), np.zeros((2, 3)))
    assert np.array_equal(dc.sigmoid_array(bs.strong_logits([], frames, 3)), np.full((2, 3), 0.5))
    H = bs.strong_logits([(bias_learner([0.4]), 2.0), (bias_learner([-0.1]), 1.0)], frames)
    assert np.allclose(H, 0.7, rtol=0, atol=1e-15)
    assert not bs.strong_logits([(bias_learner([5.0]), 0.0)], frames).any()


def test_strong_learner_invariants():
    with pytest.raises(ValueError):
        bs.StrongLearner([(bias_learner([1.0]), -0.1)])
    with pytest.raises(ValueError):
        bs.StrongLearner([], [(identity_rnn(1), 1.0)])


def test_nll_examples():
    assert bs.nll(np.array([[0.0]]), np.array([[1.0]])) == pytest.approx(math.log(2), abs=1e-15)
    assert bs.nll(np.array([[-math.log(3)]]), np.array([[-1.0]])) == pytest.approx(-math.log(0.75), abs=1e-15)
    losses = [bs.nll(np.array([[s, -s]]), np.array([[1.0, -1.0]])) for s in (1, 2, 4, 8, 16, 32)]
    assert all(a > b for a, b in zip(losses, losses[1:])) and losses[-1] < 1e-13


def test_sample_weight_examples():
    assert bs.sample_weights(np.array([[0.0]]), np.array([[1.0]]))[0, 0] == 0.5
    assert bs.sample_weights(np.array([[math.log(3)]]), np.array([[1.0]]))[0, 0] == pytest.approx(0.25, abs=1e-15)
    assert bs.sample_weights(np.array([[math.log(3)]]), np.array([[-1.0]]))[0, 0] == pytest.approx(-0.75, abs=1e-15)


def nll_fd(H, labels, step=1e-5):
    g = np.zeros_like(H)
    for idx in np.ndindex(H.shape):
        Hp, Hm = H.copy(), H.copy()
        Hp[idx] += step
        Hm[idx] -= step
        g[idx] = (bs.nll(Hp, labels) - bs.nll(Hm, labels)) / (2 * step)
    return g


@pytest.mark.parametrize("seed", range(20))
def test_sample_weights_are_negative_nll_gradient(seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 6)), int(rng.integers(1, 5)))
    H = rng.normal(0, 2, size=shape)
    labels = np.where(rng.random(shape) < 0.5, 1.0, -1.0)
    w = bs.sample_weights(H, labels)
    fd = -nll_fd(H, labels)
    assert np.max(np.abs(w - fd)) / np.max(np.abs(fd)) <= 1e-8


@given(hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(-30, 30)),
       hnp.arrays(np.bool_, st.integers(1, 30)))
def test_sample_weights_range_and_sign(H, pos):
    n = min(len(H), len(pos))
    H, labels = H[:n], np.where(pos[:n], 1.0, -1.0)
    w = bs.sample_weights(H, labels)
    assert np.all(np.abs(w) <= 1)
    assert np.all((w >= 0) == (labels > 0))


def test_confident_correct_frames_get_vanishing_weight():
    labels = np.array([[1.0, -1.0]])
    mags = [np.abs(bs.sample_weights(np.array([[s, -s]]), labels)).sum() for s in (1, 5, 10, 20, 40)]
    assert all(a > b for a, b in zip(mags, mags[1:])) and mags[-1] < 1e-17


# --- joint weights ---------------------------------------------------------

def test_joint_weights_identity_rnn_closed_form():
    rng = np.random.default_rng(0)
    data = toy_sequences(rng, n_videos=2, length=7, tools=3, M=2)
    H = rng.normal(size=data.labels.shape)
    alpha = 1.7
    w = bs.joint_sample_weights_from_logits([(identity_rnn(3), alpha)], H, data)
    p = dc.sigmoid_array(H)
    q = dc.sigmoid_array(alpha * p)
    expect = np.where(data.labels > 0, p * (1 - p) * alpha * (1 - q), -p * (1 - p) * alpha * q)
    assert np.allclose(w, expect, rtol=1e-14, atol=0)


@pytest.mark.parametrize("cell", ["gru", "lstm"])
@pytest.mark.parametrize("bidirectional", [False, True])
def test_joint_weights_match_composite_gradient(cell, bidirectional):
    rng = np.random.default_rng(1)
    data = toy_sequences(rng, n_videos=1, length=12, tools=3, M=1)
    rnn = trained_rnn(cell, bidirectional, seed=2)
    strong = bs.StrongLearner([(bias_learner([0.0, 0.0, 0.0]), 1.0)], [(rnn, 1.3)])
    H = rng.normal(size=data.labels.shape)
    w = bs.joint_sample_weights_from_logits(strong.rnn_block, H, data)
    fd = -fd_composite_gradient(strong, H, data)
    assert np.max(np.abs(w - fd)) / np.max(np.abs(fd)) <= 1e-6
    off = bs.joint_sample_weights_from_logits(strong.rnn_block, H, data, extra_q_factor=True)
    assert np.max(np.abs(off - fd)) / np.max(np.abs(fd)) > 1e-2


def test_joint_weights_last_frame_ignores_earlier_labels():
    rng = np.random.default_rng(3)
    data = toy_sequences(rng, n_videos=1, length=12, tools=3, M=1)
    rnn = trained_rnn("gru", False, seed=1)
    H = rng.normal(size=data.labels.shape)
    w1 = bs.joint_sample_weights_from_logits([(rnn, 1.0)], H, data)
    data.labels[:-1] *= -1
    w2 = bs.joint_sample_weights_from_logits([(rnn, 1.0)], H, data)
    assert np.array_equal(w1[-1], w2[-1])
    assert not np.array_equal(w1[:-1], w2[:-1])


def test_joint_weights_errors():
    rng = np.random.default_rng(0)
    data = toy_sequences(rng, n_videos=1, length=5, tools=2)
    with pytest.raises(ValueError):
        bs.joint_sample_weights_from_logits([], np.zeros((5, 2)), data)
    with pytest.raises(ValueError):
        bs.joint_sample_weights_from_logits([(identity_rnn(2), 1.0)], np.zeros((4, 2)), data)


def test_joint_weights_handle_subsampling():
    rng = np.random.default_rng(4)
    data = toy_sequences(rng, n_videos=2, length=11, tools=2, M=3)
    rnn = trained_rnn("lstm", False, tools=2, seed=5, epochs=3)
    strong = bs.StrongLearner([(bias_learner([0.0, 0.0]), 1.0)], [(rnn, 0.8)])
    H = rng.normal(size=data.labels.shape)
    w = bs.joint_sample_weights_from_logits(strong.rnn_block, H, data, batch_size=2)
    fd = -fd_composite_gradient(strong, H, data)
    assert np.max(np.abs(w - fd)) / np.max(np.abs(fd)) <= 1e-6


# --- line search -----------------------------------------------------------

def test_line_search_flat_loss_returns_zero():
    assert bs.line_search_alpha(lambda a: 3.0) == (0.0, 3.0)


def test_line_search_closed_form_zero():
    labels = np.array([[1.0], [-1.0]])
    h = np.array([[1.0], [1.0]])
    alpha, loss = bs.line_search_alpha(lambda a: bs.nll(a * h, labels))
    assert alpha == 0.0 and loss == pytest.approx(2 * math.log(2))


def test_line_search_monotone_loss_hits_cap():
    alpha, _ = bs.line_search_alpha(lambda a: bs.nll(np.array([[a]]), np.array([[1.0]])), alpha_max=10.0)
    assert alpha == 10.0


@pytest.mark.parametrize("target", [0.3, 2.5, 7.77])
def test_line_search_finds_interior_minimum(target):
    alpha, _ = bs.line_search_alpha(lambda a: (a - target) ** 2, tol=1e-4)
    assert abs(alpha - target) <= 1e-4


def test_line_search_errors():
    with pytest.raises(ValueError):
        bs.line_search_alpha(lambda a: a, alpha_max=0)
    with pytest.raises(ValueError):
        bs.line_search_alpha(lambda a: a, tol=0)
    with pytest.raises(dc.NumericError):
        bs.line_search_alpha(lambda a: float("nan"))


# --- engine ----------------------------------------------------------------

@pytest.fixture(scope="module")
def small_synth():
    cfg = sd.default_config(n_sequences=6, splits=(3, 1, 2), dwell=((20, 30),) * 6, annotator_jitter=0)
    ds = sd.generate(cfg, 1)

    def split(name):
        vids = ds.split(name)
        return bs.BoostData.from_videos([v.frames for v in vids], [v.labels for v in vids], 2)

    return split("learn"), split("validation")


def quick_config(**kw):
    base = dict(max_iterations=2,
                cnn_train=wl.TrainConfig.for_cnn(max_epochs=2, steps_per_epoch=6),
                rnn_train=wl.TrainConfig.for_rnn(max_epochs=3, batch_size=4))
    base.update(kw)
    return bs.BoostConfig(**base)


CNN_MENU = [wl.CnnSpec("C")]
RNN_MENU = [wl.RnnSpec("gru", 4, 2, False, 8, 8)]


def test_joint_first_iteration_offers_only_cnns(small_synth):
    learn, val = small_synth
    st_ = bs.init_state(quick_config(), learn, val)
    bs.boost_step(st_, CNN_MENU, RNN_MENU, learn, val)
    rec = st_.history[0]
    assert rec.family == "cnn"
    assert {c.family for c in rec.candidates} == {"cnn"}


def test_step_selects_recorded_minimum_and_never_raises_loss(small_synth):
    learn, val = small_synth
    st_ = bs.init_state(quick_config(), learn, val)
    for _ in range(2):
        bs.boost_step(st_, CNN_MENU + [wl.CnnSpec("A")], RNN_MENU, learn, val)
        rec = st_.history[-1]
        best = min(c.loss for c in rec.candidates if c.loss is not None)
        assert rec.train_loss == pytest.approx(best, rel=1e-12)
        assert rec.train_loss <= rec.loss_before
        if st_.done:
            break


def test_zero_alpha_is_rejected_and_stops(small_synth, monkeypatch):
    learn, val = small_synth

    def zero_output(task):
        learner = task[1]
        for p in learner.params.values():
            p.value[...] = 0.0
        return learner, 1.0, None

    monkeypatch.setattr(bs, "_train_task", zero_output)
    st_ = bs.init_state(quick_config(), learn, val)
    bs.boost_step(st_, CNN_MENU, [], learn, val)
    rec = st_.history[-1]
    assert rec.alpha == 0.0 and not rec.accepted
    assert st_.done and not st_.strong.cnn_block
    assert rec.train_loss == rec.loss_before


def test_run_boosting_sequential_phases(small_synth):
    learn, val = small_synth
    st_ = bs.run_boosting(quick_config(strategy="sequential"), CNN_MENU, RNN_MENU, learn, val)
    fams = [r.family for r in st_.history]
    first_rnn = fams.index("rnn") if "rnn" in fams else len(fams)
    assert all(f == "cnn" for f in fams[:first_rnn]) and all(f == "rnn" for f in fams[first_rnn:])
    assert st_.done
    for rec in st_.accepted:
        assert rec.train_loss <= rec.loss_before


def test_run_boosting_is_deterministic_and_worker_independent(small_synth):
    learn, val = small_synth
    a = bs.run_boosting(quick_config(workers=1), CNN_MENU, RNN_MENU, learn, val)
    b = bs.run_boosting(quick_config(workers=2), CNN_MENU, RNN_MENU, learn, val)
    assert [r.to_dict() for r in a.history] == [r.to_dict() for r in b.history]
    pa, qa = bs.predict(a.strong, val)
    pb, qb = bs.predict(b.strong, val)
    assert np.array_equal(pa, pb)


def test_all_candidates_failing_raises(small_synth, monkeypatch):
    learn, val = small_synth
    monkeypatch.setattr(bs, "_train_task", lambda task: (task[1], None, "diverged"))
    with pytest.raises(bs.BoostError):
        bs.boost_step(bs.init_state(quick_config(), learn, val), CNN_MENU, [], learn, val)


def test_boost_data_gather_scatter_round_trip():
    rng = np.random.default_rng(0)
    data = toy_sequences(rng, n_videos=3, length=10, tools=2, M=3)
    v = rng.random(data.labels.shape)
    assert np.array_equal(data.scatter(data.gather(v)), v)
    assert len(data.subsequences) == 9


def test_predict_without_rnn_block():
    rng = np.random.default_rng(0)
    data = toy_sequences(rng, n_videos=1, length=5, tools=2)
    p, q = bs.predict(bs.StrongLearner([(bias_learner([0.0, 1.0]), 1.0)]), data)
    assert q is None and np.allclose(p[:, 1], dc.sigmoid_array(np.array(1.0)))
    p, q = bs.predict(bs.StrongLearner([(bias_learner([0.0, 1.0]), 1.0)], [(identity_rnn(2), 2.0)]), data)
    assert np.allclose(q, dc.sigmoid_array(2.0 * p))
