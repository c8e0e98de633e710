import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from boostseq import diffcore as dc
from boostseq import weak_learners as wl
from helpers import KERNELS, check_kernel

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# --- sigmoid ---------------------------------------------------------------

def _sig(y):
    g = dc.Graph()
    x = g.input(np.asarray(y, dtype=float), requires_grad=True)
    out = dc.sigmoid(x)
    return out.value, dc.backward(g, out, np.ones_like(out.value))[x]


def test_sigmoid_values():
    assert _sig(0.0)[0] == 0.5
    assert _sig(math.log(3))[0] == pytest.approx(0.75, abs=1e-15)
    assert _sig(0.0)[1] == 0.25


# 1 - 2**-53 is the largest double below 1, reached near y = 36.7
@given(hnp.arrays(np.float64, st.integers(1, 20), elements=st.floats(-36, 36)))
def test_sigmoid_open_interval_and_symmetry(y):
    s = dc.sigmoid_array(y)
    assert np.all((s > 0) & (s < 1))
    assert np.allclose(dc.sigmoid_array(-y), 1.0 - s, rtol=0, atol=1e-15)


def test_sigmoid_extremes_stay_finite():
    s = dc.sigmoid_array(np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(s))


# --- backward --------------------------------------------------------------

def test_backward_identity_gives_seed():
    g = dc.Graph()
    x = g.input(np.arange(6.0).reshape(2, 3), requires_grad=True)
    assert np.array_equal(dc.backward(g, x, np.ones((2, 3)))[x], np.ones((2, 3)))


def test_backward_scalar_scale():
    g = dc.Graph()
    x = g.input(np.array(3.0), requires_grad=True)
    out = dc.scale(x, 2.0)
    assert dc.backward(g, out, np.array(1.0))[x] == 2.0


def test_backward_seed_shape_mismatch():
    g = dc.Graph()
    x = g.input(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError):
        dc.backward(g, dc.tanh(x), np.ones(4))


def test_backward_dense_random_seed_matches_finite_differences():
    rng = np.random.default_rng(5)
    W = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    x0 = rng.normal(size=(2, 4))
    seed = rng.normal(size=(2, 3))
    g = dc.Graph()
    x = g.input(x0, requires_grad=True)
    out = dc.dense(x, g.input(W), g.input(b))
    analytic = dc.backward(g, out, seed)[x]
    numeric = np.zeros_like(x0)
    h = 1e-5
    for idx in np.ndindex(x0.shape):
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += h
        xm[idx] -= h
        numeric[idx] = np.sum(seed * ((xp @ W + b) - (xm @ W + b))) / (2 * h)
    assert np.max(np.abs(analytic - numeric)) / np.max(np.abs(numeric)) <= 1e-6


def test_backward_parameters_and_accumulation():
    p = dc.Parameter(np.array([2.0, -1.0]), "w")
    g = dc.Graph()
    w = g.param(p)
    assert g.param(p) is w
    out = dc.add(dc.mul(w, w), w)  # w^2 + w
    grads = dc.backward(g, out, np.ones(2))
    assert np.array_equal(grads[p], 2 * p.value + 1)


@pytest.mark.parametrize("seed", range(3))
def test_one_hot_seeds_extract_jacobian_rows(seed):
    rng = np.random.default_rng(seed)
    W1, W2 = rng.normal(size=(5, 6)), rng.normal(size=(6, 4))
    x0 = rng.normal(size=(2, 5))

    def f(x):
        return np.tanh(x @ W1) @ W2

    g = dc.Graph()
    x = g.input(x0, requires_grad=True)
    out = dc.dense(dc.tanh(dc.dense(x, g.input(W1))), g.input(W2))
    n_out = out.value.size
    assert n_out <= 32
    h = 1e-6
    jac = np.zeros((n_out, x0.size))
    for j in range(x0.size):
        xp, xm = x0.copy().ravel(), x0.copy().ravel()
        xp[j] += h
        xm[j] -= h
        jac[:, j] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))).ravel() / (2 * h)
    for i in range(n_out):
        e = np.zeros(n_out)
        e[i] = 1.0
        row = dc.backward(g, out, e.reshape(out.shape))[x].ravel()
        assert np.allclose(row, jac[i], rtol=1e-6, atol=1e-8)


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_value_raises():
    g = dc.Graph()
    x = g.input(np.array([1e200]))
    with pytest.raises(dc.NumericError):
        dc.mul(x, x)


# --- layer kernels ---------------------------------------------------------

@pytest.mark.parametrize("entry", KERNELS, ids=[k[0] for k in KERNELS])
def test_kernel_gradients(entry):
    for seed in range(5):
        assert check_kernel(entry, seed) <= 1e-5


def test_conv2d_same_padding_matches_direct_sum():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 4, 5, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    g = dc.Graph()
    out = dc.conv2d(g.input(x), g.input(w), g.input(b)).value
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 4, 5, 3))
    for i in range(4):
        for j in range(5):
            ref[0, i, j] = np.einsum("abc,abcd->d", xp[0, i:i + 3, j:j + 3], w) + b
    assert np.allclose(out, ref)


def test_maxpool_picks_block_maxima():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    g = dc.Graph()
    out = dc.maxpool2(g.input(x)).value[0, :, :, 0]
    assert np.array_equal(out, [[5, 7], [13, 15]])
    with pytest.raises(ValueError):
        dc.maxpool2(g.input(np.zeros((1, 3, 4, 1))))


def test_reverse_time_respects_lengths():
    x = np.arange(8.0).reshape(2, 4, 1)
    g = dc.Graph()
    out = dc.reverse_time(g.input(x), [4, 2]).value[..., 0]
    assert np.array_equal(out, [[3, 2, 1, 0], [5, 4, 6, 7]])


# --- grad_check ------------------------------------------------------------

def test_grad_check_sum_sigmoid_passes():
    rng = np.random.default_rng(0)
    rep = dc.grad_check(lambda x: dc.total(dc.sigmoid(x)), rng.normal(size=(3, 4)), tol=1e-6)
    assert rep.passed


def test_grad_check_cnn_l2_on_one_frame():
    rng = np.random.default_rng(2)
    learner = wl.build(wl.CnnSpec("A", 8, 8, 3, 3), 4)
    target = rng.normal(size=(1, 3))

    def fn(x):
        d = dc.sub(learner.forward(x.graph, x), x.graph.input(target))
        return dc.total(dc.mul(d, d))

    assert dc.grad_check(fn, rng.uniform(size=(1, 8, 8, 3)), tol=1e-4).passed


def test_grad_check_detects_corrupted_gradient():
    def bad_square(x):
        v = x.value
        return dc.primitive(v * v, (x,), lambda g, n: (g * v,))  # missing factor 2

    rep = dc.grad_check(lambda x: dc.total(bad_square(x)), np.array([0.3, -1.2]), tol=1e-6)
    assert not rep.passed


@pytest.mark.filterwarnings("ignore:overflow")
def test_grad_check_rejects_non_finite_and_bad_step():
    with pytest.raises(dc.NumericError):
        dc.grad_check(lambda x: dc.total(dc.mul(x, x)), np.array([1e200]))
    with pytest.raises(ValueError):
        dc.grad_check(lambda x: dc.total(x), np.ones(2), step=0)


# --- rmsprop ---------------------------------------------------------------

def test_rmsprop_zero_gradient_keeps_parameters():
    p = dc.Parameter(np.array([1.0, -2.0]))
    dc.rmsprop_step([p], {p: np.zeros(2)}, lr=0.1)
    assert np.array_equal(p.value, [1.0, -2.0])


def test_rmsprop_closed_form_first_step():
    p = dc.Parameter(np.array([0.0]))
    dc.rmsprop_step([p], {p: np.array([1.0])}, lr=0.1, decay_rate=0.9, epsilon=0.0)
    assert p.value[0] == pytest.approx(-0.1 / math.sqrt(0.1), rel=1e-12)
    assert p.value[0] == pytest.approx(-0.3162, abs=1e-4)


def test_rmsprop_repeated_gradient_step_tends_to_lr():
    p = dc.Parameter(np.array([0.0]))
    prev = 0.0
    for _ in range(100):
        dc.rmsprop_step([p], {p: np.array([1.0])}, lr=0.1, decay_rate=0.9, epsilon=0.0)
        step, prev = prev - p.value[0], p.value[0]
    # oracle: s_100 = 1 - 0.9**100, step = 0.1 / sqrt(s_100)
    assert step == pytest.approx(0.10000132809640153, rel=1e-12)


@settings(max_examples=50)
@given(hnp.arrays(np.float64, st.integers(1, 6), elements=finite),
       hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(0, 10)))
def test_rmsprop_zero_gradient_is_fixed_point(value, state):
    p = dc.Parameter(value.copy())
    p.sq_avg = np.resize(state, value.shape)
    dc.rmsprop_step([p], {p: np.zeros_like(value)}, lr=0.01)
    assert np.array_equal(p.value, value)
    assert np.all(p.sq_avg >= 0)


def test_rmsprop_argument_errors():
    p = dc.Parameter(np.zeros(1))
    with pytest.raises(ValueError):
        dc.rmsprop_step([p], {p: np.ones(1)}, lr=0.0)
    with pytest.raises(ValueError):
        dc.rmsprop_step([p], {p: np.ones(1)}, lr=0.1, decay_rate=1.0)
    with pytest.raises(dc.NumericError):
        dc.rmsprop_step([p], {p: np.array([np.nan])}, lr=0.1)


# --- seeding ---------------------------------------------------------------

def test_rng_streams_are_reproducible_and_distinct():
    a = dc.make_rng(3, "x", 1).random(4)
    assert np.array_equal(a, dc.make_rng(3, "x", 1).random(4))
    assert not np.array_equal(a, dc.make_rng(3, "x", 2).random(4))
    assert not np.array_equal(a, dc.make_rng(4, "x", 1).random(4))


def test_glorot_bounds():
    w = dc.glorot_uniform(dc.make_rng(0), (30, 20), 30, 20)
    assert np.abs(w).max() <= math.sqrt(6 / 50)


# --- memory ------------------------------------------------------------------

def test_released_tape_is_freed_without_the_cycle_collector():
    import gc
    import weakref

    gc.disable()
    try:
        g = dc.Graph()
        x = g.input(np.ones((4, 3)), requires_grad=True)
        y = dc.tanh(dc.mul(x, x))
        dc.backward(g, y, np.ones(y.shape))
        probe = weakref.ref(y.value)
        g.release()
        del g, x, y
        assert probe() is None
    finally:
        gc.enable()


def test_cnn_forward_leaves_no_tape_behind():
    import gc
    import weakref

    learner = wl.build(wl.CnnSpec("A"), 0)
    seen = []
    original = dc.Graph.input

    def spy(self, value, requires_grad=False):
        seen.append(weakref.ref(self))
        return original(self, value, requires_grad)

    gc.disable()
    try:
        dc.Graph.input = spy
        wl.cnn_forward(learner, np.zeros((5, 24, 24, 3)), batch_size=2)
    finally:
        dc.Graph.input = original
        gc.enable()
    assert len(seen) == 3 and all(r() is None for r in seen)
