import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffinspect import diffusion as dfn
from diffinspect.diffusion import (
    BetaSchedule,
    BoxState,
    alpha_bar,
    corrupt,
    ddim_step,
    decode_boxes,
    encode_boxes,
    make_schedule,
    noise_from_x0,
    pad_boxes,
    predict_x0_from_noise,
    sampling_times,
    single_step_diffuse,
)

DEFAULT = make_schedule("linear", 1000)


def _zero_beta_schedule(T: int) -> BetaSchedule:
    # beta = 0 is rejected by validation on purpose; build the degenerate
    # identity schedule directly to exercise coefficient routing
    sched = object.__new__(BetaSchedule)
    object.__setattr__(sched, "T", T)
    object.__setattr__(sched, "betas", np.zeros(T))
    object.__setattr__(sched, "alpha_bars", np.ones(T))
    return sched


# ---------------------------------------------------------------------------
# schedules

def test_linear_schedule_endpoints():
    assert DEFAULT.T == 1000
    assert DEFAULT.betas[0] == pytest.approx(1e-4, abs=0)
    assert DEFAULT.betas[-1] == pytest.approx(0.02, abs=0)


def test_linear_alpha_bar_frozen_value():
    # independently recomputed high-precision product for the default schedule
    assert alpha_bar(DEFAULT, 1000) == pytest.approx(
        4.035829765375676e-05, rel=1e-12
    )
    assert alpha_bar(DEFAULT, 1000) < 1e-3


def test_constant_beta_closed_form():
    sched = BetaSchedule.from_betas(np.full(10, 0.1))
    assert alpha_bar(sched, 3) == pytest.approx(0.729, rel=1e-14)
    assert alpha_bar(sched, 1) == pytest.approx(0.9, rel=1e-14)


def test_alpha_bar_boundaries():
    assert alpha_bar(DEFAULT, 0) == 1.0
    with pytest.raises(ValueError):
        alpha_bar(DEFAULT, 1001)
    with pytest.raises(ValueError):
        alpha_bar(DEFAULT, -1)


def test_cosine_schedule_valid():
    sched = make_schedule("cosine", 500)
    assert sched.T == 500
    assert ((sched.betas > 0) & (sched.betas < 1)).all()
    assert (np.diff(sched.alpha_bars) < 0).all()
    assert alpha_bar(sched, 500) < alpha_bar(sched, 1)


def test_make_schedule_rejects_unknown():
    with pytest.raises(ValueError, match="quadratic"):
        make_schedule("quadratic", 10)
    with pytest.raises(ValueError):
        make_schedule("linear", 0)


def test_schedule_validation():
    with pytest.raises(ValueError, match="beta"):
        BetaSchedule.from_betas(np.array([0.1, 0.0, 0.1]))
    with pytest.raises(ValueError, match="beta"):
        BetaSchedule.from_betas(np.array([0.1, 1.0]))
    with pytest.raises(ValueError, match="length"):
        BetaSchedule(T=3, betas=np.full(2, 0.1), alpha_bars=np.full(3, 0.5))
    good = np.full(4, 0.1)
    with pytest.raises(ValueError, match="running product"):
        BetaSchedule(T=4, betas=good, alpha_bars=np.full(4, 0.5))


# ---------------------------------------------------------------------------
# forward process

def test_closed_form_matches_single_step_composition():
    # (1 - beta_t)(1 - abar_{t-1}) + beta_t == 1 - abar_t for every t, which
    # is exactly the condition for the one-step and jump corruptions to agree
    # in distribution
    for t in (1, 2, 500, 1000):
        ab_t = alpha_bar(DEFAULT, t)
        ab_prev = alpha_bar(DEFAULT, t - 1)
        beta = DEFAULT.betas[t - 1]
        assert (1 - beta) * ab_prev == pytest.approx(ab_t, rel=1e-12)
        assert (1 - beta) * (1 - ab_prev) + beta == pytest.approx(
            1 - ab_t, rel=1e-12
        )


def test_zero_beta_is_identity():
    sched = _zero_beta_schedule(8)
    x0 = BoxState(np.array([[0.5, -0.3, 1.0, -1.5]]), 0)
    noise = np.ones((1, 4))
    stepped = x0
    for t in range(1, 9):
        stepped = single_step_diffuse(stepped, t, noise, sched)
    np.testing.assert_allclose(stepped.boxes, x0.boxes, atol=0)
    jumped = corrupt(x0, 8, noise, sched)
    np.testing.assert_allclose(jumped.boxes, x0.boxes, atol=0)


def test_corrupt_moments():
    x0 = BoxState(np.zeros((2000, 4)), 0)
    rng = np.random.default_rng(0)
    t = 400
    ab = alpha_bar(DEFAULT, t)
    noisy = corrupt(x0, t, rng.standard_normal((2000, 4)), DEFAULT)
    assert noisy.t == t
    assert abs(noisy.boxes.mean()) < 0.03
    assert noisy.boxes.var() == pytest.approx(1.0 - ab, rel=0.05)


def test_corrupt_validates():
    x0 = BoxState(np.zeros((3, 4)), 0)
    with pytest.raises(ValueError):
        corrupt(x0, 0, np.zeros((3, 4)), DEFAULT)
    with pytest.raises(ValueError):
        corrupt(x0, 1001, np.zeros((3, 4)), DEFAULT)
    with pytest.raises(ValueError, match="shape"):
        corrupt(x0, 5, np.zeros((2, 4)), DEFAULT)


def test_box_state_validates():
    with pytest.raises(ValueError):
        BoxState(np.zeros((3, 5)), 0)
    with pytest.raises(ValueError):
        BoxState(np.array([[np.inf, 0, 0, 0]]), 0)
    with pytest.raises(ValueError):
        BoxState(np.zeros((1, 4)), -1)


# ---------------------------------------------------------------------------
# inversion

@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 10**6),
    t=st.integers(1, 1000),
)
def test_corrupt_invert_round_trip(seed, t):
    rng = np.random.default_rng(seed)
    x0 = BoxState(rng.uniform(-2, 2, (5, 4)), 0)
    eps = rng.standard_normal((5, 4))
    x_t = corrupt(x0, t, eps, DEFAULT)
    np.testing.assert_allclose(
        predict_x0_from_noise(x_t, eps, t, DEFAULT), x0.boxes, atol=1e-8
    )
    np.testing.assert_allclose(
        noise_from_x0(x_t, x0.boxes, t, DEFAULT), eps, atol=1e-8
    )


def test_inversion_overflow_guard():
    # 0.1^100 = 1e-100 cumulative signal, far below the floor
    sched = BetaSchedule.from_betas(np.full(100, 0.9))
    x_t = BoxState(np.zeros((1, 4)), 100)
    with pytest.raises(FloatingPointError, match="alpha_bar"):
        predict_x0_from_noise(x_t, np.zeros((1, 4)), 100, sched)


# ---------------------------------------------------------------------------
# reverse sampling

def test_ddim_final_step_returns_prediction():
    rng = np.random.default_rng(1)
    x_t = BoxState(rng.standard_normal((6, 4)), 1000)
    x0_hat = rng.uniform(-2, 2, (6, 4))
    out = ddim_step(x_t, x0_hat, 1000, 0, DEFAULT, eta=0.0)
    np.testing.assert_allclose(out.boxes, x0_hat, atol=1e-12)
    assert out.t == 0


def test_ddim_deterministic_matches_corrupt_with_true_noise():
    # with a perfect clean-signal prediction the recovered noise equals the
    # true noise, so stepping to t_prev lands exactly on the closed-form
    # corruption at t_prev
    rng = np.random.default_rng(2)
    x0 = BoxState(rng.uniform(-1, 1, (4, 4)), 0)
    eps = rng.standard_normal((4, 4))
    t, t_prev = 800, 300
    x_t = corrupt(x0, t, eps, DEFAULT)
    out = ddim_step(x_t, x0.boxes, t, t_prev, DEFAULT, eta=0.0)
    want = corrupt(x0, t_prev, eps, DEFAULT)
    np.testing.assert_allclose(out.boxes, want.boxes, atol=1e-10)


def test_ddim_eta_validation():
    x_t = BoxState(np.zeros((2, 4)), 500)
    x0_hat = np.zeros((2, 4))
    with pytest.raises(ValueError, match="noise"):
        ddim_step(x_t, x0_hat, 500, 100, DEFAULT, eta=0.5)
    with pytest.raises(ValueError, match="eta"):
        ddim_step(x_t, x0_hat, 500, 100, DEFAULT, eta=1.5)
    with pytest.raises(ValueError):
        ddim_step(x_t, x0_hat, 500, 500, DEFAULT)
    out = ddim_step(
        x_t, x0_hat, 500, 100, DEFAULT, eta=0.5,
        noise=np.random.default_rng(3).standard_normal((2, 4)),
    )
    assert out.t == 100


def test_ddim_stochastic_term_scales_with_eta():
    rng = np.random.default_rng(4)
    x_t = BoxState(rng.standard_normal((8, 4)), 900)
    x0_hat = rng.uniform(-1, 1, (8, 4))
    z = rng.standard_normal((8, 4))
    base = ddim_step(x_t, x0_hat, 900, 450, DEFAULT, eta=0.0)
    jittered = ddim_step(x_t, x0_hat, 900, 450, DEFAULT, eta=1.0, noise=z)
    assert not np.allclose(base.boxes, jittered.boxes)


def test_sampling_times_grid():
    assert sampling_times(1000, 4) == [
        (1000, 750), (750, 500), (500, 250), (250, 0)
    ]
    assert sampling_times(1000, 1) == [(1000, 0)]
    times = sampling_times(1000, 7)
    assert times[0][0] == 1000 and times[-1][1] == 0
    for (a, b), (c, _) in zip(times, times[1:]):
        assert b == c and b < a
    with pytest.raises(ValueError):
        sampling_times(1000, 0)


# ---------------------------------------------------------------------------
# signal-space encoding

def test_encode_centered_box_is_origin():
    sig = encode_boxes([[96, 96, 64, 64]], 256, scale=2.0)
    # centered box: cx = cy = 0.5 -> 0 in signal space; w = h = 0.25 -> -1
    np.testing.assert_allclose(sig, [[0.0, 0.0, -1.0, -1.0]], atol=1e-12)


def test_decode_clamps_and_floors():
    out = decode_boxes(np.array([[50.0, -50.0, -50.0, 9.0]]), 100, scale=2.0)
    x, y, w, h = out[0]
    assert w == 1.0  # degenerate width floored to one pixel
    assert h == 100.0
    assert x == pytest.approx(99.5)
    assert y == pytest.approx(-50.0)


def test_encode_rejects_nonfinite():
    with pytest.raises(ValueError):
        encode_boxes([[0, 0, np.nan, 4]], 64)
    with pytest.raises(ValueError):
        decode_boxes(np.array([[np.inf, 0, 0, 0]]), 64)


@settings(max_examples=50, deadline=None)
@given(
    x=st.floats(0, 400), y=st.floats(0, 400),
    w=st.floats(1, 80), h=st.floats(1, 80),
    size=st.integers(64, 512),
)
def test_encode_decode_round_trip(x, y, w, h, size):
    x = min(x, size - w)
    y = min(y, size - h)
    if x < 0 or y < 0:
        return
    sig = encode_boxes([[x, y, w, h]], size)
    out = decode_boxes(sig, size)
    np.testing.assert_allclose(out, [[x, y, w, h]], atol=0.5)


def test_rectangular_image_round_trip():
    box = [[10.0, 20.0, 30.0, 40.0]]
    sig = encode_boxes(box, (640, 480))
    out = decode_boxes(sig, (640, 480))
    np.testing.assert_allclose(out, box, atol=1e-9)


# ---------------------------------------------------------------------------
# training-box padding

def test_pad_boxes_ground_truth_first():
    rng = np.random.default_rng(5)
    gt = [[10, 10, 20, 20], [40, 40, 8, 8]]
    signal, mask = pad_boxes(gt, 10, rng, 128)
    assert signal.shape == (10, 4) and mask.shape == (10,)
    assert mask.tolist() == [True, True] + [False] * 8
    np.testing.assert_allclose(signal[:2], encode_boxes(gt, 128), atol=0)


def test_pad_boxes_truncates_excess():
    rng = np.random.default_rng(6)
    gt = [[i, i, 4, 4] for i in range(30)]
    signal, mask = pad_boxes(gt, 12, rng, 128)
    assert mask.all() and signal.shape == (12, 4)
    decoded = decode_boxes(signal, 128)
    # every kept slot matches one of the supplied boxes
    for row in decoded:
        assert any(np.allclose(row, g, atol=0.5) for g in gt)


def test_pad_boxes_padding_moments():
    rng = np.random.default_rng(7)
    signal, mask = pad_boxes([], 4000, rng, 128)
    assert not mask.any()
    assert abs(signal.mean()) < 0.05
    assert signal.std() == pytest.approx(1.0, rel=0.05)


def test_pad_boxes_deterministic():
    gt = [[5, 5, 10, 10]]
    a, _ = pad_boxes(gt, 50, np.random.default_rng(8), 64)
    b, _ = pad_boxes(gt, 50, np.random.default_rng(8), 64)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        pad_boxes(gt, 0, np.random.default_rng(8), 64)


def test_default_constants():
    assert dfn.DEFAULT_T == 1000
    assert dfn.DEFAULT_SCALE == 2.0
    assert dfn.DEFAULT_BETA_START == 1e-4
    assert dfn.DEFAULT_BETA_END == 0.02
