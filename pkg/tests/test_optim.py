import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradprop.errors import ConfigError, NumericError, ShapeError
from gradprop.optim import (ADAPTIVE, LINEAR_DECAY, NoiseSchedule, RmsPropState, noise_sigma,
                            rmsprop_inplace, rmsprop_step)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_zero_grad_leaves_params():
    st_ = RmsPropState(4)
    p = np.array([1.0, -2.0, 3.0, 0.5])
    out, new = rmsprop_step(st_, p, np.zeros(4))
    assert np.array_equal(out, p)
    assert np.array_equal(new.buf, np.zeros(4))


def test_no_memory_step_is_normalized_gradient():
    g = np.array([0.3, -2.0, 1e-3])
    st_ = RmsPropState(3, step_rate=0.01, ms_decay=0.0, momentum=0.0, epsilon_fuzz=1e-8)
    out, _ = rmsprop_step(st_, np.zeros(3), g, ascend=True)
    assert np.allclose(out, 0.01 * g / np.sqrt(g * g + 1e-8), rtol=1e-15)
    assert np.allclose(out[:2], 0.01 * np.sign(g[:2]), rtol=1e-6)


def test_momentum_second_step_is_1_9_times_first():
    # ms_decay = 0 keeps the accumulator equal to g^2 on both steps
    g = np.array([0.7, -1.1])
    st_ = RmsPropState(2, step_rate=0.1, ms_decay=0.0, momentum=0.9)
    p0 = np.zeros(2)
    p1, st1 = rmsprop_step(st_, p0, g)
    p2, _ = rmsprop_step(st1, p1, g)
    assert np.allclose(p2 - p1, 1.9 * (p1 - p0), rtol=1e-14)


def test_scalar_recurrence_hand_simulation():
    acc, buf, p = 0.0, 0.0, 1.0
    st_ = RmsPropState(1, step_rate=0.05, ms_decay=0.8, momentum=0.6, epsilon_fuzz=1e-6)
    params = np.array([1.0])
    for g in [0.4, -0.1, 2.0, 0.0]:
        acc = 0.8 * acc + 0.2 * g * g
        buf = 0.6 * buf + 0.05 * g / (acc + 1e-6) ** 0.5
        p -= buf
        params, st_ = rmsprop_step(st_, params, np.array([g]))
        assert params[0] == pytest.approx(p, rel=1e-14)


@given(arrays(np.float64, st.integers(1, 20), elements=finite), st.booleans())
def test_rmsprop_deterministic_and_shape_preserving(g, ascend):
    st_ = RmsPropState(g.size, step_rate=1e-3)
    p = np.linspace(-1, 1, g.size)
    a, sa = rmsprop_step(st_, p, g, ascend)
    b, sb = rmsprop_step(st_, p, g, ascend)
    assert a.shape == p.shape
    assert np.array_equal(a, b) and np.array_equal(sa.acc, sb.acc)
    assert np.all(sa.acc >= 0)
    assert np.array_equal(st_.acc, np.zeros(g.size))  # input state untouched


@given(arrays(np.float64, 6, elements=finite), st.booleans())
def test_inplace_matches_functional(g, ascend):
    st_ = RmsPropState(6, step_rate=1e-2, momentum=0.5)
    p = np.arange(6.0)
    ref, ref_state = rmsprop_step(st_, p, g, ascend)
    q = p.copy()
    rmsprop_inplace(st_, q, g, ascend)
    assert np.array_equal(q, ref)
    assert np.array_equal(st_.buf, ref_state.buf)


def test_ascend_and_descend_are_mirror_images():
    g = np.array([1.0, -3.0])
    up, _ = rmsprop_step(RmsPropState(2), np.zeros(2), g, ascend=True)
    down, _ = rmsprop_step(RmsPropState(2), np.zeros(2), g, ascend=False)
    assert np.array_equal(up, -down)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_gradient_rejected(bad):
    st_ = RmsPropState(2)
    p = np.ones(2)
    with pytest.raises(NumericError):
        rmsprop_step(st_, p, np.array([0.0, bad]))
    with pytest.raises(NumericError):
        rmsprop_inplace(st_, p, np.array([bad, 0.0]))
    assert np.array_equal(p, np.ones(2))


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        rmsprop_step(RmsPropState(3), np.zeros(3), np.zeros(2))


@pytest.mark.parametrize("kw", [dict(step_rate=0), dict(ms_decay=1.0), dict(momentum=-0.1),
                                dict(epsilon_fuzz=0)])
def test_bad_hyper(kw):
    with pytest.raises(ConfigError):
        RmsPropState(2, **kw)


# -- noise ---------------------------------------------------------------------

def test_linear_schedule_end_points():
    sch = NoiseSchedule(LINEAR_DECAY, 1.0, 0.1, decay_steps=1000)
    assert noise_sigma(sch, 0) == 1.0
    assert noise_sigma(sch, 1000) == pytest.approx(0.1, abs=1e-15)
    assert noise_sigma(sch, 10**7) == pytest.approx(0.1, abs=1e-15)
    assert noise_sigma(sch, 500) == pytest.approx(0.55)


def test_adaptive_floor_holds():
    sch = NoiseSchedule(ADAPTIVE, sigma2_init=0.3, sigma2_floor=0.3)
    assert noise_sigma(sch, 0, True) == 0.3


def test_adaptive_multiplies_and_divides():
    sch = NoiseSchedule(ADAPTIVE, sigma2_init=1.0, sigma2_floor=0.3)
    assert noise_sigma(sch, 0, False) == pytest.approx(1.3)
    assert noise_sigma(sch, 1, True) == pytest.approx(1.0)
    assert noise_sigma(sch, 2, True) == pytest.approx(1 / 1.3)
    assert noise_sigma(sch, 3) == pytest.approx(1 / 1.3)


@given(st.floats(0.01, 10), st.floats(0.001, 1), st.integers(1, 10**6),
       st.lists(st.integers(0, 2 * 10**6), min_size=2, max_size=30))
def test_linear_monotone_and_floored(init, floor, steps, ts):
    sch = NoiseSchedule(LINEAR_DECAY, init, floor, steps)
    vals = [noise_sigma(sch, t) for t in sorted(ts)]
    assert all(v >= floor for v in vals)
    if init >= floor:
        assert all(a >= b for a, b in zip(vals, vals[1:]))


@given(st.floats(0.01, 10), st.floats(0.001, 1), st.lists(st.sampled_from([True, False, None])))
def test_adaptive_never_below_floor(init, floor, events):
    sch = NoiseSchedule(ADAPTIVE, init, floor)
    for t, e in enumerate(events):
        assert noise_sigma(sch, t, e) >= floor


def test_bad_schedule():
    with pytest.raises(ConfigError):
        NoiseSchedule("cosine")
    with pytest.raises(ConfigError):
        NoiseSchedule(sigma2_floor=0.0)
