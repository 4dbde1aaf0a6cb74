import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gtfuse import geometry as geo
from gtfuse import simulator as sim
from gtfuse.config import SimConfig
from gtfuse.data import ImuData, Trajectory
from gtfuse.errors import FlatSignal, NoOverlap, TooFewSamples
from gtfuse.sync import angular_rate_signal, cross_correlate_offset, imu_rate_signal

RATE = 100.0


def _signal(t):
    # smooth, non-periodic excitation
    return (1.0 + np.sin(1.3 * t) + 0.5 * np.sin(3.7 * t + 0.4) + 0.3 * np.sin(0.31 * t + 1.1)
            + 0.2 * np.sin(7.9 * t))


def _grid(t0, t1, rate=RATE):
    return np.arange(int(np.ceil(t0 * rate)), int(np.floor(t1 * rate)) + 1) / rate


def _constant_rate_traj(w, rate=300.0, n=600):
    t = np.arange(n) / rate
    return Trajectory(t, geo.so3_exp(t[:, None] * w), np.zeros((n, 3)))


def test_static_stream_zero_signal():
    t = np.arange(300) / 300.0
    traj = Trajectory(t, np.tile(np.eye(3), (300, 1, 1)), np.zeros((300, 3)))
    _, v = angular_rate_signal(traj, RATE)
    assert np.all(v == 0)


@pytest.mark.parametrize("axis", [[1, 0, 0], [0, 0.6, 0.8], [-0.36, 0.48, 0.8]])
def test_constant_rate_signal(axis):
    w = 0.9 * np.array(axis, dtype=float)
    tg, v = angular_rate_signal(_constant_rate_traj(w), RATE)
    np.testing.assert_allclose(v, 0.9, atol=1e-6)
    # baseline differencing gives the same constant
    _, vb = angular_rate_signal(_constant_rate_traj(w), RATE, baseline=0.05)
    np.testing.assert_allclose(vb, 0.9, atol=1e-6)
    assert np.allclose(np.diff(tg), 1 / RATE)


def test_imu_constant_rate():
    t = np.arange(1000) / 500.0
    imu = ImuData(t, np.tile([0.0, 0.3, 0.4], (1000, 1)), np.zeros((1000, 3)))
    tg, v = imu_rate_signal(imu, RATE)
    np.testing.assert_allclose(v, 0.5, atol=1e-12)
    np.testing.assert_allclose(tg * RATE, np.rint(tg * RATE), atol=1e-9)


def test_too_few_samples():
    traj = Trajectory([0.0, 1.0], np.tile(np.eye(3), (2, 1, 1)), np.zeros((2, 3)))
    with pytest.raises(TooFewSamples):
        angular_rate_signal(traj, RATE)


def test_simulator_signal_matches_truth():
    cfg = SimConfig(duration=10.0, noiseless=True)
    s = sim.simulate(cfg, seed=3)
    tg, v = angular_rate_signal(s.mocap, RATE)
    # mocap clock -> global, then the analytic body rate
    k = s.truth.body(s.truth.clocks["M"].to_global(tg))
    truth = np.linalg.norm(k.omega, axis=1)
    # finite differences at 300 Hz; error is second order in the interval
    assert np.abs(v - truth).max() < 5e-3 * max(truth.max(), 1.0)
    tg, v = imu_rate_signal(s.imu, RATE)
    truth = np.linalg.norm(s.truth.body(tg).omega, axis=1)
    # intrinsics and bias perturb the gyro slightly
    assert np.abs(v - truth).max() < 0.01


def test_identical_signals_zero_offset():
    t = _grid(0, 60)
    sig = (t, _signal(t))
    assert cross_correlate_offset(sig, sig, RATE) == pytest.approx(0.0, abs=1e-12)


def test_constructed_shift_0137():
    t = _grid(0, 60)
    a = (t, _signal(t))
    tb = _grid(5, 55)
    b = (tb, _signal(tb + 0.137))
    assert abs(cross_correlate_offset(a, b, RATE) - 0.137) <= 1 / (2 * RATE)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5.0, 5.0))
def test_shift_recovery(shift):
    t = _grid(0, 80)
    a = (t, _signal(t))
    tb = _grid(10, 70)
    b = (tb, _signal(tb + shift))
    assert abs(cross_correlate_offset(a, b, RATE, max_lag=5.0) - shift) <= 1 / (2 * RATE)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3.0, 3.0))
def test_antisymmetry(shift):
    t = _grid(0, 60)
    a = (t, _signal(t))
    b = (t, _signal(t + shift))
    ab = cross_correlate_offset(a, b, RATE)
    ba = cross_correlate_offset(b, a, RATE)
    assert abs(ab + ba) <= 1 / RATE


def test_static_streams_flat():
    t = _grid(0, 30)
    with pytest.raises(FlatSignal):
        cross_correlate_offset((t, np.zeros_like(t)), (t, np.zeros_like(t)), RATE)


def test_no_overlap():
    ta = _grid(0, 10)
    tb = _grid(100, 110)
    with pytest.raises(NoOverlap):
        cross_correlate_offset((ta, _signal(ta)), (tb, _signal(tb)), RATE, max_lag=5.0)


def test_simulated_offsets_recovered():
    from gtfuse.initializer import estimate_offsets
    s = sim.simulate(SimConfig(duration=30.0), seed=4)
    off = estimate_offsets(s.measurement_set())
    for k in ("M", "D"):
        c = s.truth.clocks[k]
        assert abs(off[k] - c.offset(c.tau0)) < 1 / (2 * RATE)
