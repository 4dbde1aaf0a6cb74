import copy
from dataclasses import replace

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gtfuse import factors as fac
from gtfuse import geometry as geo
from gtfuse import simulator as sim
from gtfuse.config import EstimateConfig, SimConfig
from gtfuse.data import ImuData, MeasurementSet, Trajectory
from gtfuse.errors import EmptyProblem, NumericalFailure
from gtfuse.geometry import Pose
from gtfuse.initializer import seed_state
from gtfuse.pipeline import estimate, solve_options
from gtfuse.solver import (INTRINSICS, STAGE1, build_problem, evaluate, extract_trajectory,
                           make_layout, solve)
from gtfuse.spline import EuclidSpline, KnotGrid, So3Spline, TimeOffsetSpline, fit_spline
from gtfuse.state import TAIL_ORDER, CalibState, Layout, SplineBundle, State, retract

EST = EstimateConfig()


def angle_deg(Ra, Rb):
    return float(np.rad2deg(geo.rotation_angle(Ra.T @ Rb)))


@pytest.fixture(scope="module")
def default_60s():
    s = sim.simulate(SimConfig(), seed=0)
    ms = s.measurement_set()
    seed, _ = seed_state(ms, EST)
    return s, ms, seed


@pytest.fixture(scope="module")
def solved_60s(default_60s):
    """Full estimate at default noise levels on the default 60 s sequence."""
    s, ms, _ = default_60s
    return s, ms, estimate(ms, EST)


@pytest.fixture(scope="module")
def short_problem():
    s = sim.simulate(SimConfig(duration=12.0), seed=3)
    ms = s.measurement_set()
    seed, _ = seed_state(ms, EST)
    return s, ms, seed, build_problem(ms, seed, solve_options(EST))


# ------------------------------------------------------------ problem setup

def naive_pair_count(traj, rot=np.deg2rad(5.0), trans=0.1, dt=0.5):
    """Independent scan with scipy rotations, one candidate at a time."""
    n, a, count = len(traj), 0, 0
    for j in range(1, n):
        rel = Rotation.from_matrix(traj.R[a].T @ traj.R[j])
        theta = rel.magnitude()
        dp = traj.R[a].T @ (traj.p[j] - traj.p[a])
        if theta >= geo.SCREW_ANGLE_FLOOR:
            d = abs(rel.as_rotvec() @ dp) / theta
        else:
            d = np.linalg.norm(dp)
        if theta >= rot - 1e-9 or d >= trans - 1e-9 or traj.t[j] - traj.t[a] >= dt - 1e-9:
            count += 1
            a = j
    return count


def test_block_counts_60s(default_60s):
    s, ms, seed = default_60s
    p = build_problem(ms, seed, solve_options(EST))
    c = p.counts()
    # rates times duration, less the trimmed spline margins
    assert 0.99 * 18000 <= c["mocap"] <= 18000
    assert 0.99 * 30000 <= c["gyro"] == c["accel"] <= 30001
    assert c["bias_rw"] == 2 * (seed.splines.bias_w.grid.count - 1)
    full = naive_pair_count(ms.dut)
    assert len(fac.select_dut_pairs(ms.dut)) == full
    assert abs(c["dut"] - full) <= 0.02 * full
    # the time trigger alone gives one pair per 0.5 s
    assert c["dut"] >= 0.98 * 120


def test_empty_problem(default_60s):
    _, ms, seed = default_60s
    empty = MeasurementSet(Trajectory(np.zeros(0), np.zeros((0, 3, 3)), np.zeros((0, 3))),
                           ImuData(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3))),
                           Trajectory(np.zeros(0), np.zeros((0, 3, 3)), np.zeros((0, 3))))
    with pytest.raises(EmptyProblem):
        build_problem(empty, seed)
    late = MeasurementSet(ms.mocap.shifted(1e4), ms.imu.shifted(1e4), ms.dut.shifted(1e4))
    with pytest.raises(EmptyProblem):
        build_problem(late, seed)


def test_gauge_parameters_never_in_update(short_problem):
    _, _, seed, p = short_problem
    for stage in (STAGE1, STAGE1 + INTRINSICS):
        layout = make_layout(p, seed, stage)
        assert not {"R_BI", "p_BI", "off_I"} & set(layout.blocks)
        assert layout.blocks["tilt"][1] == 2


def test_non_finite_residual_names_block(short_problem):
    _, _, seed, p = short_problem
    bad = copy.deepcopy(p)
    tau, R, pos = bad.mocap
    pos = pos.copy()
    pos[5, 1] = np.nan
    bad.mocap = (tau, R, pos)
    with pytest.raises(NumericalFailure) as info:
        evaluate(bad, seed)
    assert info.value.block == "mocap[5]"


# ------------------------------------------------------------------ solving

def test_noiseless_recovery():
    cfg = SimConfig(noiseless=True, trajectory="spline", duration=12.0)
    s = sim.simulate(cfg, seed=5)
    ms = s.measurement_set()
    est = EstimateConfig()
    seed, _ = seed_state(ms, est)
    p = build_problem(ms, seed, solve_options(est))
    sp, cal, rep = solve(p)
    assert rep.final_cost < 1e-10
    tc = s.truth.calib
    for name in ("T_B_M", "T_B_D"):
        est_T, true_T = getattr(cal, name), getattr(tc, name)
        assert geo.rotation_angle(est_T.R.T @ true_T.R) < 1e-6, name
        np.testing.assert_allclose(est_T.p, true_T.p, atol=1e-6, err_msg=name)
    for name in ("M_w", "M_a", "R_w_a"):
        np.testing.assert_allclose(getattr(cal, name), getattr(tc, name), atol=1e-6, err_msg=name)
    assert cal.g == pytest.approx(tc.g, abs=1e-6)
    for key, stream in (("M", ms.mocap), ("D", ms.dut)):
        off = getattr(sp, f"off_{key}")
        lo, hi = off.grid.domain(2)
        tau = stream.t[(stream.t >= lo) & (stream.t <= hi)]
        np.testing.assert_allclose(off.offset(tau), s.truth.clocks[key].offset(tau), atol=1e-6)


def test_accepted_steps_monotone(solved_60s):
    rep = solved_60s[2].report
    for st in rep.stages:
        # a final rejected attempt counts as an iteration without a step
        assert st["iterations"] - len(st["steps"]) in (0, 1)
        # each step is judged on the DUT snapshot it started from
        for before, after in st["steps"]:
            assert after < before
    assert rep.final_cost <= rep.initial_cost
    assert rep.reason in ("relative_decrease", "gradient", "zero_cost")


def test_default_noise_extrinsics(solved_60s):
    s, _, res = solved_60s
    tc, cal = s.truth.calib, res.state.calib
    T_true = tc.T_B_M.inverse() @ tc.T_B_D
    T_est = cal.T_B_M.inverse() @ cal.T_B_D
    assert angle_deg(T_true.R, T_est.R) < 0.1
    assert 1e3 * np.linalg.norm(T_true.p - T_est.p) < 2.0


def test_bias_tracks_injected_walk(solved_60s):
    s, ms, res = solved_60s
    sp = res.state.splines
    T = s.truth.span[1] - s.truth.span[0]
    rate = 1.0 / np.median(np.diff(ms.imu.t))
    lo, hi = sp.bias_w.grid.domain(2)
    keep = (ms.imu.t >= lo) & (ms.imu.t <= hi)
    tau = ms.imu.t[keep]
    noise = s.truth.noise
    for name, truth, rw in (("bias_w", s.bias_w, noise.gyr_rw), ("bias_a", s.bias_a, noise.acc_rw)):
        err = getattr(sp, name)(tau) - truth[keep]
        rms = np.sqrt(np.mean(np.sum(err ** 2, axis=1) / 3))
        # walk std after T seconds is the per-step sigma times sqrt(steps)
        assert rms < 3 * rw * np.sqrt(rate * T), name


def test_already_optimal_terminates_fast(short_problem):
    _, _, _, base = short_problem
    p = copy.deepcopy(base)
    solve(p)
    sp, cal, rep = solve(p, replace(p.options, two_stage=False))
    assert rep.iterations <= 2


def test_solution_independent_of_seed_perturbation(short_problem):
    _, _, seed, base = short_problem
    layout = Layout(seed, set(TAIL_ORDER) - set(base.fixed))
    outs = []
    for k, scale in enumerate((0.0, 1e-3, 1e-2)):
        p = copy.deepcopy(base)
        p.state = retract(seed, layout, np.random.default_rng(k).normal(0, scale, layout.n))
        sp, cal, _ = solve(p)
        outs.append(extract_trajectory(State(sp, cal), 90.0, "dut", tau_range=(101.0, 111.0)))
    for o in outs[1:]:
        assert len(o) == len(outs[0])
        np.testing.assert_allclose(o.p, outs[0].p, atol=1e-6)
        assert np.rad2deg(geo.rotation_angle(np.swapaxes(o.R, -1, -2) @ outs[0].R).max()) < 1e-6


# --------------------------------------------------------------- extraction

def plain_state(duration=60.0, dt=0.1, t0=5.0, seed=0):
    rng = np.random.default_rng(seed)
    count = int(round(duration / dt)) + 3
    grid = KnotGrid(t0, dt, count)
    c = grid.centres(4)
    rot = So3Spline(grid, geo.so3_exp(np.column_stack([0.3 * np.sin(c), 0.2 * np.cos(0.7 * c), 0.5 * c])))
    pos = EuclidSpline(grid, 4, np.column_stack([np.sin(c), np.cos(c), 0.1 * c]) + rng.normal(0, 0.01, (count, 3)))
    zero = EuclidSpline(KnotGrid(t0 - 1, 100.0, 3), 2, np.zeros((3, 3)))
    off = TimeOffsetSpline.constant(KnotGrid(t0 - 1, 100.0, 3), 0.0)
    return State(SplineBundle(rot, pos, zero, zero, off, off, off), CalibState.identity())


def test_extract_identity_is_raw_spline():
    st = plain_state(10.0)
    out = extract_trajectory(st, 90.0, "dut")
    from gtfuse.spline import eval_euclid, eval_so3
    np.testing.assert_allclose(out.R, eval_so3(st.splines.rot, out.t), atol=1e-12)
    np.testing.assert_allclose(out.p, eval_euclid(st.splines.pos, out.t), atol=1e-12)


def test_extract_90hz_spacing():
    st = plain_state(60.0)
    out = extract_trajectory(st, 90.0, "dut")
    assert abs(len(out) - 5400) <= 2
    np.testing.assert_allclose(np.diff(out.t), 1.0 / 90.0, atol=1e-9)


def test_extract_applies_extrinsic_and_offset():
    st = plain_state(10.0)
    T_B_D = Pose(geo.so3_exp([0.1, -0.2, 0.3]), [0.05, 0.01, -0.02])
    T_W_P = Pose(geo.so3_exp([0.01, 0.02, 0.5]), [1.0, 2.0, 0.0])
    off = TimeOffsetSpline.constant(st.splines.off_D.grid, 0.012)
    st2 = State(st.splines.replace(off_D=off), st.calib.replace(T_B_D=T_B_D, T_W_P=T_W_P))
    out = extract_trajectory(st2, 90.0, "dut")
    R, p = st.splines.body_pose(out.t + 0.012)
    expected = Trajectory(out.t, R, p, check=False).transformed(T_W_P.inverse(), T_B_D)
    np.testing.assert_allclose(out.R, expected.R, atol=1e-12)
    np.testing.assert_allclose(out.p, expected.p, atol=1e-12)


def test_extract_refit_roundtrip():
    st = plain_state(10.0)
    sp = st.splines
    out = extract_trajectory(st, 400.0, "global")
    rot = fit_spline(out.t, sp.rot.grid, values=out.R)
    pos = fit_spline(out.t, sp.pos.grid, values=out.p)
    ang = geo.rotation_angle(np.swapaxes(rot.cps, -1, -2) @ sp.rot.cps)
    assert ang.max() < 1e-8
    np.testing.assert_allclose(pos.cps, sp.pos.cps, atol=1e-8)
