"""Linear initialization of calibration, clocks and the motion splines."""
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import sync
from .errors import DegenerateMotion, RankDeficient, TooFewSamples
from .factors import select_dut_pairs
from .geometry import Pose
from .spline import EuclidSpline, KnotGrid, TimeOffsetSpline, covering_grid, eval_euclid, eval_so3, fit_spline
from .state import CalibState, SplineBundle, State

GRAVITY_NOMINAL = 9.81
RATE_BASELINE = 0.05  # seconds of pose differencing for the sync signals


@dataclass
class Preintegration:
    dR: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    dt: float


def _interp_imu(t, v, tq):
    return np.stack([np.interp(tq, t, v[:, c]) for c in range(v.shape[1])], axis=-1)


def _second_derivative(t, v):
    """Per-sample second derivative from neighbouring samples."""
    d = np.zeros_like(v)
    if len(t) >= 3:
        slope = np.diff(v, axis=0) / np.diff(t)[:, None]
        d[1:-1] = 2.0 * np.diff(slope, axis=0) / (t[2:] - t[:-2])[:, None]
        d[0], d[-1] = d[1], d[-2]
    return d


def preintegrate(imu, bias_w=None, bias_a=None, t0=None, t1=None):
    """Midpoint-rule preintegration of bias-corrected IMU samples.

    Rotation advances by the mean rate of each step plus the second-order
    commutator term; the rotated specific force is integrated with
    Simpson's rule over the same step. Mean and midpoint values include a
    curvature correction from neighbouring samples, which keeps the error
    at fourth order in the sample spacing. Integrates over ``[t0, t1]``
    (default: first to last sample), interpolating the readings at the
    interval ends. The result is expressed in the IMU frame at ``t0`` and
    does not involve gravity.
    """
    t, gyro, acc = imu.t, imu.gyro, imu.accel
    t0 = t[0] if t0 is None else float(t0)
    t1 = t[-1] if t1 is None else float(t1)
    if len(t) < 2 or not t1 > t0:
        raise TooFewSamples("preintegration needs at least two samples spanning a positive interval")
    bw = np.zeros(3) if bias_w is None else np.asarray(bias_w, dtype=float)
    ba = np.zeros(3) if bias_a is None else np.asarray(bias_a, dtype=float)
    inner = (t > t0) & (t < t1)
    ts = np.concatenate([[t0], t[inner], [t1]])
    w = _interp_imu(t, gyro, ts) - bw
    a = _interp_imu(t, acc, ts) - ba
    w2 = _interp_imu(t, _second_derivative(t, gyro), ts)
    a2 = _interp_imu(t, _second_derivative(t, acc), ts)
    dts = np.diff(ts)
    h = dts[:, None]
    cw = 0.5 * (w2[:-1] + w2[1:]) * h * h
    ca = 0.5 * (a2[:-1] + a2[1:]) * h * h
    # a quadratic through the step has mean (w0 + w1) / 2 - c / 12 over the
    # step and over its first half (3 w0 + w1) / 4 - c / 12, midpoint value
    # (w0 + w1) / 2 - c / 8, with c = h^2 w''
    w_mean = 0.5 * (w[:-1] + w[1:]) - cw / 12.0
    w_half = 0.25 * (3.0 * w[:-1] + w[1:]) - cw / 12.0
    a_mid = 0.5 * (a[:-1] + a[1:]) - ca / 8.0
    steps = geo.so3_exp(h * w_mean + h * h / 12.0 * np.cross(w[:-1], w[1:]))
    halves = geo.so3_exp(0.5 * h * w_half)
    R = np.eye(3)
    alpha = np.zeros(3)
    beta = np.zeros(3)
    for k in range(len(dts)):
        R_next = R @ steps[k]
        # Simpson's rule on the rotated specific force within the step
        f0 = R @ a[k]
        fm = R @ halves[k] @ a_mid[k]
        f1 = R_next @ a[k + 1]
        hk = dts[k]
        alpha = alpha + beta * hk + hk * hk / 6.0 * (f0 + 2.0 * fm)
        beta = beta + hk / 6.0 * (f0 + 4.0 * fm + f1)
        R = R_next
    return Preintegration(R, alpha, beta, t1 - t0)


# ------------------------------------------------------------- hand-eye

def init_rotation_handeye(rel_pairs, return_score=False):
    """Rotation ``X`` with ``a X = X b`` for every pair of relative rotations.

    Returns the scalar-first unit quaternion (``w >= 0``). The conditioning
    score is the ratio of the two smallest singular values.
    """
    rel_pairs = list(rel_pairs)
    if len(rel_pairs) < 2:
        raise DegenerateMotion("hand-eye rotation needs at least two relative motions")
    Ra = np.array([p[0] for p in rel_pairs])
    Rb = np.array([p[1] for p in rel_pairs])
    qa = geo.rot_to_quat(Ra)
    qb = geo.rot_to_quat(Rb)
    A = (geo.quat_left(qa) - geo.quat_right(qb)).reshape(-1, 4)
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s[-2] <= max(10.0 * s[-1], 1e-12 * max(1.0, s[0])):
        raise DegenerateMotion(
            f"hand-eye rotation unobservable (singular values {s[-2]:.3g}, {s[-1]:.3g}); "
            "rotation axes are nearly parallel")
    q = geo.quat_canonical(Vt[-1])
    if return_score:
        return q, float(s[-2] / max(s[-1], 1e-300))
    return q


def _rank_checked_lstsq(A, b, what, tol=1e-9, cols=None):
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms == 0):
        raise RankDeficient(f"{what}: unobservable (zero column)")
    An = A / norms
    sv = np.linalg.svd(An if cols is None else An[:, cols], compute_uv=False)
    if sv[-1] < tol * sv[0]:
        raise RankDeficient(f"{what}: insufficient excitation (singular ratio {sv[-1] / sv[0]:.2e})")
    x, *_ = np.linalg.lstsq(An, b, rcond=None)
    return x / norms


def handeye_translation(Ra, pa, RX, pb):
    """Least-squares ``p`` with ``(Ra - I) p = RX pb - pa`` over all pairs."""
    A = (Ra - np.eye(3)).reshape(-1, 3)
    b = (pb @ RX.T - pa).reshape(-1)
    return _rank_checked_lstsq(A, b, "hand-eye translation", tol=1e-6)


def handeye_from_relatives(Ra, pa, Rb, pb):
    """Solve ``A X = X B`` from stacked relative poses."""
    q = init_rotation_handeye(zip(Ra, Rb))
    RX = geo.quat_to_rot(q)
    p = handeye_translation(Ra, pa, RX, pb)
    return Pose(RX, p)


def interpolate_poses(traj, t):
    """Geodesic interpolation of a pose stream at times ``t`` (clamped)."""
    t = np.asarray(t, dtype=float)
    i = np.clip(np.searchsorted(traj.t, t) - 1, 0, len(traj.t) - 2)
    u = np.clip((t - traj.t[i]) / (traj.t[i + 1] - traj.t[i]), 0.0, 1.0)
    d = geo.so3_log(np.swapaxes(traj.R[i], -1, -2) @ traj.R[i + 1])
    R = traj.R[i] @ geo.so3_exp(u[:, None] * d)
    p = traj.p[i] + u[:, None] * (traj.p[i + 1] - traj.p[i])
    return R, p


def _relatives(R, p, I, J):
    Rt = np.swapaxes(R[I], -1, -2)
    return Rt @ R[J], np.einsum("nab,nb->na", Rt, p[J] - p[I])


def init_handeye_pose_to_pose(traj_a, traj_b, offset=0.0):
    """Extrinsic ``X = T_A_B`` between rigidly attached pose streams.

    ``traj_b`` time ``tau`` corresponds to ``traj_a`` time ``tau + offset``.
    Pairs are selected on ``traj_b`` with the DUT excitation thresholds.
    """
    t = traj_b.t + offset
    keep = (t >= traj_a.t[0]) & (t <= traj_a.t[-1])
    if keep.sum() < 3:
        raise DegenerateMotion("pose streams do not overlap")
    b = traj_b.subset(keep)
    Ra, pa = interpolate_poses(traj_a, b.t + offset)
    pairs = select_dut_pairs(b)
    if len(pairs) < 2:
        raise DegenerateMotion("not enough relative motions for hand-eye calibration")
    RA, PA = _relatives(Ra, pa, pairs.i, pairs.j)
    return handeye_from_relatives(RA, PA, pairs.R_rel, pairs.p_rel)


# --------------------------------------------------- translation + gravity

def init_translation_gravity(mocap_R, mocap_p, preints, R_M_I):
    """Lever arm ``p_M_I``, gravity ``g_P`` and keyframe velocities.

    ``mocap_R``/``mocap_p`` are MoCap poses ``T_P_M`` at ``K`` keyframes and
    ``preints`` the ``K - 1`` preintegrations between consecutive keyframes.
    Velocities are shared between consecutive pairs, giving one linear system
    in ``(p_M_I, g_P, v_0 .. v_{K-1})``. Gravity is the vector pointing down.
    """
    K = len(mocap_R)
    if len(preints) != K - 1 or K < 4:
        raise TooFewSamples("need at least 3 consecutive keyframe pairs")
    n = 6 + 3 * K
    A = np.zeros((6 * (K - 1), n))
    b = np.zeros(6 * (K - 1))
    I3 = np.eye(3)
    for k, pi in enumerate(preints):
        r = 6 * k
        dt = pi.dt
        R_PI = mocap_R[k] @ R_M_I
        vi = 6 + 3 * k
        A[r:r + 3, 0:3] = mocap_R[k] - mocap_R[k + 1]
        A[r:r + 3, 3:6] = 0.5 * dt * dt * I3
        A[r:r + 3, vi:vi + 3] = dt * I3
        b[r:r + 3] = mocap_p[k + 1] - mocap_p[k] - R_PI @ pi.alpha
        A[r + 3:r + 6, 3:6] = -dt * I3
        A[r + 3:r + 6, vi:vi + 3] = -I3
        A[r + 3:r + 6, vi + 3:vi + 6] = I3
        b[r + 3:r + 6] = R_PI @ pi.beta
    x = _rank_checked_lstsq(A, b, "lever arm / gravity", cols=slice(0, 6))
    # full-system rank check on the remaining columns as well
    res = A @ x - b
    return x[0:3], x[3:6], x[6:].reshape(K, 3), float(np.sqrt(np.mean(res ** 2)))


def gravity_aligned_rotation(g_P):
    """Smallest rotation ``R_W_P`` mapping ``g_P`` onto -z."""
    a = g_P / np.linalg.norm(g_P)
    b = np.array([0.0, 0.0, -1.0])
    v = np.cross(a, b)
    s = np.linalg.norm(v)
    c = float(a @ b)
    if s < 1e-12:
        return np.eye(3) if c > 0 else geo.so3_exp([np.pi, 0.0, 0.0])
    return geo.so3_exp(v / s * np.arctan2(s, c))


# ------------------------------------------------------------- seeding

@dataclass
class InitResult:
    R_M_I: np.ndarray
    p_M_I: np.ndarray
    g_P: np.ndarray
    T_M_D: Pose
    offsets: dict
    handeye_score: float = float("nan")
    gravity_rms: float = float("nan")
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    notes: list = field(default_factory=list)


def offset_grid(tau_lo, tau_hi, dt, pad=0.5):
    """Knots spanning ``[tau_lo - pad, tau_hi + pad]`` at the interval nearest ``dt``.

    Anchoring both ends on the data keeps every control point constrained.
    """
    lo, hi = tau_lo - pad, tau_hi + pad
    n = max(1, int(round((hi - lo) / dt)))
    return KnotGrid(float(lo), (hi - lo) / n, n + 1)


def static_gyro_bias(imu, window=0.5, rate_thresh=0.02, acc_thresh=0.05):
    """Mean gyro over an initial static window, or ``None`` if the rig moves."""
    sel = imu.t <= imu.t[0] + window
    if sel.sum() < 10:
        return None
    g = imu.gyro[sel]
    a = np.linalg.norm(imu.accel[sel], axis=1)
    if np.linalg.norm(g, axis=1).max() > rate_thresh or a.std() > acc_thresh:
        return None
    return g.mean(axis=0)


def estimate_offsets(ms, rate_hz=sync.DEFAULT_RATE_HZ, max_lag=sync.DEFAULT_MAX_LAG):
    imu_sig = sync.imu_rate_signal(ms.imu, rate_hz)
    off_M = sync.cross_correlate_offset(
        imu_sig, sync.angular_rate_signal(ms.mocap, rate_hz, RATE_BASELINE), rate_hz, max_lag)
    off_D = sync.cross_correlate_offset(
        imu_sig, sync.angular_rate_signal(ms.dut, rate_hz, RATE_BASELINE), rate_hz, max_lag)
    return {"M": off_M, "I": 0.0, "D": off_D}


def _keyframes(mocap, off_M, imu, spacing):
    t = mocap.t + off_M
    ok = (t > imu.t[0]) & (t < imu.t[-1])
    idx = np.flatnonzero(ok)
    if idx.size < 2:
        raise TooFewSamples("MoCap and IMU do not overlap")
    chosen = [idx[0]]
    for i in idx[1:]:
        if t[i] - t[chosen[-1]] >= spacing - 1e-9:
            chosen.append(i)
    return np.array(chosen)


def seed_state(ms, cfg=None):
    """Sync, linear initialization and spline fitting; returns ``(State, InitResult)``."""
    from .config import EstimateConfig
    cfg = cfg or EstimateConfig()
    offsets = estimate_offsets(ms, cfg.sync_rate, cfg.max_lag)
    off_M0, off_D0 = offsets["M"], offsets["D"]
    notes = []
    bw0 = static_gyro_bias(ms.imu)
    if bw0 is not None:
        notes.append("gyro bias initialized from static start")
    else:
        bw0 = np.zeros(3)

    # MoCap <-> IMU rotation from keyframe relative motions
    kf = _keyframes(ms.mocap, off_M0, ms.imu, cfg.keyframe_dt)
    tk = ms.mocap.t[kf] + off_M0
    preints = [preintegrate(ms.imu, bw0, None, tk[n], tk[n + 1]) for n in range(len(kf) - 1)]
    Rm = ms.mocap.R[kf]
    rel_a = np.swapaxes(Rm[:-1], -1, -2) @ Rm[1:]
    rel_b = np.array([p.dR for p in preints])
    q, score = init_rotation_handeye(zip(rel_a, rel_b), return_score=True)
    R_M_I = geo.quat_to_rot(q)
    p_M_I, g_P, _, g_rms = init_translation_gravity(Rm, ms.mocap.p[kf], preints, R_M_I)
    gnorm = float(np.linalg.norm(g_P))
    if abs(gnorm - GRAVITY_NOMINAL) > 0.05 * GRAVITY_NOMINAL:
        raise DegenerateMotion(f"initial gravity magnitude {gnorm:.3f} m/s^2 outside 5% gate")

    T_M_I = Pose(R_M_I, p_M_I)
    T_B_M = T_M_I.inverse()
    T_W_P = Pose(gravity_aligned_rotation(g_P), np.zeros(3))

    # motion splines from MoCap poses mapped into the body frame
    lo = max(ms.mocap.t[0] + off_M0, ms.imu.t[0], ms.dut.t[0] + off_D0)
    hi = min(ms.mocap.t[-1] + off_M0, ms.imu.t[-1], ms.dut.t[-1] + off_D0)
    dt = cfg.motion_dt
    t0 = np.ceil(lo / dt - 1e-9) * dt
    nseg = int(np.floor((hi - t0) / dt + 1e-9))
    if nseg < 4:
        raise TooFewSamples("overlap of the three streams is too short")
    grid = KnotGrid(float(t0), dt, nseg + 3)
    body = ms.mocap.transformed(T_W_P, T_M_I)
    tb = body.t + off_M0
    rot = fit_spline(tb, grid, values=body.R)
    pos = fit_spline(tb, grid, values=body.p)

    dlo_, dhi_ = grid.domain(4)

    def offset_spline(tau, value):
        used = tau[(tau + value >= dlo_) & (tau + value <= dhi_)]
        return TimeOffsetSpline.constant(offset_grid(used[0], used[-1], cfg.offset_dt), value)

    bgrid = covering_grid(grid.t0, grid.domain(4)[1], cfg.bias_dt, 2)
    bias_w = EuclidSpline(bgrid, 2, np.tile(bw0, (bgrid.count, 1)))
    bias_a = EuclidSpline(bgrid, 2, np.zeros((bgrid.count, 3)))
    bundle = SplineBundle(rot, pos, bias_w, bias_a,
                          offset_spline(ms.mocap.t, off_M0),
                          offset_spline(ms.imu.t, 0.0),
                          offset_spline(ms.dut.t, off_D0))

    # body <-> DUT extrinsic from relative motions at DUT stamps
    dlo, dhi = grid.domain(4)
    td = ms.dut.t + off_D0
    keep = (td >= dlo) & (td <= dhi)
    dut = ms.dut.subset(keep)
    pairs = select_dut_pairs(dut)
    if len(pairs) < 2:
        raise DegenerateMotion("not enough DUT motion for hand-eye calibration")
    tdk = dut.t + off_D0
    RB = eval_so3(rot, tdk)
    pB = eval_euclid(pos, tdk)
    RA, PA = _relatives(RB, pB, pairs.i, pairs.j)
    T_B_D = handeye_from_relatives(RA, PA, pairs.R_rel, pairs.p_rel)

    calib = CalibState(T_B_M, Pose.identity(), T_B_D, T_W_P, np.eye(3), np.eye(3), np.eye(3), gnorm)
    init = InitResult(R_M_I, p_M_I, g_P, T_M_I @ T_B_D, offsets, score, g_rms, bw0, notes)
    return State(bundle, calib), init
