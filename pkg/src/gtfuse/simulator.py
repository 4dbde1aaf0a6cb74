"""Synthetic MoCap / IMU / DUT datasets with known ground truth.

The rig body ``B`` follows either a sum-of-sinusoids trajectory (Z-Y-X
Euler angles and per-axis positions, all with closed-form derivatives) or a
cubic B-spline. Each sensor has its own clock ``t = tau + c0 + c1 * (tau -
tau_start)`` relative to the IMU clock, which doubles as the global clock.
DUT drift is modelled as a random walk on composed relative poses instead of
running a visual SLAM system.
"""
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from . import geometry as geo
from .config import SimConfig
from .data import ImuData, MeasurementSet, NoiseSpec, Trajectory
from .errors import BadConfig
from .geometry import Pose
from .io import write_imu_file, write_text, write_trajectory
from .spline import EuclidSpline, KnotGrid, So3Spline, eval_euclid, so3_local
from .state import CalibState, matrix_to_upper

GRAVITY = 9.81
E = np.eye(3)


@dataclass
class Kinematics:
    R: np.ndarray
    p: np.ndarray
    omega: np.ndarray  # body frame
    domega: np.ndarray
    v: np.ndarray  # world frame
    a: np.ndarray

    @property
    def Rdot(self):
        return self.R @ geo.hat(self.omega)

    @property
    def Rddot(self):
        W = geo.hat(self.omega)
        return self.R @ (geo.hat(self.domega) + W @ W)


class SinusoidMotion:
    """Closed-form body motion ``R = R0 Rz(psi) Ry(theta) Rx(phi)``, ``p = p0 + s(t)``.

    ``rot`` and ``trans`` are (3, c, 3) arrays of (amplitude, frequency Hz,
    phase) per axis and component; rotation axis order is z, y, x.
    """

    AXES = (2, 1, 0)

    def __init__(self, rot, trans, R0=None, p0=None):
        self.rot = np.asarray(rot, dtype=float)
        self.trans = np.asarray(trans, dtype=float)
        self.R0 = np.eye(3) if R0 is None else np.asarray(R0, dtype=float)
        self.p0 = np.zeros(3) if p0 is None else np.asarray(p0, dtype=float)

    @staticmethod
    def _sines(params, t):
        A, f, ph = params[..., 0], params[..., 1], params[..., 2]
        w = 2 * np.pi * f
        arg = w[..., None] * t + ph[..., None]  # (axes, c, n)
        s0 = (A[..., None] * np.sin(arg)).sum(axis=1)
        s1 = (A[..., None] * w[..., None] * np.cos(arg)).sum(axis=1)
        s2 = (-A[..., None] * w[..., None] ** 2 * np.sin(arg)).sum(axis=1)
        return s0.T, s1.T, s2.T  # (n, 3)

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        a0, a1, a2 = self._sines(self.rot, t)
        R = np.broadcast_to(self.R0, (len(t), 3, 3)).copy()
        Rd = np.zeros_like(R)
        Rdd = np.zeros_like(R)
        for n, ax in enumerate(self.AXES):
            e = E[ax]
            F = geo.so3_exp(a0[:, n, None] * e)
            K = geo.hat(e)
            Fd = F @ K * a1[:, n, None, None]
            Fdd = F @ (K * a2[:, n, None, None] + (K @ K) * (a1[:, n] ** 2)[:, None, None])
            Rdd = Rdd @ F + 2 * Rd @ Fd + R @ Fdd
            Rd = Rd @ F + R @ Fd
            R = R @ F
        Rt = np.swapaxes(R, -1, -2)
        omega = geo.vee(Rt @ Rd)
        domega = geo.vee(Rt @ Rdd)
        p0, p1, p2 = self._sines(self.trans, t)
        return Kinematics(R, self.p0 + p0, omega, domega, p1, p2)


class SplineMotion:
    """Body motion given by rotation and position cubic B-splines."""

    def __init__(self, rot, pos):
        self.rot, self.pos = rot, pos

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        i, u = self.rot.grid.locate(t, 4)
        idx = i[:, None] + np.arange(4)
        loc = so3_local(self.rot.cps[idx], u, self.rot.grid.dt)
        return Kinematics(loc.R, eval_euclid(self.pos, t), loc.omega, loc.domega,
                          eval_euclid(self.pos, t, 1), eval_euclid(self.pos, t, 2))


@dataclass
class Clock:
    """Sensor clock: global time ``t = tau + c0 + c1 * (tau - tau0)``."""

    c0: float = 0.0
    c1: float = 0.0
    tau0: float = 0.0

    def offset(self, tau):
        return self.c0 + self.c1 * (np.asarray(tau, dtype=float) - self.tau0)

    def to_global(self, tau):
        return np.asarray(tau, dtype=float) + self.offset(tau)

    def to_sensor(self, t):
        return (np.asarray(t, dtype=float) - self.c0 + self.c1 * self.tau0) / (1.0 + self.c1)


@dataclass
class SimTruth:
    motion: object
    calib: CalibState  # with the true T_B_I (not the estimator gauge)
    T_H_W: Pose
    clocks: dict  # 'M', 'I', 'D' -> Clock
    bias_w0: np.ndarray
    bias_a0: np.ndarray
    span: tuple  # global time interval covered by every stream
    seed: int
    config: SimConfig
    noise: NoiseSpec

    def body(self, t):
        return self.motion(t)


@dataclass
class SimSamples:
    truth: SimTruth
    mocap: Trajectory
    imu: ImuData
    dut: Trajectory
    mocap_clean: Trajectory
    dut_truth: Trajectory  # T_P_D at DUT stamps
    bias_w: np.ndarray  # true bias at IMU samples
    bias_a: np.ndarray

    def measurement_set(self):
        return MeasurementSet(self.mocap, self.imu, self.dut, self.truth.noise)


def _rand_pose(rng, trans_range):
    R = Rotation.random(random_state=rng).as_matrix()
    return Pose(R, rng.uniform(-trans_range, trans_range, 3))


def _sinusoid_params(rng, cfg):
    c = cfg.components
    edges = np.geomspace(cfg.f_min, cfg.f_max, c + 1)
    f_ref = cfg.f_min * 1.5

    def draw(amp):
        out = np.zeros((3, c, 3))
        for ax in range(3):
            for k in range(c):
                f = rng.uniform(edges[k], edges[k + 1])
                scale = min(1.0, (f_ref / f) ** cfg.amp_falloff)
                out[ax, k] = (amp * scale * rng.uniform(0.6, 1.0), f, rng.uniform(0, 2 * np.pi))
        return out

    rot = draw(np.deg2rad(cfg.rot_amp_deg))
    trans = draw(cfg.trans_amp)
    if cfg.preset == "degraded":
        rot[..., 0] *= 0.5
        trans[..., 0] *= 0.5
        rot[2, :, 0] = 0.0  # no roll
    elif cfg.preset == "static":
        rot[..., 0] = 0.0
        trans[..., 0] = 0.0
    return rot, trans


def make_truth(cfg=None, seed=0, noise=None):
    """Random but reproducible ground truth for one dataset."""
    cfg = cfg or SimConfig()
    noise = noise or NoiseSpec()
    if cfg.duration <= 1.0:
        raise BadConfig("simulate.duration must exceed 1 s")
    calib_seed = seed if cfg.calib_seed < 0 else cfg.calib_seed
    crng = np.random.default_rng([calib_seed, 1])
    rng = np.random.default_rng([seed, 2])

    T_B_M = _rand_pose(crng, cfg.extrinsic_trans_range)
    T_B_D = _rand_pose(crng, cfg.extrinsic_trans_range)
    T_B_I = _rand_pose(crng, cfg.extrinsic_trans_range)
    T_W_P = _rand_pose(crng, 1.0)
    T_H_W = _rand_pose(crng, 1.0)
    s = cfg.intrinsic_scale
    M_w = E + np.triu(crng.uniform(-s, s, (3, 3)))
    M_a = E + np.triu(crng.uniform(-s, s, (3, 3)))
    R_w_a = geo.so3_exp(crng.uniform(-s, s, 3))

    def drift_sign():
        if cfg.clock_drift_sign == "positive":
            return 1.0
        if cfg.clock_drift_sign == "negative":
            return -1.0
        return float(rng.choice([-1.0, 1.0]))

    t0 = cfg.t_start
    clocks = {"I": Clock(0.0, 0.0, t0)}
    for name in ("M", "D"):
        c0 = rng.uniform(-cfg.clock_offset_range, cfg.clock_offset_range)
        clocks[name] = Clock(c0, drift_sign() * noise.clock_drift, t0 - c0)

    rot, trans = _sinusoid_params(rng, cfg)
    R0 = Rotation.random(random_state=rng).as_matrix() if cfg.preset != "static" else np.eye(3)
    sin_motion = SinusoidMotion(rot, trans, R0, rng.uniform(-0.5, 0.5, 3) + np.array([0, 0, 1.2]))
    margin = cfg.clock_offset_range + 0.5
    span = (t0, t0 + cfg.duration)
    if cfg.trajectory == "spline":
        dt = cfg.spline_dt
        grid = KnotGrid(np.floor((t0 - margin) / dt) * dt, dt,
                        int(np.ceil((cfg.duration + 2 * margin) / dt)) + 4)
        k = sin_motion(grid.centres(4))
        T_B_I = Pose(np.eye(3), np.zeros(3))  # spline encodes the IMU frame exactly
        motion = SplineMotion(So3Spline(grid, k.R), EuclidSpline(grid, 4, k.p))
    else:
        motion = sin_motion

    bw0 = rng.normal(0, np.deg2rad(cfg.gyro_bias0_deg), 3)
    ba0 = rng.normal(0, cfg.acc_bias0, 3)
    calib = CalibState(T_B_M, T_B_I, T_B_D, T_W_P, R_w_a, M_w, M_a, GRAVITY)
    return SimTruth(motion, calib, T_H_W, clocks, bw0, ba0, span, seed, cfg, noise)


def _sensor_times(clock, span, rate):
    lo = clock.to_sensor(span[0])
    hi = clock.to_sensor(span[1])
    k = np.arange(int(np.ceil(lo * rate)), int(np.floor(hi * rate)) + 1)
    return k / rate


def _noise_rng(truth, stream):
    return np.random.default_rng([truth.seed, 3, stream])


def sample_mocap(truth, rate=None):
    """Noisy and clean MoCap poses ``T_P_M`` at MoCap clock stamps."""
    cfg, nz = truth.config, truth.noise
    rate = rate or cfg.mocap_rate
    tau = _sensor_times(truth.clocks["M"], truth.span, rate)
    k = truth.body(truth.clocks["M"].to_global(tau))
    cal = truth.calib
    clean = Trajectory(tau, k.R, k.p, check=False).transformed(cal.T_W_P.inverse(), cal.T_B_M)
    if cfg.noiseless:
        return clean, clean
    rng = _noise_rng(truth, 0)
    R = clean.R @ geo.so3_exp(rng.normal(0, nz.mocap_sigma_r, (len(tau), 3)))
    p = clean.p + rng.normal(0, nz.mocap_sigma_p, (len(tau), 3))
    return Trajectory(tau, R, p, check=False), clean


def imu_truth(truth, tau, bias_w=None, bias_a=None):
    """Noise-free gyroscope and accelerometer readings at IMU stamps."""
    cal = truth.calib
    k = truth.body(truth.clocks["I"].to_global(tau))
    R_BI, p_BI = cal.T_B_I.R, cal.T_B_I.p
    omega_I = k.omega @ R_BI
    aW = k.Rddot @ p_BI + k.a
    a_I = np.einsum("nba,nb->na", k.R @ R_BI, aW - cal.g_W)
    gyro = omega_I @ (cal.M_w @ cal.R_w_a).T
    acc = a_I @ cal.M_a.T
    if bias_w is not None:
        gyro = gyro + bias_w
    if bias_a is not None:
        acc = acc + bias_a
    return gyro, acc


def sample_imu(truth, rate=None):
    """IMU samples with white noise and random-walk biases.

    Returns ``(ImuData, bias_w, bias_a)`` with the true biases per sample.
    """
    cfg, nz = truth.config, truth.noise
    rate = rate or cfg.imu_rate
    tau = _sensor_times(truth.clocks["I"], truth.span, rate)
    n = len(tau)
    if cfg.noiseless:
        # biases stay at their (deterministic) initial values
        bw = np.broadcast_to(truth.bias_w0, (n, 3)).copy()
        ba = np.broadcast_to(truth.bias_a0, (n, 3)).copy()
        g, a = imu_truth(truth, tau, bw, ba)
        return ImuData(tau, g, a, check=False), bw, ba
    rng = _noise_rng(truth, 1)
    bw = truth.bias_w0 + np.cumsum(rng.normal(0, nz.gyr_rw, (n, 3)), axis=0)
    ba = truth.bias_a0 + np.cumsum(rng.normal(0, nz.acc_rw, (n, 3)), axis=0)
    g, a = imu_truth(truth, tau, bw, ba)
    g = g + rng.normal(0, nz.gyr_nd, (n, 3))
    a = a + rng.normal(0, nz.acc_nd, (n, 3))
    return ImuData(tau, g, a, check=False), bw, ba


def sample_dut(truth, rate=None):
    """Drifting DUT poses ``T_H_D`` and the true ``T_P_D`` at DUT stamps.

    Each relative pose between consecutive samples is corrupted by white
    noise (per-axis std = configured norm / sqrt(3)) and by a drift rate that
    itself performs a slow random walk.
    """
    cfg = truth.config
    rate = rate or cfg.dut_rate
    tau = _sensor_times(truth.clocks["D"], truth.span, rate)
    k = truth.body(truth.clocks["D"].to_global(tau))
    cal = truth.calib
    body = Trajectory(tau, k.R, k.p, check=False)
    true_P = body.transformed(cal.T_W_P.inverse(), cal.T_B_D)
    true_H = body.transformed(truth.T_H_W, cal.T_B_D)
    if cfg.noiseless:
        return true_H, true_P
    rng = _noise_rng(truth, 2)
    n = len(tau)
    dt = 1.0 / rate
    sr = np.deg2rad(cfg.dut_white_r_deg) / np.sqrt(3)
    sp_ = cfg.dut_white_p / np.sqrt(3)
    dr_rate = np.deg2rad(cfg.dut_drift_r_deg_per_min) / 60.0 / np.sqrt(3)
    dp_rate = cfg.dut_drift_p_per_min / 60.0 / np.sqrt(3)
    # drift rates: random initial value plus a random walk reaching a
    # comparable spread after one minute
    steps_per_min = 60.0 * rate
    br = rng.normal(0, dr_rate, 3) + np.cumsum(rng.normal(0, dr_rate / np.sqrt(steps_per_min), (n, 3)), axis=0)
    bp = rng.normal(0, dp_rate, 3) + np.cumsum(rng.normal(0, dp_rate / np.sqrt(steps_per_min), (n, 3)), axis=0)
    er = br * dt + rng.normal(0, sr, (n, 3))
    ep = bp * dt + rng.normal(0, sp_, (n, 3))
    Rt, pt = true_H.R, true_H.p
    rel_R = np.swapaxes(Rt[:-1], -1, -2) @ Rt[1:]
    rel_p = np.einsum("nba,nb->na", Rt[:-1], pt[1:] - pt[:-1])
    rel_R = rel_R @ geo.so3_exp(er[1:])
    rel_p = rel_p + ep[1:]
    R = np.empty_like(Rt)
    p = np.empty_like(pt)
    R[0], p[0] = Rt[0], pt[0]
    for i in range(1, n):
        p[i] = p[i - 1] + R[i - 1] @ rel_p[i - 1]
        R[i] = R[i - 1] @ rel_R[i - 1]
    # keep rotations numerically orthonormal after long products
    R = geo.project_rotation(R)
    return Trajectory(tau, R, p, check=False), true_P


def simulate(cfg=None, seed=0, noise=None):
    truth = make_truth(cfg, seed, noise)
    mocap, mocap_clean = sample_mocap(truth)
    imu, bw, ba = sample_imu(truth)
    dut, dut_truth = sample_dut(truth)
    return SimSamples(truth, mocap, imu, dut, mocap_clean, dut_truth, bw, ba)


def truth_body_trajectory(truth, rate=None):
    rate = rate or truth.config.truth_rate
    lo, hi = truth.span
    t = np.arange(int(np.ceil(lo * rate)), int(np.floor(hi * rate)) + 1) / rate
    k = truth.body(t)
    return Trajectory(t, k.R, k.p, check=False)


def _pose_kv(prefix, T):
    q = geo.rot_to_quat(T.R)
    return [f"{prefix}.p = {' '.join(f'{v:.17g}' for v in T.p)}",
            f"{prefix}.q_wxyz = {' '.join(f'{v:.17g}' for v in q)}"]


def format_truth_calib(truth):
    cal = truth.calib
    lines = ["# true calibration (IMU clock is the global clock)"]
    for name in ("T_B_M", "T_B_I", "T_B_D", "T_W_P"):
        lines += _pose_kv(name, getattr(cal, name))
    lines += _pose_kv("T_H_W", truth.T_H_W)
    T_M_D = cal.T_B_M.inverse() @ cal.T_B_D
    lines += _pose_kv("T_M_D", T_M_D)
    lines.append(f"R_w_a.q_wxyz = {' '.join(f'{v:.17g}' for v in geo.rot_to_quat(cal.R_w_a))}")
    lines.append(f"M_w.upper = {' '.join(f'{v:.17g}' for v in matrix_to_upper(cal.M_w))}")
    lines.append(f"M_a.upper = {' '.join(f'{v:.17g}' for v in matrix_to_upper(cal.M_a))}")
    lines.append(f"g = {cal.g:.17g}")
    for name, c in truth.clocks.items():
        lines.append(f"clock.{name}.c0 = {c.c0:.17g}")
        lines.append(f"clock.{name}.c1 = {c.c1:.17g}")
        lines.append(f"clock.{name}.tau0 = {c.tau0:.17g}")
    lines.append(f"bias_w0 = {' '.join(f'{v:.17g}' for v in truth.bias_w0)}")
    lines.append(f"bias_a0 = {' '.join(f'{v:.17g}' for v in truth.bias_a0)}")
    lines.append(f"seed = {truth.seed}")
    return "\n".join(lines) + "\n"


def parse_truth_calib(path):
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            k, v = (s.strip() for s in line.split("=", 1))
            vals = [float(x) for x in v.split()]
            out[k] = np.array(vals) if len(vals) > 1 else vals[0]
    return out


def truth_pose(calib_kv, name):
    return Pose(geo.quat_to_rot(calib_kv[f"{name}.q_wxyz"]), calib_kv[f"{name}.p"])


STREAM_FILES = {"mocap": "mocap.txt", "imu": "imu.csv", "dut": "dut.txt"}
TRUTH_FILES = {"dut": "truth_dut.txt", "mocap": "truth_mocap.txt", "body": "truth_body.txt",
               "calib": "truth_calib.txt"}


def export_set(samples, out_dir):
    """Write the three streams and the truth sidecar files; returns paths."""
    paths = {k: os.path.join(out_dir, v) for k, v in STREAM_FILES.items()}
    write_trajectory(paths["mocap"], samples.mocap)
    write_imu_file(paths["imu"], samples.imu)
    write_trajectory(paths["dut"], samples.dut)
    tp = {k: os.path.join(out_dir, v) for k, v in TRUTH_FILES.items()}
    write_trajectory(tp["dut"], samples.dut_truth, header=["true T_P_D at DUT stamps"])
    write_trajectory(tp["mocap"], samples.mocap_clean, header=["noise-free T_P_M at MoCap stamps"])
    write_trajectory(tp["body"], truth_body_trajectory(samples.truth),
                     header=["true T_W_B on the global clock"])
    write_text(tp["calib"], format_truth_calib(samples.truth))
    paths.update({f"truth_{k}": v for k, v in tp.items()})
    return paths
