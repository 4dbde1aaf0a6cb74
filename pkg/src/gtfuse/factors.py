"""Residuals and analytic Jacobians for every measurement type.

Batch evaluators take stacked measurements and return a :class:`Block`:
whitened residuals ``r`` of shape (n, m), the Jacobian with respect to the
trajectory window of each sample (n, m, 6k) in ``[rot_j, pos_j]`` control
point order, and a list of tail pieces ``(name, jac (n, m, d), start)``
naming the parameter block, the local Jacobian and the first local index
inside that block for every sample. Rotation parameters are right
perturbations; every 6-vector residual lists rotation before translation.
"""
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .errors import DegenerateScrew
from .spline import cumulative_basis, point_basis, so3_local

W_MIN = 1e-3
PAIR_ROT_THRESH = np.deg2rad(5.0)
PAIR_TRANS_THRESH = 0.1
PAIR_TIME_THRESH = 0.5


@dataclass
class Block:
    kind: str
    r: np.ndarray
    seg: np.ndarray = None       # first trajectory control point per sample
    Jt: np.ndarray = None        # (n, m, 6k) or None if trajectory held out
    tail: list = field(default_factory=list)


def _T(a):
    return np.swapaxes(a, -1, -2)


def _mv(A, x):
    return np.einsum("...ab,...b->...a", A, x)


# -------------------------------------------------------- motion evaluation

@dataclass
class Motion:
    seg: np.ndarray
    R: np.ndarray
    p: np.ndarray
    omega: np.ndarray
    domega: np.ndarray
    v: np.ndarray
    a: np.ndarray
    ddomega: np.ndarray = None
    jerk: np.ndarray = None
    JR: np.ndarray = None
    Jw: np.ndarray = None
    Jdw: np.ndarray = None
    lam0: np.ndarray = None
    lam2: np.ndarray = None


def _clip_locate(grid, t, order):
    lo, hi = grid.domain(order)
    return grid.locate(np.clip(t, lo, hi), order)


def eval_motion(sp, t, jacobian=False, third=False):
    """Body rotation/position spline quantities at global times ``t``.

    Times are clipped into the spline domain; callers filter out-of-domain
    samples beforehand.
    """
    rot, pos = sp.rot, sp.pos
    k = rot.order
    i, u = _clip_locate(rot.grid, t, k)
    idx = i[:, None] + np.arange(k)[None, :]
    loc = so3_local(rot.cps[idx], u, rot.grid.dt, k, jacobian=jacobian, third=third)
    dt = pos.grid.dt
    c = pos.cps[idx]
    lam0 = point_basis(u, k, dt, 0)
    lam1 = point_basis(u, k, dt, 1)
    lam2 = point_basis(u, k, dt, 2)
    m = Motion(seg=i, R=loc.R, omega=loc.omega, domega=loc.domega,
               p=np.einsum("nk,nkd->nd", lam0, c),
               v=np.einsum("nk,nkd->nd", lam1, c),
               a=np.einsum("nk,nkd->nd", lam2, c),
               ddomega=loc.ddomega)
    if third:
        m.jerk = np.einsum("nk,nkd->nd", point_basis(u, k, dt, 3), c)
    if jacobian:
        m.JR, m.Jw, m.Jdw = loc.JR, loc.Jomega, loc.Jdomega
        m.lam0, m.lam2 = lam0, lam2
    return m


def _traj_jac(Jrot, Jpos):
    """Interleave per-control-point rotation and position Jacobians.

    ``Jrot``/``Jpos`` have shape (n, m, k, 3) -> result (n, m, 6k).
    """
    n, m, k, _ = Jrot.shape
    out = np.empty((n, m, k, 6))
    out[..., :3] = Jrot
    out[..., 3:] = Jpos
    return out.reshape(n, m, 6 * k)


def _linear_weights(spl, tau):
    """Segment start and (1-u, u) weights of a linear spline, clipped to domain."""
    i, u = _clip_locate(spl.grid, tau, 2)
    return i, np.stack([1.0 - u, u], axis=-1)


# ------------------------------------------------------------------- MoCap

def mocap_block(state, tau, R_meas, p_meas, noise, jacobian=True):
    sp, cal = state.splines, state.calib
    tau = np.asarray(tau, dtype=float)
    oi, ow = _linear_weights(sp.off_M.inner, tau)
    t = tau + np.einsum("nk,nk->n", ow, sp.off_M.cps[oi[:, None] + np.arange(2)])
    mo = eval_motion(sp, t, jacobian=jacobian)
    R_PW = cal.T_W_P.R.T
    R_BM, p_BM = cal.T_B_M.R, cal.T_B_M.p
    RR = mo.R @ R_BM
    R_pred = R_PW @ RR
    x = _mv(mo.R, p_BM) + mo.p - cal.T_W_P.p
    p_pred = x @ R_PW.T
    rR = geo.so3_log(_T(R_meas) @ R_pred)
    rp = p_pred - p_meas
    sr, spp = noise.mocap_sigma_r, noise.mocap_sigma_p
    r = np.concatenate([rR / sr, rp / spp], axis=1)
    blk = Block("mocap", r, seg=mo.seg)
    if not jacobian:
        return blk
    n = len(tau)
    Jl = geo.right_jacobian_inv(rR)
    k = mo.JR.shape[1]
    # trajectory
    A = (Jl @ R_BM.T)[:, None] @ mo.JR  # (n, k, 3, 3)
    Bp = (-(R_PW @ mo.R) @ geo.hat(p_BM))[:, None] @ mo.JR
    Jrot = np.zeros((n, 6, k, 3))
    Jpos = np.zeros((n, 6, k, 3))
    Jrot[:, :3] = np.transpose(A, (0, 2, 1, 3)) / sr
    Jrot[:, 3:] = np.transpose(Bp, (0, 2, 1, 3)) / spp
    Jpos[:, 3:] = (R_PW[None, :, None, :] * mo.lam0[:, None, :, None]) / spp
    blk.Jt = _traj_jac(Jrot, Jpos)
    # calibration
    J = np.zeros((n, 6, 3))
    J[:, :3] = Jl / sr
    blk.tail.append(("R_BM", J, np.zeros(n, int)))
    J = np.zeros((n, 6, 3))
    J[:, 3:] = (R_PW @ mo.R) / spp
    blk.tail.append(("p_BM", J, np.zeros(n, int)))
    J = np.zeros((n, 6, 3))
    J[:, :3] = -(Jl @ _T(RR)) / sr
    J[:, 3:] = (R_PW @ geo.hat(x)) / spp
    blk.tail.append(("tilt", J[..., :2], np.zeros(n, int)))
    # time offset
    dR = _mv(Jl @ R_BM.T, mo.omega) / sr
    dp = (_mv(mo.R, np.cross(mo.omega, p_BM)) + mo.v) @ R_PW.T / spp
    dt = np.concatenate([dR, dp], axis=1)
    blk.tail.append(("off_M", dt[:, :, None] * ow[:, None, :], oi))
    return blk


# --------------------------------------------------------------------- IMU

def imu_block(state, tau, gyro, accel, noise, jacobian=True, offset_jacobian=False):
    """Gyroscope (rows 0-2) and accelerometer (rows 3-5) residuals."""
    sp, cal = state.splines, state.calib
    tau = np.asarray(tau, dtype=float)
    oi, ow = _linear_weights(sp.off_I.inner, tau)
    t = tau + np.einsum("nk,nk->n", ow, sp.off_I.cps[oi[:, None] + np.arange(2)])
    mo = eval_motion(sp, t, jacobian=jacobian, third=offset_jacobian)
    R_BI, p_BI = cal.T_B_I.R, cal.T_B_I.p
    bi, bw = _linear_weights(sp.bias_w, t)
    bias_w = np.einsum("nk,nkd->nd", bw, sp.bias_w.cps[bi[:, None] + np.arange(2)])
    ai, aw = _linear_weights(sp.bias_a, t)
    bias_a = np.einsum("nk,nkd->nd", aw, sp.bias_a.cps[ai[:, None] + np.arange(2)])

    Mw, Ma, Rwa = cal.M_w, cal.M_a, cal.R_w_a
    w_I = mo.omega @ R_BI  # R_BI^T omega
    x = w_I @ Rwa.T
    rg = x @ Mw.T + bias_w - gyro
    f = _mv(_T(mo.R), mo.a - cal.g_W)  # R^T (p'' - g)
    hw = geo.hat(mo.omega)
    s = f + _mv(geo.hat(mo.domega) + hw @ hw, np.broadcast_to(p_BI, mo.omega.shape))
    a_I = s @ R_BI
    ra = a_I @ Ma.T + bias_a - accel
    sg, sa = noise.gyr_nd, noise.acc_nd
    r = np.concatenate([rg / sg, ra / sa], axis=1)
    blk = Block("imu", r, seg=mo.seg)
    if not jacobian:
        return blk
    n = len(tau)
    k = mo.JR.shape[1]
    G = Mw @ Rwa @ R_BI.T
    Jrot = np.zeros((n, 6, k, 3))
    Jpos = np.zeros((n, 6, k, 3))
    Jrot[:, :3] = np.transpose(G[None, None] @ mo.Jw, (0, 2, 1, 3)) / sg
    P = np.broadcast_to(p_BI, mo.omega.shape)
    wp = mo.omega[:, :, None] * P[:, None, :]
    cen = wp + np.einsum("ni,ni->n", mo.omega, P)[:, None, None] * np.eye(3) \
        - 2.0 * P[:, :, None] * mo.omega[:, None, :]
    Aacc = Ma @ R_BI.T
    T1 = geo.hat(f)[:, None] @ mo.JR - geo.hat(p_BI)[None, None] @ mo.Jdw + cen[:, None] @ mo.Jw
    Jrot[:, 3:] = np.transpose(Aacc[None, None] @ T1, (0, 2, 1, 3)) / sa
    RtA = Aacc[None] @ _T(mo.R)  # (n, 3, 3)
    Jpos[:, 3:] = (RtA[:, :, None, :] * mo.lam2[:, None, :, None]) / sa
    blk.Jt = _traj_jac(Jrot, Jpos)

    eye = np.eye(3)
    J = np.zeros((n, 6, 6))
    J[:, :3, :3] = bw[:, 0, None, None] * eye / sg
    J[:, :3, 3:] = bw[:, 1, None, None] * eye / sg
    blk.tail.append(("bias_w", J, 3 * bi))
    J = np.zeros((n, 6, 6))
    J[:, 3:, :3] = aw[:, 0, None, None] * eye / sa
    J[:, 3:, 3:] = aw[:, 1, None, None] * eye / sa
    blk.tail.append(("bias_a", J, 3 * ai))
    J = np.zeros((n, 6, 1))
    J[:, 3:, 0] = RtA[:, :, 2] / sa  # d(-g_W)/dg = e_z
    blk.tail.append(("g", J, np.zeros(n, int)))
    J = np.zeros((n, 6, 3))
    J[:, :3] = -(Mw @ Rwa)[None] @ geo.hat(w_I) / sg
    blk.tail.append(("R_w_a", J, np.zeros(n, int)))
    from .state import UPPER_TRI
    Jm = np.zeros((n, 6, 6))
    Ja = np.zeros((n, 6, 6))
    for c, (a, b) in enumerate(UPPER_TRI):
        Jm[:, a, c] = x[:, b] / sg
        Ja[:, 3 + a, c] = a_I[:, b] / sa
    blk.tail.append(("M_w", Jm, np.zeros(n, int)))
    blk.tail.append(("M_a", Ja, np.zeros(n, int)))
    # IMU extrinsic (gauge-fixed in the solver, kept for completeness)
    J = np.zeros((n, 6, 3))
    J[:, :3] = (Mw @ Rwa)[None] @ geo.hat(w_I) / sg
    J[:, 3:] = Ma[None] @ geo.hat(a_I) / sa
    blk.tail.append(("R_BI", J, np.zeros(n, int)))
    J = np.zeros((n, 6, 3))
    J[:, 3:] = Aacc[None] @ (geo.hat(mo.domega) + hw @ hw) / sa
    blk.tail.append(("p_BI", J, np.zeros(n, int)))
    if offset_jacobian:
        db_w = (sp.bias_w.cps[bi + 1] - sp.bias_w.cps[bi]) / sp.bias_w.grid.dt
        db_a = (sp.bias_a.cps[ai + 1] - sp.bias_a.cps[ai]) / sp.bias_a.grid.dt
        dg = _mv(G, mo.domega) + db_w
        hdw = geo.hat(mo.domega)
        ds = (-np.cross(mo.omega, f) + _mv(_T(mo.R), mo.jerk)
              + _mv(geo.hat(mo.ddomega) + hdw @ hw + hw @ hdw, P))
        da = ds @ Aacc.T + db_a
        dt = np.concatenate([dg / sg, da / sa], axis=1)
        blk.tail.append(("off_I", dt[:, :, None] * ow[:, None, :], oi))
    return blk


def bias_rw_block(spline, rw_per_step, imu_rate_hz, name):
    """Random-walk prior between consecutive bias control points."""
    c = spline.cps
    dtau = spline.grid.dt
    sigma = rw_per_step * np.sqrt(imu_rate_hz) * np.sqrt(dtau)
    r = (c[1:] - c[:-1]) / sigma
    n = len(r)
    J = np.zeros((n, 3, 6))
    J[:, :, :3] = -np.eye(3) / sigma
    J[:, :, 3:] = np.eye(3) / sigma
    return Block(f"{name}_rw", r, tail=[(name, J, 3 * np.arange(n))])


# --------------------------------------------------------------------- DUT

@dataclass
class DutPairs:
    i: np.ndarray
    j: np.ndarray
    tau_i: np.ndarray
    tau_j: np.ndarray
    R_rel: np.ndarray  # measured relative rotation D_i -> D_j
    p_rel: np.ndarray
    w_R: np.ndarray = None
    w_p: np.ndarray = None

    def __len__(self):
        return len(self.i)


def select_dut_pairs(traj, rot_thresh=PAIR_ROT_THRESH, trans_thresh=PAIR_TRANS_THRESH,
                     time_thresh=PAIR_TIME_THRESH):
    """Greedy non-overlapping pairs of DUT samples with sufficient excitation.

    From anchor i the partner j is the first later sample whose relative
    motion reaches the rotation threshold, whose along-axis translation (or
    plain translation when the rotation is below the screw floor) reaches
    the translation threshold, or whose time gap reaches the time
    threshold. The partner becomes the next anchor.
    """
    t, R, p = traj.t, traj.R, traj.p
    n = len(t)
    I, J = [], []
    a = 0
    tol = 1e-9
    while a < n - 1:
        Ra_t = R[a].T
        rel_R = Ra_t @ R[a + 1:]
        rel_p = (p[a + 1:] - p[a]) @ Ra_t.T
        w = geo.vee(rel_R)
        sn = np.linalg.norm(w, axis=-1)
        cs = np.clip(0.5 * (np.trace(rel_R, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
        theta = np.arctan2(sn, cs)
        with np.errstate(invalid="ignore", divide="ignore"):
            d = np.where(theta >= geo.SCREW_ANGLE_FLOOR,
                         np.abs(np.einsum("ni,ni->n", w, rel_p)) / np.where(sn > 0, sn, 1.0),
                         np.linalg.norm(rel_p, axis=-1))
        hit = ((theta >= rot_thresh - tol) | (d >= trans_thresh - tol)
               | (t[a + 1:] - t[a] >= time_thresh - tol))
        idx = np.flatnonzero(hit)
        if idx.size == 0:
            break
        b = a + 1 + int(idx[0])
        I.append(a)
        J.append(b)
        a = b
    I = np.array(I, dtype=int)
    J = np.array(J, dtype=int)
    R_rel = _T(R[I]) @ R[J]
    p_rel = _mv(_T(R[I]), p[J] - p[I])
    return DutPairs(I, J, t[I], t[J], R_rel, p_rel)


def dut_weights(rel_dut, rel_ref, w_min=W_MIN):
    """Screw-congruence weights ``(w_R, w_p)`` in ``[w_min, 1]``.

    Raises :class:`DegenerateScrew` when either relative pose is below the
    angle floor; :func:`dut_weights_batch` maps that to ``(w_min, w_min)``.
    """
    sd = geo.screw_invariants(rel_dut)
    sb = geo.screw_invariants(rel_ref)
    w_R = np.exp(-((sd.theta - sb.theta) / sb.theta) ** 2)
    if sb.d != 0.0:
        w_p = np.exp(-((sd.d - sb.d) / sb.d) ** 2)
    else:
        w_p = 1.0 if sd.d == 0.0 else 0.0
    return float(np.clip(w_R, w_min, 1.0)), float(np.clip(w_p, w_min, 1.0))


def dut_weights_batch(R_dut, p_dut, R_ref, p_ref, w_min=W_MIN):
    wR = np.full(len(R_dut), w_min)
    wp = np.full(len(R_dut), w_min)
    for n in range(len(R_dut)):
        try:
            wR[n], wp[n] = dut_weights(geo.Pose(R_dut[n], p_dut[n]),
                                       geo.Pose(R_ref[n], p_ref[n]), w_min)
        except DegenerateScrew:
            pass
    return wR, wp


def body_relative(state, pairs):
    """Spline-predicted DUT relative poses for ``pairs`` (no Jacobians)."""
    return _dut_predict(state, pairs, jacobian=False)[:2]


def _dut_predict(state, pairs, jacobian):
    sp, cal = state.splines, state.calib
    oi_i, ow_i = _linear_weights(sp.off_D.inner, pairs.tau_i)
    oi_j, ow_j = _linear_weights(sp.off_D.inner, pairs.tau_j)
    off = sp.off_D.cps
    t_i = pairs.tau_i + np.einsum("nk,nk->n", ow_i, off[oi_i[:, None] + np.arange(2)])
    t_j = pairs.tau_j + np.einsum("nk,nk->n", ow_j, off[oi_j[:, None] + np.arange(2)])
    mi = eval_motion(sp, t_i)
    mj = eval_motion(sp, t_j)
    R_BD, p_BD = cal.T_B_D.R, cal.T_B_D.p
    Rrel = _T(mi.R) @ mj.R
    prel = _mv(_T(mi.R), mj.p - mi.p)
    R_pred = R_BD.T @ Rrel @ R_BD
    y = _mv(Rrel, np.broadcast_to(p_BD, prel.shape)) + prel - p_BD
    p_pred = y @ R_BD
    return R_pred, p_pred, (mi, mj, Rrel, prel, oi_i, ow_i, oi_j, ow_j)


def dut_block(state, pairs, noise, jacobian=True):
    """Relative-pose residual of DUT pairs; the trajectory is held out."""
    R_pred, p_pred, aux = _dut_predict(state, pairs, jacobian)
    mi, mj, Rrel, prel, oi_i, ow_i, oi_j, ow_j = aux
    rR = geo.so3_log(_T(pairs.R_rel) @ R_pred)
    rp = p_pred - pairs.p_rel
    n = len(pairs)
    wR = np.ones(n) if pairs.w_R is None else pairs.w_R
    wp = np.ones(n) if pairs.w_p is None else pairs.w_p
    sR = wR / noise.dut_sigma_r
    sP = wp / noise.dut_sigma_p
    r = np.concatenate([rR * sR[:, None], rp * sP[:, None]], axis=1)
    blk = Block("dut", r)
    if not jacobian:
        return blk
    cal = state.calib
    R_BD, p_BD = cal.T_B_D.R, cal.T_B_D.p
    Jl = geo.right_jacobian_inv(rR)
    J = np.zeros((n, 6, 3))
    J[:, :3] = Jl @ (np.eye(3) - _T(R_pred)) * sR[:, None, None]
    J[:, 3:] = geo.hat(p_pred) * sP[:, None, None]
    blk.tail.append(("R_BD", J, np.zeros(n, int)))
    J = np.zeros((n, 6, 3))
    J[:, 3:] = (R_BD.T @ (Rrel - np.eye(3))) * sP[:, None, None]
    blk.tail.append(("p_BD", J, np.zeros(n, int)))

    def dres(phi, dprel):
        jr = _mv(Jl, phi @ R_BD) * sR[:, None]  # Jl R_BD^T phi
        hp = np.cross(np.broadcast_to(p_BD, phi.shape), phi)  # hat(p_BD) phi
        jp = (-_mv(Rrel, hp) + dprel) @ R_BD * sP[:, None]
        return np.concatenate([jr, jp], axis=1)

    Rit = _T(mi.R)
    d_i = dres(-_mv(_T(Rrel), mi.omega), np.cross(prel, mi.omega) - _mv(Rit, mi.v))
    d_j = dres(mj.omega, _mv(Rit, mj.v))
    blk.tail.append(("off_D", d_i[:, :, None] * ow_i[:, None, :], oi_i))
    blk.tail.append(("off_D", d_j[:, :, None] * ow_j[:, None, :], oi_j))
    return blk


# ------------------------------------------------- single-sample interfaces

def mocap_residual(sample, state, noise):
    """Whitened 6-vector residual of one MoCap sample ``(tau, Pose)``."""
    tau, pose = sample
    return mocap_block(state, [tau], pose.R[None], pose.p[None], noise, jacobian=False).r[0]


def gyro_residual(sample, state, noise):
    b = imu_block(state, [sample.tau], np.asarray(sample.omega)[None],
                  np.asarray(sample.accel)[None], noise, jacobian=False)
    return b.r[0, :3]


def accel_residual(sample, state, noise):
    b = imu_block(state, [sample.tau], np.asarray(sample.omega)[None],
                  np.asarray(sample.accel)[None], noise, jacobian=False)
    return b.r[0, 3:]


def bias_rw_residual(spline, rw_per_step, imu_rate_hz):
    return bias_rw_block(spline, rw_per_step, imu_rate_hz, "bias").r


def dut_relative_residual(pair, state, noise, weights=(1.0, 1.0)):
    """``pair`` is ``((tau_i, Pose_i), (tau_j, Pose_j))`` of measured DUT poses."""
    (ti, Pi), (tj, Pj) = pair
    pairs = DutPairs(np.array([0]), np.array([1]), np.array([ti]), np.array([tj]),
                     (Pi.R.T @ Pj.R)[None], (Pi.R.T @ (Pj.p - Pi.p))[None],
                     np.array([weights[0]]), np.array([weights[1]]))
    return dut_block(state, pairs, noise, jacobian=False).r[0]
