"""Batch maximum-likelihood estimation over splines and calibration.

The normal equations are split into the banded trajectory block ``A``, the
dense tail block ``C`` (biases, offsets, extrinsics, intrinsics, gravity)
and their coupling ``B``. Each Levenberg-Marquardt step eliminates the
trajectory with a banded Cholesky factorization and solves the small Schur
complement densely.

Gauge: the IMU defines the body frame and the global clock (``T_B_I`` and
``off_I`` fixed), gravity is locked to -z with a free magnitude, and only
the two tilt angles of ``T_W_P`` are estimated.
"""
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import factors as fac
from .banded import BandedSym, solve_cholesky
from .data import Trajectory
from .errors import DomainMismatch, EmptyProblem, NumericalFailure
from .geometry import Pose, so3_log
from .spline import eval_euclid, eval_so3, map_time, unmap_time
from .state import Layout, State, retract

log = logging.getLogger(__name__)

STAGE1 = ("bias_w", "bias_a", "off_M", "off_D", "R_BM", "p_BM", "R_BD", "p_BD", "tilt", "g")
INTRINSICS = ("R_w_a", "M_w", "M_a")


@dataclass
class SolveOptions:
    max_iterations: int = 100
    rel_tol: float = 1e-8
    grad_tol: float = 1e-10
    lambda_init: float = 1e-4
    lambda_up: float = 3.0
    lambda_down: float = 0.3
    two_stage: bool = True
    offset_mode: str = "variable"  # or "fixed": one constant per sensor
    estimate_intrinsics: bool = True
    w_min: float = fac.W_MIN
    pair_rot: float = fac.PAIR_ROT_THRESH
    pair_trans: float = fac.PAIR_TRANS_THRESH
    pair_time: float = fac.PAIR_TIME_THRESH
    domain_margin: float = 0.1
    fd_check: bool = False
    reweight_rounds: int = 3  # final solves with weights taken from the estimate
    reweight_tol: float = 1e-6


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = float("nan")
    final_cost: float = float("nan")
    reason: str = ""
    factor_rms: dict = field(default_factory=dict)
    factor_counts: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    seconds: float = 0.0


@dataclass
class Problem:
    state: State
    noise: object
    mocap: tuple  # (tau, R, p)
    imu: tuple  # (tau, gyro, accel)
    pairs: fac.DutPairs
    imu_rate_hz: float
    options: SolveOptions
    warnings: list = field(default_factory=list)
    fixed: tuple = ("R_BI", "p_BI", "off_I")
    dut_reference: tuple = None  # frozen (rot, pos) splines seen by the DUT factor

    def counts(self):
        return {"mocap": len(self.mocap[0]), "gyro": len(self.imu[0]),
                "accel": len(self.imu[0]), "dut": len(self.pairs),
                "bias_rw": 2 * (self.state.splines.bias_w.grid.count - 1)}


def _mapped_in_domain(off, tau, lo, hi, margin):
    olo, ohi = off.grid.domain(2)
    ok = (tau >= olo) & (tau <= ohi)
    t = map_time(off, np.clip(tau, olo, ohi))
    return ok & (t >= lo + margin) & (t <= hi - margin)


def build_problem(ms, seed, options=None):
    """Collect all in-domain measurements into a :class:`Problem`."""
    options = options or SolveOptions()
    sp = seed.splines
    if len(ms.mocap) == 0 and len(ms.imu) == 0 and len(ms.dut) == 0:
        raise EmptyProblem("measurement set is empty")
    lo, hi = sp.rot.grid.domain(sp.rot.order)
    if sp.pos.grid != sp.rot.grid:
        raise DomainMismatch("rotation and position splines must share a knot grid")
    warnings = []
    m = options.domain_margin

    keep = _mapped_in_domain(sp.off_M, ms.mocap.t, lo, hi, m)
    if (~keep).sum():
        warnings.append(f"dropped {(~keep).sum()} MoCap samples outside the spline domain")
    mocap = (ms.mocap.t[keep], ms.mocap.R[keep], ms.mocap.p[keep])

    keep = _mapped_in_domain(sp.off_I, ms.imu.t, lo, hi, 0.0)
    blo, bhi = sp.bias_w.grid.domain(2)
    keep &= (ms.imu.t >= blo) & (ms.imu.t <= bhi)
    if (~keep).sum():
        warnings.append(f"dropped {(~keep).sum()} IMU samples outside the spline domain")
    imu = (ms.imu.t[keep], ms.imu.gyro[keep], ms.imu.accel[keep])

    keep = _mapped_in_domain(sp.off_D, ms.dut.t, lo, hi, m)
    if (~keep).sum():
        warnings.append(f"dropped {(~keep).sum()} DUT samples outside the spline domain")
    pairs = fac.select_dut_pairs(ms.dut.subset(keep), options.pair_rot, options.pair_trans,
                                 options.pair_time)

    if len(mocap[0]) + len(imu[0]) + len(pairs) == 0:
        raise EmptyProblem("no measurement falls inside the spline domain")
    rate = 1.0 / float(np.median(np.diff(ms.imu.t))) if len(ms.imu) > 1 else 1.0
    return Problem(seed, ms.noise, mocap, imu, pairs, rate, options, warnings)


# ------------------------------------------------------------ evaluation

def _dut_state(problem, state):
    """State whose motion splines are the frozen DUT reference, if any."""
    ref = problem.dut_reference
    if ref is None:
        return state
    return State(state.splines.replace(rot=ref[0], pos=ref[1]), state.calib)


def evaluate(problem, state, jacobian=True):
    blocks = []
    if len(problem.mocap[0]):
        blocks.append(fac.mocap_block(state, *problem.mocap, problem.noise, jacobian))
    if len(problem.imu[0]):
        blocks.append(fac.imu_block(state, *problem.imu, problem.noise, jacobian))
        n = problem.noise
        blocks.append(fac.bias_rw_block(state.splines.bias_w, n.gyr_rw, problem.imu_rate_hz, "bias_w"))
        blocks.append(fac.bias_rw_block(state.splines.bias_a, n.acc_rw, problem.imu_rate_hz, "bias_a"))
    if len(problem.pairs):
        blocks.append(fac.dut_block(_dut_state(problem, state), problem.pairs, problem.noise,
                                    jacobian))
    for b in blocks:
        if not np.all(np.isfinite(b.r)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(b.r), axis=1))[0])
            raise NumericalFailure("non-finite residual", block=f"{b.kind}[{bad}]")
    return blocks


def total_cost(blocks):
    return 0.5 * float(sum(np.sum(b.r ** 2) for b in blocks))


def factor_rms(blocks):
    out = {}
    for b in blocks:
        if b.kind == "imu":
            out["gyro"] = float(np.sqrt(np.mean(b.r[:, :3] ** 2)))
            out["accel"] = float(np.sqrt(np.mean(b.r[:, 3:] ** 2)))
        else:
            out[b.kind] = float(np.sqrt(np.mean(b.r ** 2))) if b.r.size else 0.0
    return out


def _tail_matrix(layout, blk):
    """Active tail Jacobian (n, m, K_local) and global columns (n, K_local)."""
    mats, cols = [], []
    for name, J, start in blk.tail:
        if name not in layout:
            continue
        if name in layout.tied:
            J = J.sum(axis=-1, keepdims=True)
            c = layout.tail_cols(name, np.zeros_like(start), 1)
        else:
            c = layout.tail_cols(name, start, J.shape[-1])
        mats.append(J)
        cols.append(c)
    if not mats:
        n, m = blk.r.shape
        return np.zeros((n, m, 0)), np.zeros((n, 0), dtype=np.int64)
    return np.concatenate(mats, axis=-1), np.concatenate(cols, axis=-1)


@dataclass
class Normal:
    A: BandedSym
    B: np.ndarray
    C: np.ndarray
    gt: np.ndarray
    gc: np.ndarray


def assemble(layout, blocks):
    """Gauss-Newton normal equations for the active parameters."""
    nt, nc = layout.n_traj, layout.n_tail
    A = BandedSym(max(nt, 1), 23)
    Bm = np.zeros((nt, nc))
    C = np.zeros((nc, nc))
    gt = np.zeros(nt)
    gc = np.zeros(nc)
    for blk in blocks:
        Jc, cols = _tail_matrix(layout, blk)
        n, m = blk.r.shape
        if n == 0:
            continue
        if blk.Jt is None or nt == 0:
            # small dense contribution (DUT pairs, bias priors)
            Jd = np.zeros((n * m, nc))
            rr = np.arange(n * m).reshape(n, m)
            np.add.at(Jd, (rr[:, :, None], np.broadcast_to(cols[:, None, :], Jc.shape)), Jc)
            C += Jd.T @ Jd
            gc += Jd.T @ blk.r.reshape(-1)
            continue
        key = np.concatenate([blk.seg[:, None], cols], axis=1)
        _, inv = np.unique(key, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        order = np.argsort(inv, kind="stable")
        starts = np.flatnonzero(np.r_[True, np.diff(inv[order]) != 0])
        ends = np.r_[starts[1:], len(order)]
        w = blk.Jt.shape[-1]
        Hs = np.empty((len(starts), w, w))
        segs = np.empty(len(starts), dtype=np.int64)
        for g, (s, e) in enumerate(zip(starts, ends)):
            idx = order[s:e]
            J = np.concatenate([blk.Jt[idx], Jc[idx]], axis=-1).reshape(-1, w + Jc.shape[-1])
            r = blk.r[idx].reshape(-1)
            H = J.T @ J
            gv = J.T @ r
            o = 6 * blk.seg[idx[0]]
            cg = cols[idx[0]]
            Hs[g] = H[:w, :w]
            segs[g] = o
            Bm[o:o + w, cg] += H[:w, w:]
            C[np.ix_(cg, cg)] += H[w:, w:]
            gt[o:o + w] += gv[:w]
            gc[cg] += gv[w:]
        A.add_blocks(segs, Hs)
    return Normal(A, Bm, C, gt, gc)


def solve_step(layout, ne, lam):
    nt, nc = layout.n_traj, layout.n_tail
    dxc = np.zeros(nc)
    dxt = np.zeros(nt)
    C = ne.C.copy()
    dC = np.diag(C).copy()
    C[np.diag_indices(nc)] += lam * np.maximum(dC, 1e-9 * max(dC.max(initial=0.0), 1.0))
    if nt:
        dA = ne.A.diagonal()
        damp = lam * np.maximum(dA, 1e-9 * max(dA.max(), 1.0))
        cb = ne.A.cholesky(damping=damp)
        if nc:
            X = solve_cholesky(cb, ne.B)
            S = C - ne.B.T @ X
            rhs = -ne.gc + X.T @ ne.gt
            dxc = _dense_solve(S, rhs, "calibration")
            dxt = solve_cholesky(cb, -ne.gt - ne.B @ dxc)
        else:
            dxt = solve_cholesky(cb, -ne.gt)
    elif nc:
        dxc = _dense_solve(C, -ne.gc, "calibration")
    return np.concatenate([dxt, dxc])


def _dense_solve(S, rhs, what):
    S = 0.5 * (S + S.T)
    try:
        return cho_solve(cho_factor(S), rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("Schur complement not positive definite", block=what) from exc


def update_dut_weights(problem, state):
    """Refresh the DUT weights and freeze the trajectory the DUT factor sees.

    The DUT factor carries no trajectory gradient, so each
    Levenberg-Marquardt step is judged against this snapshot; that keeps the
    minimized cost consistent with the step model. The snapshot then moves
    to every accepted iterate. Returns the largest weight change.
    """
    pairs = problem.pairs
    problem.dut_reference = (state.splines.rot, state.splines.pos)
    if not len(pairs):
        return 0.0
    unset = np.ones(len(pairs))
    old = np.concatenate([unset if pairs.w_R is None else pairs.w_R,
                          unset if pairs.w_p is None else pairs.w_p])
    R_ref, p_ref = fac.body_relative(state, pairs)
    pairs.w_R, pairs.w_p = fac.dut_weights_batch(pairs.R_rel, pairs.p_rel, R_ref, p_ref,
                                                 problem.options.w_min)
    return float(np.abs(np.concatenate([pairs.w_R, pairs.w_p]) - old).max())


def levenberg_marquardt(problem, state, layout, report, label=""):
    o = problem.options
    blocks = evaluate(problem, state)
    cost = total_cost(blocks)
    lam = o.lambda_init
    reason = "max_iterations"
    it = 0
    start_cost = cost
    steps = []  # (before, after) of each accepted step on one snapshot
    # round-off level for whitened residuals, per residual entry
    floor = max(1e-12 * start_cost, 1e-20 * sum(b.r.size for b in blocks))
    while it < o.max_iterations:
        if cost <= floor:
            reason = "zero_cost"
            break
        ne = assemble(layout, blocks)
        grad = np.concatenate([ne.gt, ne.gc])
        if grad.size == 0 or np.abs(grad).max() < o.grad_tol:
            reason = "gradient"
            break
        it += 1
        while True:
            dx = solve_step(layout, ne, lam)
            cand = retract(state, layout, dx)
            try:
                cblocks = evaluate(problem, cand)
                ccost = total_cost(cblocks)
            except NumericalFailure:
                ccost = np.inf
            if ccost < cost:
                break
            lam *= o.lambda_up
            if lam > 1e12:
                reason = "no_decrease"
                break
        if reason == "no_decrease":
            break
        rel = (cost - ccost) / max(cost, 1e-300)
        steps.append((cost, ccost))
        state, blocks, cost = cand, cblocks, ccost
        if problem.dut_reference is not None and len(problem.pairs):
            # the step was judged against the old snapshot; move it along
            problem.dut_reference = (state.splines.rot, state.splines.pos)
            blocks = [fac.dut_block(state, problem.pairs, problem.noise) if b.kind == "dut" else b
                      for b in blocks]
            cost = total_cost(blocks)
        lam = max(lam * o.lambda_down, 1e-12)
        log.info("%s iter %d cost %.6e lambda %.1e", label, it, cost, lam)
        if rel < o.rel_tol:
            reason = "relative_decrease"
            break
        if cost <= floor:
            reason = "zero_cost"
            break
    report.stages.append({"label": label, "iterations": it, "initial_cost": start_cost,
                          "final_cost": cost, "reason": reason, "steps": steps})
    report.iterations += it
    report.reason = reason
    return state, blocks, cost


def make_layout(problem, state, stage_params):
    o = problem.options
    tied = ("off_M", "off_D") if o.offset_mode == "fixed" else ()
    return Layout(state, set(stage_params) - set(problem.fixed), tied=tied)


def _tie_offsets(state):
    sp = state.splines
    kw = {}
    for name in ("off_M", "off_D"):
        off = getattr(sp, name)
        kw[name] = off.with_cps(np.full(off.grid.count, float(np.mean(off.cps))))
    return state.replace(splines=sp.replace(**kw))


def _trajectory_change(ref, splines):
    """Largest control-point change (rad or m) between a snapshot and splines."""
    dR = np.swapaxes(ref[0].cps, -1, -2) @ splines.rot.cps
    ang = np.linalg.norm(so3_log(dR), axis=-1).max()
    return float(max(ang, np.abs(ref[1].cps - splines.pos.cps).max()))


def solve(problem, options=None):
    """Two-stage Levenberg-Marquardt; returns ``(SplineBundle, CalibState, SolveReport)``."""
    t_start = time.perf_counter()
    if options is not None:
        problem.options = options
    o = problem.options
    report = SolveReport(warnings=list(problem.warnings), factor_counts=problem.counts())
    state = problem.state
    if o.offset_mode == "fixed":
        state = _tie_offsets(state)
    stages = [STAGE1]
    if o.estimate_intrinsics:
        stages = [STAGE1, STAGE1 + INTRINSICS] if o.two_stage else [STAGE1 + INTRINSICS]
    initial = None
    for n, params in enumerate(stages):
        update_dut_weights(problem, state)
        layout = make_layout(problem, state, params)
        if o.fd_check:
            check_jacobian(problem, state, layout)
        state, blocks, cost = levenberg_marquardt(problem, state, layout, report, f"stage{n + 1}")
        if initial is None:
            initial = report.stages[0]["initial_cost"]
    for n in range(o.reweight_rounds if len(problem.pairs) else 0):
        moved = _trajectory_change(problem.dut_reference, state.splines)
        if max(update_dut_weights(problem, state), moved) < o.reweight_tol:
            break
        state, blocks, cost = levenberg_marquardt(problem, state, layout, report, f"reweight{n + 1}")
    report.initial_cost = initial
    report.final_cost = cost
    report.factor_rms = factor_rms(blocks)
    for name, M in (("M_w", state.calib.M_w), ("M_a", state.calib.M_a)):
        d = np.diag(M)
        if np.any((d < 0.9) | (d > 1.1)):
            report.warnings.append(f"{name} diagonal {d} outside [0.9, 1.1]")
    report.seconds = time.perf_counter() - t_start
    problem.state = state
    return state.splines, state.calib, report


# ---------------------------------------------------------- Jacobian check

def dense_jacobian(problem, state, layout):
    """Stacked residual vector and dense Jacobian (small problems only)."""
    blocks = evaluate(problem, state)
    rows = sum(b.r.size for b in blocks)
    J = np.zeros((rows, layout.n))
    r = np.zeros(rows)
    row = 0
    for b in blocks:
        n, m = b.r.shape
        rr = row + np.arange(n * m).reshape(n, m)
        r[rr.reshape(-1)] = b.r.reshape(-1)
        if b.Jt is not None and layout.n_traj:
            c = 6 * b.seg[:, None] + np.arange(b.Jt.shape[-1])
            np.add.at(J, (rr[:, :, None], c[:, None, :]), b.Jt)
        Jc, cols = _tail_matrix(layout, b)
        if Jc.shape[-1]:
            np.add.at(J, (rr[:, :, None], layout.n_traj + np.broadcast_to(cols[:, None, :], Jc.shape)), Jc)
        row += n * m
    return r, J, blocks


def numeric_jacobian(problem, state, layout, eps=1e-6):
    r0 = np.concatenate([b.r.reshape(-1) for b in evaluate(problem, state, jacobian=False)])
    J = np.zeros((len(r0), layout.n))
    for c in range(layout.n):
        d = np.zeros(layout.n)
        d[c] = eps
        rp = np.concatenate([b.r.reshape(-1) for b in evaluate(problem, retract(state, layout, d), False)])
        rm = np.concatenate([b.r.reshape(-1) for b in evaluate(problem, retract(state, layout, -d), False)])
        J[:, c] = (rp - rm) / (2 * eps)
    return J


def check_jacobian(problem, state, layout, tol=1e-4):
    """Compare analytic and central-difference Jacobians (expensive)."""
    _, Ja, blocks = dense_jacobian(problem, state, layout)
    Jn = numeric_jacobian(problem, state, layout)
    # DUT rows exclude the trajectory by construction
    row = 0
    for b in blocks:
        if b.Jt is None:
            Jn[row:row + b.r.size, :layout.n_traj] = 0.0
        row += b.r.size
    err = np.abs(Ja - Jn).max() / max(np.abs(Jn).max(), 1e-12)
    if err > tol:
        raise NumericalFailure(f"analytic Jacobian differs from finite differences (rel {err:.2e})",
                               block="jacobian")
    return err


# -------------------------------------------------------------- extraction

def extract_trajectory(state, rate_hz=90.0, frame="dut", tau_range=None):
    """Sample the estimate on the DUT clock grid ``k / rate_hz``.

    ``frame='dut'`` returns DUT poses in the MoCap world ``P``
    (``T_P_W T_W_B(t) T_B_D``); ``frame='global'`` returns body poses
    ``T_W_B(t)``. Times outside the spline domain are trimmed.
    """
    sp, cal = state.splines, state.calib
    lo, hi = sp.rot.grid.domain(sp.rot.order)
    olo, ohi = sp.off_D.grid.domain(2)
    tlo = max(float(unmap_time(sp.off_D, lo)), olo)
    thi = min(float(unmap_time(sp.off_D, hi)), ohi)
    if tau_range is not None:
        tlo, thi = max(tlo, tau_range[0]), min(thi, tau_range[1])
    k = np.arange(int(np.ceil(tlo * rate_hz)), int(np.floor(thi * rate_hz)) + 1)
    tau = k / rate_hz
    tau = tau[(tau >= olo) & (tau <= ohi)]
    t = map_time(sp.off_D, tau)
    ok = (t >= lo) & (t <= hi)
    tau, t = tau[ok], t[ok]
    R = eval_so3(sp.rot, t)
    p = eval_euclid(sp.pos, t)
    traj = Trajectory(tau, R, p, check=False)
    if frame == "global":
        return traj
    if frame != "dut":
        raise ValueError(f"unknown frame {frame!r}")
    return traj.transformed(left=cal.T_W_P.inverse(), right=cal.T_B_D)
