"""End-to-end estimation: sync, initialization, batch solve, extraction."""
import time
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .config import EstimateConfig
from .data import MeasurementSet
from .errors import DegenerateMotion, NumericalFailure
from .initializer import seed_state
from .solver import SolveOptions, build_problem, extract_trajectory, solve
from .state import State

REBASE_THRESHOLD = 86400.0


@dataclass
class EstimateResult:
    trajectory: object  # Trajectory on the DUT clock, original time base
    state: State
    report: object
    init: object
    base: float = 0.0
    timings: dict = field(default_factory=dict)


def time_base(ms):
    """Integer second subtracted from all stamps when they look like epoch time."""
    t_min = min(ms.mocap.t[0], ms.imu.t[0], ms.dut.t[0])
    t_max = max(ms.mocap.t[-1], ms.imu.t[-1], ms.dut.t[-1])
    if max(abs(t_min), abs(t_max)) > REBASE_THRESHOLD:
        return float(np.floor(t_min))
    return 0.0


def rebase(ms, base):
    if base == 0.0:
        return ms
    return MeasurementSet(ms.mocap.shifted(-base), ms.imu.shifted(-base), ms.dut.shifted(-base),
                          ms.noise)


def solve_options(cfg):
    return SolveOptions(max_iterations=cfg.max_iterations, two_stage=cfg.two_stage,
                        offset_mode=cfg.offset_mode, estimate_intrinsics=cfg.estimate_intrinsics,
                        w_min=cfg.w_min, pair_rot=np.deg2rad(cfg.pair_rot_deg),
                        pair_trans=cfg.pair_trans, pair_time=cfg.pair_time,
                        domain_margin=cfg.domain_margin, fd_check=cfg.fd_check,
                        reweight_rounds=cfg.reweight_rounds)


def _stage(name, fn, *args):
    """Run one pipeline stage, prefixing error messages with its name."""
    try:
        return fn(*args)
    except DegenerateMotion as exc:
        raise type(exc)(f"{name}: degenerate motion: {exc}") from exc
    except NumericalFailure as exc:
        raise NumericalFailure(f"{name}: {exc}") from exc


def estimate(ms, cfg=None):
    """Run the full estimator on a measurement set."""
    cfg = cfg or EstimateConfig()
    timings = {}
    base = time_base(ms)
    local = rebase(ms, base)

    t0 = time.perf_counter()
    seed, init = _stage("initialization", seed_state, local, cfg)
    timings["init"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    problem = _stage("problem setup", build_problem, local, seed, solve_options(cfg))
    splines, calib, report = _stage("batch solve", solve, problem)
    timings["solve"] = time.perf_counter() - t0

    state = State(splines, calib)
    traj = extract_trajectory(state, cfg.rate, cfg.frame)
    if base:
        traj = traj.shifted(base)
    return EstimateResult(traj, state, report, init, base, timings)


def _pose_lines(name, T):
    q = geo.rot_to_quat(T.R)
    return [f"{name}.p = {' '.join(f'{v:.9g}' for v in T.p)}",
            f"{name}.q_wxyz = {' '.join(f'{v:.9g}' for v in q)}"]


def format_report(result):
    """Plain-text solve report: calibration, offsets over time, factor RMS."""
    st, rep = result.state, result.report
    cal, sp = st.calib, st.splines
    lines = ["# calibration"]
    lines += _pose_lines("T_B_M", cal.T_B_M)
    lines += _pose_lines("T_B_D", cal.T_B_D)
    lines += _pose_lines("T_M_D", cal.T_B_M.inverse() @ cal.T_B_D)
    lines += _pose_lines("T_W_P", cal.T_W_P)
    lines.append(f"g = {cal.g:.9g}")
    for name in ("R_w_a", "M_w", "M_a"):
        M = getattr(cal, name)
        lines.append(f"{name} = {' '.join(f'{v:.9g}' for v in M.reshape(-1))}")
    lines.append("")
    lines.append("# time offsets (sensor stamp -> IMU clock, seconds)")
    lines.append("# piecewise linear between the listed knots: name stamp offset")
    for name in ("off_M", "off_D"):
        off = getattr(sp, name)
        g = off.grid
        taus = g.t0 + g.dt * np.arange(g.count)
        for tau, v in zip(taus, off.offset(taus)):
            lines.append(f"{name} {tau + result.base:.9f} {float(v):.12g}")
    lines.append("")
    lines.append("# solver")
    lines.append(f"iterations = {rep.iterations}")
    lines.append(f"initial_cost = {rep.initial_cost:.9g}")
    lines.append(f"final_cost = {rep.final_cost:.9g}")
    lines.append(f"termination = {rep.reason}")
    lines.append(f"seconds = {rep.seconds:.3f}")
    for k, v in rep.factor_rms.items():
        lines.append(f"rms.{k} = {v:.6g}")
    for k, v in rep.factor_counts.items():
        lines.append(f"count.{k} = {v}")
    for w in rep.warnings:
        lines.append(f"# warning: {w}")
    for n in result.init.notes:
        lines.append(f"# note: {n}")
    return "\n".join(lines) + "\n"


def parse_report_offsets(text):
    """Offset knots from a report: ``{name: (stamps, offsets)}``."""
    out = {}
    for line in text.splitlines():
        parts = line.split()
        if len(parts) == 3 and parts[0] in ("off_M", "off_D"):
            out.setdefault(parts[0], []).append((float(parts[1]), float(parts[2])))
    return {k: tuple(np.array(c) for c in zip(*v)) for k, v in out.items()}
