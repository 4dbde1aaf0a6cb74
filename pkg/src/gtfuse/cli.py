"""Command-line driver: ``gtfuse {simulate,estimate,evaluate,inspect}``.

Exit codes: 0 success, 1 unexpected error, 2 input/parse/config error,
3 I/O error, 4 degenerate motion, 5 numerical failure, 6 no matching stamps.
Machine-readable results go to stdout as ``RESULT key=value`` lines.
"""
import argparse
import contextlib
import os
import sys

import numpy as np

from . import io, metrics, sync
from .config import load_config
from .data import MeasurementSet, validate
from .errors import (Degenerate, DegenerateMotion, FlatSignal, GtfuseError, InputError, IoError,
                     NoMatches, NumericalFailure)
from .initializer import RATE_BASELINE

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2
EXIT_IO = 3
EXIT_DEGENERATE = 4
EXIT_NUMERICAL = 5
EXIT_NO_MATCHES = 6


def exit_code(exc):
    if isinstance(exc, InputError):
        return EXIT_INPUT
    if isinstance(exc, IoError):
        return EXIT_IO
    if isinstance(exc, (DegenerateMotion, Degenerate)):
        return EXIT_DEGENERATE
    if isinstance(exc, NumericalFailure):
        return EXIT_NUMERICAL
    if isinstance(exc, NoMatches):
        return EXIT_NO_MATCHES
    return EXIT_INTERNAL


def result(key, value, out=None):
    out = out or sys.stdout
    if isinstance(value, float):
        value = f"{value:.9g}"
    print(f"RESULT {key}={value}", file=out)


def _overrides(args, extra=None):
    kv = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise InputError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = v.strip()
    kv.update(extra or {})
    return kv


def _thread_limit():
    value = os.environ.get("HPGT_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError as exc:
        raise InputError(f"HPGT_THREADS must be an integer, got {value!r}") from exc
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, n))


# ------------------------------------------------------------ commands

def cmd_simulate(args):
    from . import simulator
    extra = {}
    if args.duration is not None:
        extra["simulate.duration"] = str(args.duration)
    cfg = load_config(args.config, _overrides(args, extra))
    samples = simulator.simulate(cfg.simulate, args.seed, cfg.noise)
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        raise IoError(f"{args.out}: {exc}") from exc
    paths = simulator.export_set(samples, args.out)
    t = samples.truth
    result("seed", args.seed)
    result("duration", t.span[1] - t.span[0])
    for k in ("mocap", "imu", "dut"):
        result(f"samples.{k}", len(getattr(samples, k)))
    for k, c in t.clocks.items():
        result(f"clock.{k}.offset_ms", 1e3 * c.c0)
        result(f"clock.{k}.drift_ms_per_min", 1e3 * 60 * c.c1)
    for k, v in paths.items():
        result(f"file.{k}", v)
    return EXIT_OK


def _load_set(mocap, imu, dut, noise):
    return MeasurementSet(io.parse_pose_file(mocap), io.parse_imu_file(imu),
                          io.parse_pose_file(dut), noise)


def cmd_estimate(args):
    from .pipeline import estimate, format_report
    extra = {}
    if args.rate is not None:
        extra["estimate.rate"] = str(args.rate)
    if args.fd_check:
        extra["estimate.fd_check"] = "true"
    if args.offset_mode is not None:
        extra["estimate.offset_mode"] = args.offset_mode
    if args.frame is not None:
        extra["estimate.frame"] = args.frame
    cfg = load_config(args.config, _overrides(args, extra))
    ms = _load_set(args.mocap, args.imu, args.dut, cfg.noise)
    for w in validate(ms).warnings:
        print(f"warning: {w}", file=sys.stderr)
    res = estimate(ms, cfg.estimate)
    io.write_trajectory(args.out, res.trajectory,
                        header=[f"estimated {cfg.estimate.frame} trajectory at {cfg.estimate.rate:g} Hz"])
    report_path = args.report or args.out + ".report.txt"
    io.write_text(report_path, format_report(res))
    rep = res.report
    result("poses", len(res.trajectory))
    result("iterations", rep.iterations)
    result("initial_cost", rep.initial_cost)
    result("final_cost", rep.final_cost)
    result("termination", rep.reason)
    for k, v in rep.factor_rms.items():
        result(f"rms.{k}", v)
    result("seconds.init", res.timings["init"])
    result("seconds.solve", res.timings["solve"])
    result("trajectory", args.out)
    result("report", report_path)
    return EXIT_OK


def cmd_evaluate(args):
    est = io.parse_pose_file(args.est)
    ref = io.parse_pose_file(args.ref)
    rep = metrics.compute_metrics(est, ref, args.mode, args.stride, args.max_dt * 1e-3)
    print(rep.text(), file=sys.stderr)
    for line in rep.kv_lines():
        print(line)
    return EXIT_OK


def _excitation(ms):
    gyro = np.linalg.norm(ms.imu.gyro, axis=1)
    acc = ms.imu.accel - ms.imu.accel.mean(axis=0)
    return {"gyro_peak_deg_s": float(np.rad2deg(gyro.max())),
            "gyro_rms_deg_s": float(np.rad2deg(np.sqrt(np.mean(gyro ** 2)))),
            "accel_dev_rms": float(np.sqrt(np.mean(np.sum(acc ** 2, axis=1)))),
            "mocap_travel_m": float(np.ptp(ms.mocap.p, axis=0).max())}


def cmd_inspect(args):
    from .simulator import STREAM_FILES
    paths = {k: os.path.join(args.dataset, v) for k, v in STREAM_FILES.items()}
    cfg = load_config(args.config, _overrides(args))
    ms = _load_set(paths["mocap"], paths["imu"], paths["dut"], cfg.noise)
    report = validate(ms)
    for line in report.lines():
        print(line)
    result("warnings", len(report.warnings))
    for k, v in _excitation(ms).items():
        result(f"excitation.{k}", v)
    e = cfg.estimate
    imu_sig = sync.imu_rate_signal(ms.imu, e.sync_rate)
    for name in ("mocap", "dut"):
        try:
            sig = sync.angular_rate_signal(getattr(ms, name), e.sync_rate, RATE_BASELINE)
            off, score = sync.cross_correlate_offset(imu_sig, sig, e.sync_rate, e.max_lag,
                                                     return_score=True)
        except FlatSignal as exc:
            print(f"warning: {name}: flat signal: {exc}")
            continue
        result(f"sync.{name}.offset_s", off)
        result(f"sync.{name}.score", score)
    return EXIT_OK


# ------------------------------------------------------------- parsing

def build_parser():
    p = argparse.ArgumentParser(prog="gtfuse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")

    s = sub.add_parser("simulate", help="write a synthetic dataset with truth files")
    common(s)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--duration", type=float, help="seconds of motion")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate", help="estimate the DUT ground-truth trajectory")
    common(s)
    s.add_argument("mocap", help="MoCap poses (TUM format)")
    s.add_argument("imu", help="IMU samples (CSV)")
    s.add_argument("dut", help="DUT poses (TUM format)")
    s.add_argument("--out", required=True, help="output trajectory (TUM format)")
    s.add_argument("--report", help="solve report path (default: OUT.report.txt)")
    s.add_argument("--rate", type=float, help="output rate in Hz")
    s.add_argument("--offset-mode", choices=("variable", "fixed"))
    s.add_argument("--frame", choices=("dut", "global"))
    s.add_argument("--fd-check", action="store_true",
                   help="verify analytic Jacobians against finite differences")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("evaluate", help="compare a trajectory against a reference")
    s.add_argument("est")
    s.add_argument("ref")
    s.add_argument("--mode", choices=("direct", "aligned"), default="direct")
    s.add_argument("--stride", type=int, default=1, help="frames between relative-error pairs")
    s.add_argument("--max-dt", type=float, default=2.0, help="association tolerance in ms")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("inspect", help="validate a dataset directory and preview sync")
    common(s)
    s.add_argument("dataset", help="directory with mocap.txt, imu.csv and dut.txt")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except GtfuseError as exc:
        code = exit_code(exc)
        label = "degenerate motion" if code == EXIT_DEGENERATE else type(exc).__name__
        msg = str(exc)
        if code == EXIT_DEGENERATE and "degenerate motion" in msg:
            label = type(exc).__name__
        print(f"error ({label}): {msg}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
