"""Text formats for pose and IMU streams.

Pose files use the TUM layout ``t px py pz qx qy qz qw`` (one record per
line, ``#`` starts a comment). IMU files are CSV ``t,wx,wy,wz,ax,ay,az``.
Numbers are written with 17 significant digits so a write/parse roundtrip is
lossless.
"""
import os

import numpy as np

from .data import ImuData, Trajectory
from .errors import BadQuaternion, InputError, IoError, NonMonotonicTime, ParseError
from .geometry import quat_to_rot, rot_to_quat

QUAT_TOL = 1e-3


def _read_lines(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.readlines()
    except FileNotFoundError as exc:
        raise InputError(f"{path}: file not found") from exc
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc


def _records(path, sep, width):
    rows, lines = [], []
    for lineno, raw in enumerate(_read_lines(path), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split(sep) if sep else text.split()
        if len(parts) != width:
            raise ParseError(f"expected {width} fields, got {len(parts)}", line=lineno, path=path)
        try:
            vals = [float(x) for x in parts]
        except ValueError as exc:
            raise ParseError(f"non-numeric field ({exc})", line=lineno, path=path) from exc
        if not np.all(np.isfinite(vals)):
            raise ParseError("non-finite value", line=lineno, path=path)
        rows.append(vals)
        lines.append(lineno)
    data = np.array(rows, dtype=float).reshape(-1, width)
    lines = np.array(lines, dtype=int)
    bad = np.flatnonzero(np.diff(data[:, 0]) <= 0)
    if bad.size:
        raise NonMonotonicTime("timestamps not strictly increasing",
                               line=int(lines[bad[0] + 1]), path=path)
    return data, lines


def parse_pose_file(path):
    """Read a TUM trajectory file into a :class:`Trajectory`."""
    data, lines = _records(path, None, 8)
    q = data[:, [7, 4, 5, 6]]  # to scalar-first
    norms = np.linalg.norm(q, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > QUAT_TOL)
    if bad.size:
        raise BadQuaternion(f"quaternion norm {norms[bad[0]]:.6g} not unit",
                            line=int(lines[bad[0]]), path=path)
    R = quat_to_rot(q / norms[:, None])
    return Trajectory(data[:, 0], R, data[:, 1:4], check=False)


def parse_imu_file(path):
    data, _ = _records(path, ",", 7)
    return ImuData(data[:, 0], data[:, 1:4], data[:, 4:7], check=False)


def _as_trajectory(samples):
    if isinstance(samples, Trajectory):
        return samples
    return Trajectory.from_samples(samples)


def _write(path, text):
    try:
        d = os.path.dirname(os.path.abspath(path))
        os.makedirs(d, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc


def format_trajectory(samples, header=None):
    traj = _as_trajectory(samples)
    q = rot_to_quat(traj.R) if len(traj) else np.zeros((0, 4))
    out = [] if header is None else [f"# {h}" for h in header]
    out.append("# t px py pz qx qy qz qw")
    for t, p, qq in zip(traj.t, traj.p, q):
        vals = (t, p[0], p[1], p[2], qq[1], qq[2], qq[3], qq[0])
        out.append(" ".join(f"{v:.17g}" for v in vals))
    return "\n".join(out) + "\n"


def write_trajectory(path, samples, header=None):
    """Write poses in the format read by :func:`parse_pose_file`."""
    traj = _as_trajectory(samples)
    if np.any(np.diff(traj.t) <= 0):
        raise NonMonotonicTime("refusing to write non-monotone trajectory")
    _write(path, format_trajectory(traj, header))


def write_imu_file(path, imu):
    out = ["# t,wx,wy,wz,ax,ay,az"]
    for t, g, a in zip(imu.t, imu.gyro, imu.accel):
        out.append(",".join(f"{v:.17g}" for v in (t, *g, *a)))
    _write(path, "\n".join(out) + "\n")


def write_text(path, text):
    _write(path, text)
