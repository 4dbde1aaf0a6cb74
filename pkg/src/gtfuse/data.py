"""Measurement containers and dataset validation."""
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import EmptyStream, NonMonotonicTime
from .geometry import Pose


class MoCapSample(NamedTuple):
    tau: float
    pose: Pose


class DutSample(NamedTuple):
    tau: float
    pose: Pose


class ImuSample(NamedTuple):
    tau: float
    omega: np.ndarray
    accel: np.ndarray


def _check_monotone(t, name):
    bad = np.flatnonzero(np.diff(t) <= 0)
    if bad.size:
        raise NonMonotonicTime(f"{name}: timestamps not strictly increasing", line=int(bad[0]) + 2)


class Trajectory:
    """Timestamped poses stored as stacked arrays.

    Iterating yields ``(tau, Pose)`` pairs.
    """

    def __init__(self, t, R, p, check=True):
        self.t = np.asarray(t, dtype=float).reshape(-1)
        self.R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
        self.p = np.asarray(p, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.R) == len(self.p)):
            raise ValueError("trajectory arrays have different lengths")
        if check:
            _check_monotone(self.t, "trajectory")

    @classmethod
    def from_samples(cls, samples):
        samples = list(samples)
        if not samples:
            return cls(np.zeros(0), np.zeros((0, 3, 3)), np.zeros((0, 3)))
        t = np.array([s[0] for s in samples], dtype=float)
        R = np.array([s[1].R for s in samples])
        p = np.array([s[1].p for s in samples])
        return cls(t, R, p)

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for i in range(len(self.t)):
            yield float(self.t[i]), Pose(self.R[i], self.p[i])

    def __getitem__(self, i):
        return float(self.t[i]), Pose(self.R[i], self.p[i])

    def subset(self, mask):
        return Trajectory(self.t[mask], self.R[mask], self.p[mask], check=False)

    def transformed(self, left=None, right=None):
        """Return ``left * T(t) * right`` for every pose."""
        R, p = self.R, self.p
        if right is not None:
            p = p + R @ right.p
            R = R @ right.R
        if left is not None:
            p = p @ left.R.T + left.p
            R = left.R @ R
        return Trajectory(self.t, R, p, check=False)

    def shifted(self, dt):
        return Trajectory(self.t + dt, self.R, self.p, check=False)


class ImuData:
    """Gyroscope (rad/s) and accelerometer (m/s^2) samples."""

    def __init__(self, t, gyro, accel, check=True):
        self.t = np.asarray(t, dtype=float).reshape(-1)
        self.gyro = np.asarray(gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(accel, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.gyro) == len(self.accel)):
            raise ValueError("IMU arrays have different lengths")
        if check:
            _check_monotone(self.t, "imu")

    @classmethod
    def from_samples(cls, samples):
        samples = list(samples)
        t = np.array([s.tau for s in samples], dtype=float)
        g = np.array([s.omega for s in samples], dtype=float).reshape(-1, 3)
        a = np.array([s.accel for s in samples], dtype=float).reshape(-1, 3)
        return cls(t, g, a)

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for i in range(len(self.t)):
            yield ImuSample(float(self.t[i]), self.gyro[i], self.accel[i])

    def subset(self, mask):
        return ImuData(self.t[mask], self.gyro[mask], self.accel[mask], check=False)

    def shifted(self, dt):
        return ImuData(self.t + dt, self.gyro, self.accel, check=False)


@dataclass
class NoiseSpec:
    """Per-sample discrete noise levels in SI units.

    Defaults correspond to a 300 Hz MoCap and a 500 Hz consumer IMU.
    ``*_rw`` values are the random-walk increment per IMU sample.
    """

    mocap_sigma_p: float = 4.2e-4
    mocap_sigma_r: float = float(np.deg2rad(0.1))
    acc_nd: float = 1.1e-2
    acc_rw: float = 2.1e-6
    gyr_nd: float = float(np.deg2rad(4.8e-2))
    gyr_rw: float = float(np.deg2rad(1.4e-5))
    clock_drift: float = 1.0e-3 / 60.0
    dut_sigma_r: float = float(np.deg2rad(0.05))
    dut_sigma_p: float = 2.0e-3

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"noise parameter {name} must be positive, got {value!r}")


@dataclass
class MeasurementSet:
    mocap: Trajectory
    imu: ImuData
    dut: Trajectory
    noise: NoiseSpec = field(default_factory=NoiseSpec)


@dataclass
class StreamInfo:
    name: str
    count: int
    start: float
    end: float
    rate_hz: float
    jitter: float  # relative std of sample spacing
    gaps: list  # (start, end) pairs


@dataclass
class ValidationReport:
    streams: dict
    overlap: tuple
    warnings: list

    def lines(self):
        out = []
        for s in self.streams.values():
            out.append(f"{s.name}: n={s.count} rate={s.rate_hz:.3f} Hz "
                       f"span=[{s.start:.6f}, {s.end:.6f}] jitter={100 * s.jitter:.2f}% "
                       f"gaps={len(s.gaps)}")
            for g in s.gaps:
                out.append(f"  gap {g[0]:.6f} -> {g[1]:.6f} ({g[1] - g[0]:.3f} s)")
        lo, hi = self.overlap
        out.append(f"overlap: [{lo:.6f}, {hi:.6f}] ({max(hi - lo, 0.0):.3f} s)")
        for w in self.warnings:
            out.append(f"warning: {w}")
        return out


def stream_info(name, t, gap_factor=3.0):
    t = np.asarray(t, dtype=float)
    if len(t) < 2:
        raise EmptyStream(f"{name}: need at least 2 samples, got {len(t)}")
    dt = np.diff(t)
    nominal = float(np.median(dt))
    gap_idx = np.flatnonzero(dt > gap_factor * nominal)
    gaps = [(float(t[i]), float(t[i + 1])) for i in gap_idx]
    regular = np.delete(dt, gap_idx)
    jitter = float(np.std(regular) / np.mean(regular)) if regular.size else 0.0
    return StreamInfo(name, len(t), float(t[0]), float(t[-1]), 1.0 / nominal, jitter, gaps)


def validate(ms, jitter_warn=0.05):
    """Summarize rates, gaps and the common time window of all streams."""
    streams = {}
    warnings = []
    for name, t in (("mocap", ms.mocap.t), ("imu", ms.imu.t), ("dut", ms.dut.t)):
        info = stream_info(name, t)
        streams[name] = info
        if info.jitter > jitter_warn:
            warnings.append(f"{name}: sample spacing jitter {100 * info.jitter:.1f}% above "
                            f"{100 * jitter_warn:.0f}%")
        if info.gaps:
            warnings.append(f"{name}: {len(info.gaps)} gap(s) longer than 3x nominal spacing")
    lo = max(s.start for s in streams.values())
    hi = min(s.end for s in streams.values())
    if hi <= lo:
        warnings.append("streams do not overlap in their own clocks")
    return ValidationReport(streams, (lo, hi), warnings)
