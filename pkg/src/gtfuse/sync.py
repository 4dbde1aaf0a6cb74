"""Coarse constant clock offsets from angular-speed cross-correlation."""
import numpy as np

from .errors import FlatSignal, NoOverlap, TooFewSamples
from .geometry import so3_log

DEFAULT_RATE_HZ = 100.0
DEFAULT_MAX_LAG = 5.0


def _resample(t, v, rate_hz):
    k0 = int(np.ceil(t[0] * rate_hz - 1e-9))
    k1 = int(np.floor(t[-1] * rate_hz + 1e-9))
    if k1 < k0:
        raise TooFewSamples("signal shorter than one resample interval")
    grid = np.arange(k0, k1 + 1) / rate_hz
    return grid, np.interp(grid, t, v)


def angular_rate_signal(traj, rate_hz=DEFAULT_RATE_HZ, baseline=None):
    """Angular speed (rad/s) of a pose stream on the grid ``k / rate_hz``.

    Rates are rotation differences between consecutive poses, or over
    roughly ``baseline`` seconds when given, stamped at interval midpoints.
    A baseline of a few frames keeps pose jitter from dominating the signal.
    """
    t, R = traj.t, traj.R
    if len(t) < 3:
        raise TooFewSamples(f"need at least 3 poses, got {len(t)}")
    step = 1
    if baseline:
        step = int(np.clip(np.rint(baseline / np.median(np.diff(t))), 1, len(t) - 2))
    rel = np.swapaxes(R[:-step], -1, -2) @ R[step:]
    speed = np.linalg.norm(so3_log(rel), axis=-1) / (t[step:] - t[:-step])
    mid = 0.5 * (t[:-step] + t[step:])
    return _resample(mid, speed, rate_hz)


def imu_rate_signal(imu, rate_hz=DEFAULT_RATE_HZ):
    if len(imu.t) < 3:
        raise TooFewSamples(f"need at least 3 IMU samples, got {len(imu.t)}")
    return _resample(imu.t, np.linalg.norm(imu.gyro, axis=1), rate_hz)


def cross_correlate_offset(sig_a, sig_b, rate_hz=DEFAULT_RATE_HZ, max_lag=DEFAULT_MAX_LAG,
                           min_overlap=0.5, return_score=False):
    """Offset ``dt`` with ``b(tau) ~ a(tau + dt)``.

    Signals are ``(times, values)`` on the grid ``k / rate_hz``. The lag
    maximizing the Pearson correlation over the overlapping samples is
    refined to sub-sample precision with a parabola through the peak.
    ``min_overlap`` is the fraction of the shorter signal that must overlap
    for a lag to be considered.
    """
    ta, a = (np.asarray(x, dtype=float) for x in sig_a)
    tb, b = (np.asarray(x, dtype=float) for x in sig_b)
    for name, v in (("first", a), ("second", b)):
        if len(v) < 3 or np.var(v) < 1e-12:
            raise FlatSignal(f"{name} angular-rate signal has no excitation")
    ka = np.rint(ta * rate_hz).astype(np.int64)
    kb = np.rint(tb * rate_hz).astype(np.int64)
    need = max(3, int(min_overlap * min(len(a), len(b))))
    max_k = int(np.floor(max_lag * rate_hz + 1e-9))

    lags = np.arange(-max_k, max_k + 1)
    corr = np.full(len(lags), -np.inf)
    for n, L in enumerate(lags):
        # pair b[k] with a[k + L]
        lo = max(kb[0], ka[0] - L)
        hi = min(kb[-1], ka[-1] - L)
        if hi - lo + 1 < need:
            continue
        xb = b[lo - kb[0]: hi - kb[0] + 1]
        xa = a[lo + L - ka[0]: hi + L - ka[0] + 1]
        xa = xa - xa.mean()
        xb = xb - xb.mean()
        den = np.sqrt((xa @ xa) * (xb @ xb))
        if den > 0:
            corr[n] = (xa @ xb) / den
    if not np.any(np.isfinite(corr)):
        raise NoOverlap("signals do not overlap within the lag window")
    m = int(np.argmax(corr))
    shift = float(lags[m])
    if 0 < m < len(lags) - 1 and np.isfinite(corr[m - 1]) and np.isfinite(corr[m + 1]):
        c0, cm, cp = corr[m], corr[m - 1], corr[m + 1]
        den = cm - 2.0 * c0 + cp
        if den < 0:
            shift += float(np.clip(0.5 * (cm - cp) / den, -0.5, 0.5))
    offset = shift / rate_hz
    if return_score:
        return offset, float(corr[m])
    return offset
