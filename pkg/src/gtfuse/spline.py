"""Uniform cumulative B-splines on R^n and SO(3), and time-offset splines.

Knot layout: a spline of order ``k`` on grid ``(t0, dt, count)`` has
``count`` control points. Time ``t`` falls in segment ``i = floor((t-t0)/dt)``
with local coordinate ``u = (t - t0)/dt - i``, and the segment is influenced
by control points ``i .. i+k-1``. The valid domain is the closed interval
``[t0, t0 + (count - k + 1) * dt]``; at the right end the last segment is
evaluated at ``u = 1``. Control point ``j`` is centred at time
``t0 + (j - (k - 2) / 2) * dt``, so a linear spline (``k = 2``) passes
through control point ``j`` at ``t0 + j * dt``.
"""
from dataclasses import dataclass
from math import comb, factorial

import numpy as np

from . import geometry as geo
from .banded import BandedSym, solve_cholesky
from .errors import InsufficientCoverage, NumericalFailure, OutOfDomain, UnsupportedOrder


def _standard_matrix_scaled(k):
    """(k-1)! times the uniform B-spline basis matrix, in exact integers.

    Row s holds the coefficients of b_s(u) in powers u^0 .. u^(k-1).
    """
    M = np.zeros((k, k), dtype=np.int64)
    for s in range(k):
        for n in range(k):
            acc = 0
            for l in range(s, k):
                acc += (-1) ** (l - s) * comb(k, l - s) * (k - 1 - l) ** (k - 1 - n)
            M[s, n] = comb(k - 1, n) * acc
    return M


def blending_matrix(k):
    """Cumulative blending matrix ``C`` with ``B(u) = C @ (1, u, ..., u^(k-1))``.

    ``B_0(u) == 1`` and ``B_j(u) = sum_{s >= j} b_s(u)`` for the uniform
    B-spline basis functions ``b_s``.
    """
    if k not in (2, 3, 4):
        raise UnsupportedOrder(f"spline order {k} not supported (use 2, 3 or 4)")
    M = _standard_matrix_scaled(k)
    return np.cumsum(M[::-1], axis=0)[::-1] / factorial(k - 1)


_CUM = {}


def _cum(k):
    if k not in _CUM:
        _CUM[k] = blending_matrix(k)
    return _CUM[k]


def _powers(u, k, deriv):
    """d^deriv/du^deriv of (1, u, ..., u^(k-1)), shape (n, k)."""
    u = np.asarray(u, dtype=float)
    out = np.zeros(u.shape + (k,))
    for n in range(deriv, k):
        coef = factorial(n) / factorial(n - deriv)
        out[..., n] = coef * u ** (n - deriv)
    return out


def cumulative_basis(u, k, dt, deriv=0):
    """Cumulative basis ``B_j`` (or its time derivative), shape (n, k)."""
    return (_powers(u, k, deriv) @ _cum(k).T) / dt ** deriv


def point_basis(u, k, dt, deriv=0):
    """Weight of each of the k control points (non-cumulative form)."""
    B = cumulative_basis(u, k, dt, deriv)
    w = B.copy()
    w[..., :-1] -= B[..., 1:]
    return w


@dataclass(frozen=True)
class KnotGrid:
    t0: float
    dt: float
    count: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("knot spacing must be positive")

    def domain(self, order):
        return self.t0, self.t0 + (self.count - order + 1) * self.dt

    def n_segments(self, order):
        return self.count - order + 1

    def in_domain(self, t, order):
        lo, hi = self.domain(order)
        t = np.asarray(t, dtype=float)
        return (t >= lo) & (t <= hi)

    def locate(self, t, order):
        """Segment index and local coordinate; raises OutOfDomain."""
        t = np.asarray(t, dtype=float)
        lo, hi = self.domain(order)
        bad = ~((t >= lo) & (t <= hi))
        if np.any(bad):
            first = np.atleast_1d(t)[np.atleast_1d(bad)][0]
            raise OutOfDomain(float(first), lo, hi)
        s = (t - self.t0) / self.dt
        i = np.floor(s).astype(np.int64)
        nseg = self.n_segments(order)
        i = np.minimum(i, nseg - 1)
        u = s - i
        return i, u

    def centres(self, order):
        j = np.arange(self.count)
        return self.t0 + (j - (order - 2) / 2.0) * self.dt


def covering_grid(t_lo, t_hi, dt, order):
    """Smallest grid aligned to multiples of ``dt`` whose domain covers [t_lo, t_hi]."""
    t0 = np.floor(t_lo / dt) * dt
    nseg = int(np.ceil((t_hi - t0) / dt - 1e-12))
    nseg = max(nseg, 1)
    return KnotGrid(float(t0), float(dt), nseg + order - 1)


# ------------------------------------------------------------------ Euclidean

@dataclass(frozen=True)
class EuclidSpline:
    grid: KnotGrid
    order: int
    cps: np.ndarray  # (count, n)

    def __post_init__(self):
        cps = np.array(self.cps, dtype=float)
        if cps.ndim == 1:
            cps = cps[:, None]
        if cps.shape[0] != self.grid.count:
            raise ValueError("control point count does not match grid")
        _cum(self.order)
        object.__setattr__(self, "cps", cps)

    @property
    def dim(self):
        return self.cps.shape[1]

    def weights(self, t, deriv=0):
        """(first control point index, per-point weights (n, k))."""
        i, u = self.grid.locate(t, self.order)
        return i, point_basis(u, self.order, self.grid.dt, deriv)

    def __call__(self, t, deriv=0):
        return eval_euclid(self, t, deriv)

    def with_cps(self, cps):
        return EuclidSpline(self.grid, self.order, cps)


def eval_euclid(s, t, deriv=0):
    """Value or time derivative of a Euclidean spline, cumulative form."""
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    k = s.order
    i, u = s.grid.locate(t, k)
    B = cumulative_basis(u, k, s.grid.dt, deriv)
    idx = i[:, None] + np.arange(k)[None, :]
    c = s.cps[idx]  # (n, k, dim)
    inc = np.diff(c, axis=1)
    out = np.einsum("nj,njd->nd", B[:, 1:], inc)
    if deriv == 0:
        out = out + c[:, 0]
    return out[0] if scalar else out


# ---------------------------------------------------------------------- SO(3)

@dataclass(frozen=True)
class So3Spline:
    grid: KnotGrid
    cps: np.ndarray  # (count, 3, 3)
    order: int = 4

    def __post_init__(self):
        cps = np.array(self.cps, dtype=float)
        if cps.shape != (self.grid.count, 3, 3):
            raise ValueError("control points must have shape (count, 3, 3)")
        _cum(self.order)
        object.__setattr__(self, "cps", cps)

    def __call__(self, t):
        return eval_so3(self, t)

    def with_cps(self, cps):
        return So3Spline(self.grid, cps, self.order)


@dataclass
class So3Local:
    """Rotation spline value and body-frame derivatives for a batch of times.

    ``J*`` arrays hold Jacobians with respect to right perturbations of the
    k local control points, shape (n, k, 3, 3).
    """

    R: np.ndarray
    omega: np.ndarray
    domega: np.ndarray
    ddomega: np.ndarray = None
    JR: np.ndarray = None
    Jomega: np.ndarray = None
    Jdomega: np.ndarray = None


def so3_local(cps, u, dt, order=4, jacobian=False, third=False):
    """Evaluate the SO(3) cumulative spline from gathered control points.

    ``cps`` has shape (n, k, 3, 3) and ``u`` shape (n,).
    """
    k = order
    n = cps.shape[0]
    B = cumulative_basis(u, k, dt, 0)
    dB = cumulative_basis(u, k, dt, 1)
    ddB = cumulative_basis(u, k, dt, 2)
    dddB = cumulative_basis(u, k, dt, 3) if third else None

    R = cps[:, 0].copy()
    w = np.zeros((n, 3))
    dw = np.zeros((n, 3))
    ddw = np.zeros((n, 3)) if third else None
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    if jacobian:
        # Jacobians w.r.t. [delta_0, d_1, ..., d_{k-1}]
        JR = np.zeros((n, k, 3, 3))
        JR[:, 0] = eye
        Jw = np.zeros((n, k, 3, 3))
        Jdw = np.zeros((n, k, 3, 3))
    X = [None] * k
    D = [None] * k
    for j in range(1, k):
        Xj = np.swapaxes(cps[:, j - 1], -1, -2) @ cps[:, j]
        dj = geo.so3_log(Xj)
        X[j], D[j] = Xj, dj
        phi = B[:, j, None] * dj
        A = geo.so3_exp(phi)
        At = np.swapaxes(A, -1, -2)
        v = dB[:, j, None] * dj
        a = ddB[:, j, None] * dj
        y = np.einsum("nab,nb->na", At, w)
        z = np.einsum("nab,nb->na", At, dw)
        w_new = y + v
        yxv = np.cross(y, v)
        dw_new = yxv + z + a
        if third:
            s = dddB[:, j, None] * dj
            zz = np.einsum("nab,nb->na", At, ddw)
            ydot = z - np.cross(v, y)
            ddw = zz - np.cross(v, z) + np.cross(ydot, v) + np.cross(y, a) + s
        if jacobian:
            Jr = geo.right_jacobian(phi)
            BJr = B[:, j, None, None] * Jr
            # propagate earlier parameters through A_j^T
            JR[:, :j] = At[:, None] @ JR[:, :j]
            JR[:, j] = BJr
            Y = At[:, None] @ Jw[:, :j]
            Z = At[:, None] @ Jdw[:, :j]
            Yj = geo.hat(y) @ BJr
            Zj = geo.hat(z) @ BJr
            hv = geo.hat(v)[:, None]
            Jdw[:, :j] = -hv @ Y + Z
            Jdw[:, j] = (-geo.hat(v) @ Yj + Zj + geo.hat(y) * dB[:, j, None, None]
                         + ddB[:, j, None, None] * eye)
            Jw[:, :j] = Y
            Jw[:, j] = Yj + dB[:, j, None, None] * eye
        R = R @ A
        w = w_new
        dw = dw_new

    out = So3Local(R=R, omega=w, domega=dw, ddomega=ddw)
    if jacobian:
        out.JR, out.Jomega, out.Jdomega = (
            _chain_to_cps(J, X, D, k, direct=(J is JR)) for J in (JR, Jw, Jdw))
    return out


def _chain_to_cps(J, X, D, k, direct):
    """Map Jacobians w.r.t. (delta_0, d_1..d_{k-1}) to control-point perturbations."""
    out = np.zeros_like(J)
    if direct:
        out[:, 0] = J[:, 0]
    for l in range(1, k):
        Jinv = geo.right_jacobian_inv(D[l])
        G = J[:, l] @ Jinv
        out[:, l] += G
        out[:, l - 1] -= G @ np.swapaxes(X[l], -1, -2)
    return out


def _gather_so3(s, t):
    i, u = s.grid.locate(t, s.order)
    idx = i[:, None] + np.arange(s.order)[None, :]
    return i, u, s.cps[idx]


def eval_so3(s, t):
    """Rotation(s) of the SO(3) spline at time(s) ``t``."""
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    _, u, c = _gather_so3(s, t)
    R = so3_local(c, u, s.grid.dt, s.order).R
    return R[0] if scalar else R


def so3_body_rates(s, t):
    """Body angular velocity, first and second rotation-matrix derivatives.

    Returns ``(omega, Rdot, Rddot)`` with ``Rdot = R hat(omega)`` and
    ``Rddot = R (hat(domega) + hat(omega)^2)``.
    """
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    _, u, c = _gather_so3(s, t)
    loc = so3_local(c, u, s.grid.dt, s.order)
    W = geo.hat(loc.omega)
    Rdot = loc.R @ W
    Rddot = loc.R @ (geo.hat(loc.domega) + W @ W)
    if scalar:
        return loc.omega[0], Rdot[0], Rddot[0]
    return loc.omega, Rdot, Rddot


# ----------------------------------------------------------------- time offset

@dataclass(frozen=True)
class TimeOffsetSpline:
    """Linear spline of clock offset (seconds): global time = tau + offset(tau)."""

    inner: EuclidSpline

    def __post_init__(self):
        if self.inner.order != 2 or self.inner.dim != 1:
            raise ValueError("time-offset spline must be scalar and linear")

    @classmethod
    def constant(cls, grid, value):
        return cls(EuclidSpline(grid, 2, np.full((grid.count, 1), float(value))))

    @property
    def grid(self):
        return self.inner.grid

    @property
    def cps(self):
        return self.inner.cps[:, 0]

    def offset(self, tau, deriv=0):
        v = eval_euclid(self.inner, tau, deriv)
        return v[..., 0]

    def with_cps(self, cps):
        return TimeOffsetSpline(self.inner.with_cps(np.asarray(cps, dtype=float).reshape(-1, 1)))


def map_time(off, tau):
    """Global time ``tau + offset(tau)`` for sensor time ``tau``."""
    return np.asarray(tau, dtype=float) + off.offset(tau)


def unmap_time(off, t, iters=8):
    """Sensor time ``tau`` with ``map_time(off, tau) == t`` (fixed point)."""
    t = np.asarray(t, dtype=float)
    lo, hi = off.grid.domain(2)
    tau = t - off.offset(np.clip(t, lo, hi))
    for _ in range(iters):
        tau = t - off.offset(np.clip(tau, lo, hi))
    return tau


# ---------------------------------------------------------------------- fitting

def _check_coverage(grid, order, i):
    counts = np.bincount(i, minlength=grid.n_segments(order))
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        t_empty = grid.t0 + empty[0] * grid.dt
        raise InsufficientCoverage(
            f"{empty.size} spline segment(s) without samples, first at t={t_empty:.6f}")


def fit_spline(samples, grid, order=None, values=None, iterations=5):
    """Least-squares spline through samples.

    ``samples`` is either a list of ``(t, value)`` pairs or an array of times
    with ``values`` passed separately. Values of shape (3, 3) produce an
    :class:`So3Spline` (order 4), anything else an :class:`EuclidSpline`.
    """
    if values is None:
        ts = np.array([s[0] for s in samples], dtype=float)
        values = np.array([np.asarray(s[1], dtype=float) for s in samples])
    else:
        ts = np.asarray(samples, dtype=float)
        values = np.asarray(values, dtype=float)
    if values.ndim == 3 and values.shape[1:] == (3, 3):
        return _fit_so3(ts, values, grid, order or 4, iterations)
    if values.ndim == 1:
        values = values[:, None]
    return _fit_euclid(ts, values, grid, order or 4)


def _fit_euclid(ts, values, grid, order):
    keep = grid.in_domain(ts, order)
    ts, values = ts[keep], values[keep]
    i, u = grid.locate(ts, order)
    _check_coverage(grid, order, i)
    W = point_basis(u, order, grid.dt)
    H = BandedSym(grid.count, order - 1)
    H.add_blocks(i, W[:, :, None] * W[:, None, :])
    rhs = np.zeros((grid.count, values.shape[1]))
    idx = i[:, None] + np.arange(order)[None, :]
    np.add.at(rhs, idx.ravel(), (W[:, :, None] * values[:, None, :]).reshape(-1, values.shape[1]))
    try:
        cb = H.cholesky(what="spline fit")
    except NumericalFailure as exc:
        raise InsufficientCoverage("spline fit is under-determined") from exc
    cps = solve_cholesky(cb, rhs)
    return EuclidSpline(grid, order, cps)


def _fit_so3(ts, Rs, grid, order, iterations):
    keep = grid.in_domain(ts, order)
    ts, Rs = ts[keep], Rs[keep]
    i, u = grid.locate(ts, order)
    _check_coverage(grid, order, i)
    # seed each control point with the sample nearest to its centre time
    centres = grid.centres(order)
    nearest = np.clip(np.searchsorted(ts, centres), 0, len(ts) - 1)
    prev = np.clip(nearest - 1, 0, len(ts) - 1)
    use_prev = np.abs(ts[prev] - centres) < np.abs(ts[nearest] - centres)
    nearest = np.where(use_prev, prev, nearest)
    cps = Rs[nearest].copy()
    spl = So3Spline(grid, cps, order)
    idx = i[:, None] + np.arange(order)[None, :]
    Rt = np.swapaxes(Rs, -1, -2)
    w = 3 * order
    for _ in range(iterations):
        loc = so3_local(spl.cps[idx], u, grid.dt, order, jacobian=True)
        r = geo.so3_log(Rt @ loc.R)
        Jl = geo.right_jacobian_inv(r)
        J = (Jl[:, None] @ loc.JR)  # (n, k, 3, 3)
        J = np.transpose(J, (0, 2, 1, 3)).reshape(-1, 3, w)
        H = BandedSym(3 * grid.count, w - 1)
        H.add_blocks(3 * i, np.swapaxes(J, -1, -2) @ J)
        g = np.zeros(3 * grid.count)
        cols = 3 * i[:, None] + np.arange(w)[None, :]
        np.add.at(g, cols.ravel(), np.einsum("nrc,nr->nc", J, r).ravel())
        try:
            cb = H.cholesky(damping=1e-12, what="rotation fit")
        except NumericalFailure as exc:
            raise InsufficientCoverage("rotation spline fit is under-determined") from exc
        dx = -solve_cholesky(cb, g).reshape(-1, 3)
        spl = spl.with_cps(spl.cps @ geo.so3_exp(dx))
        if np.abs(dx).max() < 1e-13:
            break
    return spl
