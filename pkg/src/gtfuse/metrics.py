"""Absolute and inter-frame relative trajectory errors."""
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .errors import Degenerate, NoMatches
from .geometry import Pose

DEFAULT_MAX_DT = 2e-3


@dataclass
class MetricReport:
    are_deg: float
    ate_mm: float
    rre_deg: float
    rte_mm: float
    n_matched: int
    alignment: Pose
    mode: str = "direct"

    def as_dict(self):
        return {"mode": self.mode, "n_matched": self.n_matched, "are_deg": self.are_deg,
                "ate_mm": self.ate_mm, "rre_deg": self.rre_deg, "rte_mm": self.rte_mm}

    def kv_lines(self, prefix="RESULT "):
        out = []
        for k, v in self.as_dict().items():
            out.append(f"{prefix}{k}={v:.6g}" if isinstance(v, float) else f"{prefix}{k}={v}")
        return out

    def text(self):
        return "\n".join([
            f"matched frames : {self.n_matched} ({self.mode})",
            f"ARE            : {self.are_deg:.4f} deg",
            f"ATE            : {self.ate_mm:.4f} mm",
            f"RRE            : {self.rre_deg:.5f} deg",
            f"RTE            : {self.rte_mm:.5f} mm",
        ])


def associate(a, b, max_dt=DEFAULT_MAX_DT):
    """One-to-one nearest-timestamp matching; returns index arrays ``(ia, ib)``.

    Each stamp of ``a`` is paired with its nearest stamp in ``b``; a pair is
    kept when within ``max_dt`` and when it is also the nearest ``a`` stamp
    for that ``b`` stamp.
    """
    ta = np.asarray(a.t if hasattr(a, "t") else a, dtype=float)
    tb = np.asarray(b.t if hasattr(b, "t") else b, dtype=float)
    if len(ta) == 0 or len(tb) == 0:
        raise NoMatches("empty trajectory")

    def nearest(src, dst):
        j = np.clip(np.searchsorted(dst, src), 1, len(dst) - 1) if len(dst) > 1 else np.zeros(len(src), int)
        if len(dst) > 1:
            left = np.abs(src - dst[j - 1]) <= np.abs(dst[j] - src)
            j = np.where(left, j - 1, j)
        return j

    jb = nearest(ta, tb)
    ja = nearest(tb, ta)
    ia = np.arange(len(ta))
    ok = (np.abs(ta - tb[jb]) <= max_dt) & (ja[jb] == ia)
    if not ok.any():
        raise NoMatches(f"no timestamps match within {max_dt * 1e3:.3g} ms")
    return ia[ok], jb[ok]


def align_rigid(a, b, matched=None):
    """Pose ``X`` minimizing ``sum |p_b - X p_a|^2`` over matched positions."""
    pa = a.p if hasattr(a, "p") else np.asarray(a, dtype=float)
    pb = b.p if hasattr(b, "p") else np.asarray(b, dtype=float)
    if matched is not None:
        pa, pb = pa[matched[0]], pb[matched[1]]
    if len(pa) < 3:
        raise Degenerate("rigid alignment needs at least 3 matched positions")
    ca, cb = pa.mean(axis=0), pb.mean(axis=0)
    A, B = pa - ca, pb - cb
    sa = np.linalg.svd(A, compute_uv=False)
    if sa[1] <= 1e-10 * max(sa[0], 1e-300):
        raise Degenerate("positions are collinear; rotation about the line is unobservable")
    U, _, Vt = np.linalg.svd(B.T @ A)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    return Pose(R, cb - R @ ca)


def _rmse(x):
    return float(np.sqrt(np.mean(np.square(x)))) if len(x) else 0.0


def compute_metrics(est, ref, mode="direct", rel_stride=1, max_dt=DEFAULT_MAX_DT):
    """ARE/ATE/RRE/RTE of ``est`` against ``ref`` over matched stamps."""
    if mode not in ("direct", "aligned"):
        raise ValueError(f"unknown mode {mode!r}")
    ia, ib = associate(est, ref, max_dt)
    R_e, p_e = est.R[ia], est.p[ia]
    R_r, p_r = ref.R[ib], ref.p[ib]
    X = Pose.identity()
    if mode == "aligned":
        X = align_rigid(p_e, p_r)
        R_e = X.R @ R_e
        p_e = p_e @ X.R.T + X.p
    Rt_r = np.swapaxes(R_r, -1, -2)
    ang = geo.rotation_angle(Rt_r @ R_e)
    are = np.rad2deg(_rmse(ang))
    ate = 1e3 * _rmse(np.linalg.norm(p_e - p_r, axis=1))
    s = int(rel_stride)
    if len(ia) > s:
        dR_e = np.swapaxes(R_e[:-s], -1, -2) @ R_e[s:]
        dR_r = Rt_r[:-s] @ R_r[s:]
        dp_e = np.einsum("nba,nb->na", R_e[:-s], p_e[s:] - p_e[:-s])
        dp_r = np.einsum("nba,nb->na", R_r[:-s], p_r[s:] - p_r[:-s])
        rre = np.rad2deg(_rmse(geo.rotation_angle(np.swapaxes(dR_r, -1, -2) @ dR_e)))
        rte = 1e3 * _rmse(np.linalg.norm(dp_e - dp_r, axis=1))
    else:
        rre = rte = 0.0
    return MetricReport(float(are), float(ate), float(rre), float(rte), int(len(ia)), X, mode)
