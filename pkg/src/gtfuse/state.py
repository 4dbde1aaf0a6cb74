"""Estimator state: time-invariant calibration and the continuous-time splines.

Frames: ``W`` gravity-aligned world (gravity along -z), ``B`` rig body,
``P`` MoCap world, ``M`` MoCap marker body, ``I`` IMU, ``D`` DUT body,
``H`` DUT world. ``T_A_B`` maps coordinates in B to A.
"""
from dataclasses import dataclass, replace

import numpy as np

from . import geometry as geo
from .geometry import Pose
from .spline import EuclidSpline, So3Spline, TimeOffsetSpline

UPPER_TRI = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def upper_to_matrix(v):
    M = np.zeros((3, 3))
    for n, (a, b) in enumerate(UPPER_TRI):
        M[a, b] = v[n]
    return M


def matrix_to_upper(M):
    return np.array([M[a, b] for a, b in UPPER_TRI])


@dataclass(frozen=True)
class CalibState:
    T_B_M: Pose
    T_B_I: Pose
    T_B_D: Pose
    T_W_P: Pose
    R_w_a: np.ndarray
    M_w: np.ndarray
    M_a: np.ndarray
    g: float = 9.81  # gravity in W is (0, 0, -g)

    @classmethod
    def identity(cls, g=9.81):
        I = Pose.identity()
        return cls(I, I, I, I, np.eye(3), np.eye(3), np.eye(3), float(g))

    @property
    def g_W(self):
        return np.array([0.0, 0.0, -self.g])

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True)
class SplineBundle:
    rot: So3Spline
    pos: EuclidSpline
    bias_w: EuclidSpline
    bias_a: EuclidSpline
    off_M: TimeOffsetSpline
    off_I: TimeOffsetSpline
    off_D: TimeOffsetSpline

    def replace(self, **kw):
        return replace(self, **kw)

    def body_pose(self, t):
        """(R, p) of the body in W at global time(s) t."""
        from .spline import eval_euclid, eval_so3
        return eval_so3(self.rot, t), eval_euclid(self.pos, t)


@dataclass(frozen=True)
class State:
    splines: SplineBundle
    calib: CalibState

    def replace(self, **kw):
        return replace(self, **kw)


# --------------------------------------------------------------- parameters
#
# Tail (non-trajectory) parameter blocks and their tangent dimension. The
# trajectory itself is laid out first as [rot_j (3), pos_j (3)] per control
# point.

def tail_block_sizes(bundle):
    return {
        "bias_w": 3 * bundle.bias_w.grid.count,
        "bias_a": 3 * bundle.bias_a.grid.count,
        "off_M": bundle.off_M.grid.count,
        "off_I": bundle.off_I.grid.count,
        "off_D": bundle.off_D.grid.count,
        "R_BM": 3, "p_BM": 3,
        "R_BI": 3, "p_BI": 3,
        "R_BD": 3, "p_BD": 3,
        "tilt": 2,
        "g": 1,
        "R_w_a": 3,
        "M_w": 6,
        "M_a": 6,
    }


TAIL_ORDER = ["bias_w", "bias_a", "off_M", "off_I", "off_D", "R_BM", "p_BM", "R_BI",
              "p_BI", "R_BD", "p_BD", "tilt", "g", "R_w_a", "M_w", "M_a"]
OFFSET_BLOCKS = ("off_M", "off_I", "off_D")


class Layout:
    """Maps active parameter blocks to columns of the update vector.

    ``tied`` offset blocks share a single scalar across all control points
    (constant-offset model).
    """

    def __init__(self, state, active, tied=(), trajectory=True):
        self.n_cps = state.splines.rot.grid.count if trajectory else 0
        self.n_traj = 6 * self.n_cps
        sizes = tail_block_sizes(state.splines)
        self.tied = set(tied)
        self.blocks = {}
        off = 0
        for name in TAIL_ORDER:
            if name not in active:
                continue
            size = 1 if name in self.tied else sizes[name]
            self.blocks[name] = (off, size)
            off += size
        self.n_tail = off
        self.n = self.n_traj + self.n_tail

    def tail_cols(self, name, start, width):
        """Global tail column indices for per-sample local blocks."""
        base, _ = self.blocks[name]
        start = np.asarray(start)
        return base + start[..., None] + np.arange(width)

    def __contains__(self, name):
        return name in self.blocks


def retract(state, layout, dx):
    """Apply update vector ``dx`` (trajectory first, then tail blocks)."""
    dx = np.asarray(dx, dtype=float)
    sp, cal = state.splines, state.calib
    if layout.n_traj:
        d = dx[: layout.n_traj].reshape(-1, 6)
        sp = sp.replace(rot=sp.rot.with_cps(sp.rot.cps @ geo.so3_exp(d[:, :3])),
                        pos=sp.pos.with_cps(sp.pos.cps + d[:, 3:]))
    tail = dx[layout.n_traj:]
    upd = {}
    for name, (off, size) in layout.blocks.items():
        v = tail[off: off + size]
        upd[name] = v
    if "bias_w" in upd:
        sp = sp.replace(bias_w=sp.bias_w.with_cps(sp.bias_w.cps + upd["bias_w"].reshape(-1, 3)))
    if "bias_a" in upd:
        sp = sp.replace(bias_a=sp.bias_a.with_cps(sp.bias_a.cps + upd["bias_a"].reshape(-1, 3)))
    for name in OFFSET_BLOCKS:
        if name in upd:
            spl = getattr(sp, name)
            sp = sp.replace(**{name: spl.with_cps(spl.cps + upd[name])})

    def rot_pose(T, dr, dp):
        R = T.R if dr is None else T.R @ geo.so3_exp(dr)
        p = T.p if dp is None else T.p + dp
        return Pose(R, p)

    kw = {}
    for s in ("M", "I", "D"):
        rn, pn = f"R_B{s}", f"p_B{s}"
        if rn in upd or pn in upd:
            kw[f"T_B_{s}"] = rot_pose(getattr(cal, f"T_B_{s}"), upd.get(rn), upd.get(pn))
    if "tilt" in upd:
        d = np.array([upd["tilt"][0], upd["tilt"][1], 0.0])
        kw["T_W_P"] = Pose(geo.so3_exp(d) @ cal.T_W_P.R, cal.T_W_P.p)
    if "g" in upd:
        kw["g"] = cal.g + float(upd["g"][0])
    if "R_w_a" in upd:
        kw["R_w_a"] = cal.R_w_a @ geo.so3_exp(upd["R_w_a"])
    if "M_w" in upd:
        kw["M_w"] = cal.M_w + upper_to_matrix(upd["M_w"])
    if "M_a" in upd:
        kw["M_a"] = cal.M_a + upper_to_matrix(upd["M_a"])
    if kw:
        cal = cal.replace(**kw)
    return State(sp, cal)
