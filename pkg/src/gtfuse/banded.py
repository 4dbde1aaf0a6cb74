"""Accumulation of symmetric banded normal equations.

Spline locality means every residual touches a contiguous window of
control-point parameters, so the Gauss-Newton matrix of the trajectory
block is banded. Matrices are kept in LAPACK lower band storage
(``ab[i - j, j] == H[i, j]`` for ``i >= j``).
"""
import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from .errors import NumericalFailure


class BandedSym:
    def __init__(self, n, lower_bw):
        self.n = int(n)
        self.bw = int(lower_bw)
        self.ab = np.zeros((self.bw + 1, self.n))

    def add_blocks(self, offsets, H):
        """Add dense symmetric blocks ``H[g]`` at diagonal offsets ``offsets[g]``."""
        H = np.asarray(H, dtype=float)
        offsets = np.asarray(offsets, dtype=np.int64)
        w = H.shape[-1]
        if w > self.bw + 1:
            raise ValueError("block wider than band")
        r, c = np.tril_indices(w)
        rows = offsets[:, None] + r[None, :]
        cols = offsets[:, None] + c[None, :]
        flat = (rows - cols) * self.n + cols
        vals = H[:, r, c]
        self.ab += np.bincount(flat.ravel(), weights=vals.ravel(),
                               minlength=self.ab.size).reshape(self.ab.shape)

    def diagonal(self):
        return self.ab[0]

    def to_dense(self):
        H = np.zeros((self.n, self.n))
        for d in range(self.bw + 1):
            idx = np.arange(self.n - d)
            H[idx + d, idx] = self.ab[d, : self.n - d]
            H[idx, idx + d] = self.ab[d, : self.n - d]
        return H

    def cholesky(self, damping=None, what="trajectory"):
        ab = self.ab.copy()
        if damping is not None:
            ab[0] += damping
        try:
            return cholesky_banded(ab, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure("banded Cholesky failed", block=what) from exc


def solve_cholesky(cb, rhs):
    return cho_solve_banded((cb, True), rhs)
