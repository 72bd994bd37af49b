"""Small linear-algebra helpers shared by the solvers."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg.lapack import dpbtrf, dpbtrs


def sparse_to_upper_band(mat, bandwidth: int) -> np.ndarray:
    """Upper LAPACK band storage ``ab[bw + i - j, j] = a[i, j]`` of a symmetric matrix."""
    mat = sp.csr_matrix(mat)
    n = mat.shape[0]
    ab = np.zeros((bandwidth + 1, n))
    coo = mat.tocoo()
    keep = (coo.col >= coo.row) & (coo.col - coo.row <= bandwidth)
    if np.any((coo.col - coo.row > bandwidth) & (coo.data != 0)):
        raise ValueError("matrix has entries outside the stated bandwidth")
    r, c = coo.row[keep], coo.col[keep]
    np.add.at(ab, (bandwidth + r - c, c), coo.data[keep])
    return ab


class SPDFactor:
    """Cholesky factor of a symmetric positive-definite matrix.

    Banded LAPACK storage when a band is supplied; sparse LU otherwise
    (and as a fallback if the banded factorization reports an indefinite
    pivot).
    """

    def __init__(self, band=None, matrix=None):
        self._band = None
        self._lu = None
        if band is not None:
            c, info = dpbtrf(band, lower=0)
            if info == 0:
                self._band = c
            elif matrix is None:
                raise np.linalg.LinAlgError(f"banded Cholesky failed (info={info})")
        if self._band is None:
            self._lu = spla.splu(sp.csc_matrix(matrix))

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if self._band is not None:
            x, info = dpbtrs(self._band, rhs, lower=0)
            if info != 0:
                raise np.linalg.LinAlgError(f"dpbtrs failed (info={info})")
            return x
        return self._lu.solve(rhs)
