"""Sparse SPD solves through CHOLMOD (shipped with cvxopt), with a SuperLU fallback."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

try:
    from cvxopt import cholmod, matrix, spmatrix

    cholmod.options["supernodal"] = 2
    HAVE_CHOLMOD = True
except ImportError:  # pragma: no cover - cvxopt is a declared dependency
    HAVE_CHOLMOD = False


class SingularSystemError(RuntimeError):
    """Raised when a stiffness matrix is not numerically positive definite."""


def _to_cvxopt(A: sp.spmatrix):
    L = sp.tril(A, format="coo")
    return spmatrix(
        matrix(L.data.astype(np.float64)),
        matrix(L.row.astype(np.int32)),
        matrix(L.col.astype(np.int32)),
        size=L.shape,
    )


class SPDSolver:
    """Factor-and-solve helper that reuses the symbolic analysis while the pattern is unchanged.

    Callers that assemble matrices with an identical COO layout every time (fixed mesh,
    varying coefficients) pay for the ordering once.
    """

    def __init__(self):
        self._symbolic = None
        self._key = None

    def solve(self, A: sp.spmatrix, b: np.ndarray) -> np.ndarray:
        A = sp.csc_matrix(A)
        b = np.asarray(b, dtype=np.float64)
        if not HAVE_CHOLMOD:  # pragma: no cover
            return _splu_solve(A, b)
        Ac = _to_cvxopt(A)
        key = (A.shape, len(Ac.V), int(np.sum(Ac.I[: min(len(Ac.I), 4096)])))
        try:
            if key != self._key:
                self._symbolic = cholmod.symbolic(Ac)
                self._key = key
            F = self._symbolic
            cholmod.numeric(Ac, F)
            rhs = matrix(np.array(b.reshape(b.shape[0], -1), dtype=np.float64, order="F"))
            cholmod.solve(F, rhs)
        except ArithmeticError as exc:
            self._key = None
            raise SingularSystemError(f"matrix of size {A.shape[0]} is not positive definite") from exc
        x = np.array(rhs)
        return x.reshape(b.shape)


def _splu_solve(A, b):
    lu = sla.splu(sp.csc_matrix(A))
    return lu.solve(b)


def spd_solve(A, b):
    """One-shot SPD solve."""
    return SPDSolver().solve(A, b)
