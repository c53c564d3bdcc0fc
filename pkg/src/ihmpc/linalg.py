"""Dense linear algebra helpers.

Matrices are plain 2-D float64 numpy arrays. Vectors are column matrices
(``k x 1``) wherever they cross a module boundary, so that ``vec`` and
the Kronecker identities used by the Riccati derivative stay literal.
"""
import io
import warnings

import numpy as np
import scipy.linalg as sla

from . import constants as C


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a linear system is singular to working precision."""

    def __init__(self, msg, cond=np.inf):
        super().__init__(f"{msg} (condition estimate {cond:.3e})")
        self.cond = cond


def as_matrix(a, allow_inf=False):
    """Coerce ``a`` to a 2-D float64 array; 1-D input becomes a column."""
    m = np.array(a, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(-1, 1)
    elif m.ndim != 2:
        raise ValueError(f"expected at most 2 dimensions, got {m.ndim}")
    if np.isnan(m).any():
        raise ValueError("matrix contains NaN")
    if not allow_inf and not np.isfinite(m).all():
        raise ValueError("matrix contains non-finite entries")
    return m


def bound_vector(b):
    """Column vector of bounds, mapping +-inf to the +-1e20 sentinel."""
    v = as_matrix(b, allow_inf=True)
    return np.clip(v, -C.INF, C.INF)


def is_infinite(b):
    return np.abs(b) >= C.INF_THRESHOLD


def vec(a):
    """Stack the columns of ``a`` into a column vector."""
    a = np.asarray(a, dtype=float)
    return a.reshape(-1, 1, order="F")


def unvec(v, rows, cols):
    """Inverse of :func:`vec`."""
    return np.asarray(v, dtype=float).reshape(rows, cols, order="F")


def commutation_matrix(m, n):
    """Permutation ``V`` with ``V @ vec(A) == vec(A.T)`` for ``A`` of shape (m, n)."""
    if m < 1 or n < 1:
        raise ValueError("dimensions must be positive")
    # vec(A)[j*m + i] = A[i, j];  vec(A.T)[i*n + j] = A[i, j]
    i, j = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    V = np.zeros((m * n, m * n))
    V[(i * n + j).ravel(), (j * m + i).ravel()] = 1.0
    return V


def kron(a, b):
    return np.kron(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def expm(a):
    """Matrix exponential (scaling and squaring with a Pade approximant)."""
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"expm needs a square matrix, got {a.shape}")
    return sla.expm(a)


def solve(a, b, max_cond=None):
    """Solve ``a @ x = b`` with a pivoted LU factorization.

    Raises :class:`SingularMatrixError` when the 1-norm condition estimate
    exceeds ``max_cond`` (default ``1 / eps``).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"solve needs a square matrix, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"right-hand side has {b.shape[0]} rows, expected {a.shape[0]}")
    if max_cond is None:
        max_cond = 1.0 / np.finfo(float).eps
    with warnings.catch_warnings():
        # singularity is reported through SingularMatrixError below
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(a, check_finite=True)
    if np.any(np.diag(lu) == 0.0):
        raise SingularMatrixError("exactly singular matrix")
    cond = condition_estimate(a, lu, piv)
    if cond > max_cond:
        raise SingularMatrixError("matrix is singular to working precision", cond)
    return sla.lu_solve((lu, piv), b)


def condition_estimate(a, lu=None, piv=None):
    """1-norm condition number estimate (LAPACK ``gecon``)."""
    a = np.asarray(a, dtype=float)
    if lu is None:
        lu, piv = sla.lu_factor(a)
    gecon = sla.get_lapack_funcs("gecon", (lu,))
    rcond, info = gecon(lu, np.linalg.norm(a, 1), norm="1")
    if rcond == 0.0:
        return np.inf
    return 1.0 / rcond


def spectral_radius(a):
    """Largest eigenvalue modulus of a square matrix."""
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"spectral radius needs a square matrix, got {a.shape}")
    return float(np.max(np.abs(np.linalg.eigvals(a))))


def symmetrize(a):
    return 0.5 * (a + a.T)


def is_symmetric(a, tol=C.SYMMETRY):
    a = np.asarray(a)
    return a.shape[0] == a.shape[1] and np.max(np.abs(a - a.T), initial=0.0) <= tol * (1 + np.max(np.abs(a), initial=0.0))


def block_diag(*blocks):
    return sla.block_diag(*blocks)


# --- text serialization -------------------------------------------------

def dumps_matrix(a):
    """``rows,cols`` header followed by one comma separated row per line."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    lines = [f"{a.shape[0]},{a.shape[1]}"]
    for row in a:
        lines.append(",".join(format(float(x), ".17g") for x in row))
    return "\n".join(lines) + "\n"


def loads_matrix(text):
    return read_matrix(io.StringIO(text))


def read_matrix(fh):
    header = fh.readline().strip()
    rows, cols = (int(x) for x in header.split(","))
    data = np.empty((rows, cols))
    for i in range(rows):
        parts = fh.readline().strip().split(",")
        if len(parts) != cols:
            raise ValueError(f"row {i} has {len(parts)} entries, expected {cols}")
        data[i] = [float(p) for p in parts]
    return data


def write_matrix(fh, a):
    fh.write(dumps_matrix(a))
