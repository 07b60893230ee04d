"""Small symmetric positive-definite helpers shared by the E- and M-steps."""
import numpy as np

from .errors import NumericalError

JITTER = 1e-10


def _try_cholesky(A):
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(A + JITTER * np.eye(A.shape[-1]))
    except np.linalg.LinAlgError:
        return None


def cholesky(A, what="matrix"):
    """Cholesky factor of one SPD matrix or a stack, with a single jitter retry.

    For stacks the error names the first offending index.
    """
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise NumericalError(f"non-finite entries in {what}")
    L = _try_cholesky(A)
    if L is not None:
        return L
    if A.ndim > 2:
        for idx in np.ndindex(A.shape[:-2]):
            if _try_cholesky(A[idx]) is None:
                raise NumericalError(f"{what} is not positive definite at index {idx}")
    raise NumericalError(f"{what} is not positive definite")


def cho_solve(L, B):
    """Solve ``(L L^T) X = B`` where B has shape (..., d, m)."""
    Y = np.linalg.solve(L, B)
    return np.linalg.solve(np.swapaxes(L, -1, -2), Y)


def spd_solve(A, b, what="system"):
    """Solve ``A x = b`` for SPD ``A`` (..., d, d) and vector ``b`` (..., d)."""
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise NumericalError(f"non-finite right-hand side in {what}")
    L = cholesky(A, what)
    return cho_solve(L, b[..., None])[..., 0]


def spd_inverse(A, what="matrix"):
    L = cholesky(A, what)
    eye = np.broadcast_to(np.eye(L.shape[-1]), L.shape)
    inv = cho_solve(L, eye)
    return 0.5 * (inv + np.swapaxes(inv, -1, -2))


def spd_logdet(A, what="matrix"):
    L = cholesky(A, what)
    return 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
