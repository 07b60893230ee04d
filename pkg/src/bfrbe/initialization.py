"""Starting values: two-step least squares, optionally followed by varimax."""
from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .model import ModelState, ObservationSet

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
RELATIVE_VARIANCE_FLOOR = 0.5
VARIMAX_RTOL = 1e-5


class InitKind(str, enum.Enum):
    LEAST_SQUARES = "ls"
    LEAST_SQUARES_VARIMAX = "ls-varimax"
    FROM_STATE = "from-state"


@dataclass(frozen=True)
class InitStrategy:
    kind: InitKind = InitKind.LEAST_SQUARES
    external: Optional[ModelState] = None
    kaiser: bool = True
    varimax_rtol: float = VARIMAX_RTOL

    def __post_init__(self):
        object.__setattr__(self, "kind", InitKind(self.kind))
        if self.kind is InitKind.FROM_STATE and self.external is None:
            raise ConfigurationError("a from-state initialization needs a ModelState")

    def build(self, data: ObservationSet, q: int) -> ModelState:
        if self.kind is InitKind.FROM_STATE:
            if self.external.q != q or self.external.p != data.p:
                raise ConfigurationError("external initial state does not match (p, q)")
            return self.external
        state = init_least_squares(data, q)
        if self.kind is InitKind.LEAST_SQUARES_VARIMAX:
            state = state.replace(M=varimax(state.M, normalize=self.kaiser, rtol=self.varimax_rtol))
        return state


def _top_eigenpairs(E: np.ndarray, q: int):
    """Top-q eigenpairs of ``E^T E / n``, via the n x n Gram matrix when p > n."""
    n, p = E.shape
    if p <= n:
        vals, vecs = np.linalg.eigh(E.T @ E / n)
        order = np.argsort(vals)[::-1][:q]
        vals, U = vals[order], vecs[:, order]
    else:
        vals, vecs = np.linalg.eigh(E @ E.T / n)
        order = np.argsort(vals)[::-1][:q]
        vals, W = vals[order], vecs[:, order]
        U = np.zeros((p, q))
        ok = vals > 1e-12 * max(vals[0], 1e-300)
        U[:, ok] = (E.T @ W[:, ok]) / np.sqrt(n * vals[ok])
    vals = np.maximum(vals, 0.0)
    # deterministic sign: largest-magnitude entry of each eigenvector positive
    pivot = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[pivot, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return vals, U * signs


def init_least_squares(data: ObservationSet, q: int) -> ModelState:
    """OLS on (V, B), then principal components of the residual covariance."""
    if not 1 <= q <= data.p:
        raise ConfigurationError(f"q={q} must lie in [1, p] = [1, {data.p}]")
    W = data.design
    if np.linalg.matrix_rank(W) < data.p_b:
        raise ConfigurationError("the batch indicators are rank deficient")
    # minimum-norm solution handles an intercept in V colliding with B
    coef = np.linalg.pinv(W) @ data.X
    E = data.X - W @ coef
    vals, U = _top_eigenpairs(E, min(q, data.n))
    M = np.zeros((data.p, q))
    # beyond n there are no sample components; those columns start at zero
    M[:, : vals.size] = U * np.sqrt(vals)
    total_var = np.sum(E * E, axis=0) / data.n
    resid_var = total_var - np.sum(M * M, axis=1)
    low = resid_var < VARIANCE_FLOOR
    if np.any(low):
        warnings.warn(
            f"{int(low.sum())} initial residual variances below {VARIANCE_FLOOR}; floored",
            RuntimeWarning,
            stacklevel=2,
        )
    # When q approaches the rank of E the principal components absorb the
    # noise and the residual variances collapse; EM then stalls at the
    # interpolating start. Keep at least a fixed share of each column's variance.
    floor = np.maximum(VARIANCE_FLOOR, RELATIVE_VARIANCE_FLOOR * total_var)
    if np.any(resid_var < floor):
        log.debug("%d initial residual variances raised to the relative floor", int(np.sum(resid_var < floor)))
    resid_var = np.maximum(resid_var, floor)
    T = np.repeat((1.0 / resid_var)[:, None], data.p_b, axis=1)
    return ModelState(
        M=M,
        theta=coef[: data.p_v].T,
        beta=coef[data.p_v :].T,
        T=T,
        zeta=np.full(q, 0.5),
    )


def varimax_criterion(M: np.ndarray) -> float:
    M2 = M * M
    return float(np.sum(np.sum(M2 * M2, axis=0) - np.sum(M2, axis=0) ** 2 / M.shape[0]))


def _round_robin(q: int):
    """Disjoint column pairings (circle method) that together cover every pair once; q even."""
    idx = list(range(q))
    rounds = []
    for _ in range(q - 1):
        half = q // 2
        rounds.append((np.array(idx[:half]), np.array(idx[half:][::-1])))
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return rounds


def varimax(
    M: np.ndarray, tol: float = 1e-8, max_sweeps: int = 500, normalize: bool = False, rtol: float = 0.0
) -> np.ndarray:
    """Varimax by sweeps of planar rotations with the closed-form optimal angle.

    Each sweep visits every column pair once, in rounds of disjoint pairs that
    are rotated together. With ``normalize`` the rows are scaled to unit length
    before rotating and scaled back afterwards (Kaiser normalization); either
    way the result is ``M R`` for an orthogonal ``R``. Sweeps stop once the
    criterion gains less than ``max(tol, rtol * criterion)``.
    """
    L = np.array(M, dtype=float)
    p, q = L.shape
    if q < 2:
        return L
    if normalize:
        h = np.sqrt(np.sum(L * L, axis=1, keepdims=True))
        h[h == 0.0] = 1.0
        return varimax(L / h, tol=tol, max_sweeps=max_sweeps, rtol=rtol) * h
    # a zero dummy column makes q even; its rotation angle is always 0
    if q % 2:
        L = np.hstack([L, np.zeros((p, 1))])
    rounds = _round_robin(L.shape[1])
    crit = varimax_criterion(L)
    for _ in range(max_sweeps):
        for left, right in rounds:
            x, y = L[:, left], L[:, right]
            u = x * x - y * y
            v = 2.0 * x * y
            su, sv = u.sum(axis=0), v.sum(axis=0)
            num = 2.0 * (np.sum(u * v, axis=0) - su * sv / p)
            den = np.sum(u * u, axis=0) - np.sum(v * v, axis=0) - (su * su - sv * sv) / p
            phi = 0.25 * np.arctan2(num, den)
            c, s = np.cos(phi), np.sin(phi)
            L[:, left], L[:, right] = c * x + s * y, -s * x + c * y
        new = varimax_criterion(L)
        if new - crit < max(tol, rtol * abs(new)):
            break
        crit = new
    return L[:, :q]
