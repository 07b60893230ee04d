"""Data containers, residuals and the EM objective.

Matrices use row-major semantics throughout: ``X[i, j]`` is variable ``j`` of
individual ``i``, ``M[j, k]`` the loading of variable ``j`` on factor ``k`` and
``T[j, l]`` the precision of variable ``j`` in batch ``l``.

``V`` is used as given. Standardizing the columns of ``X`` is the caller's
job (the CLI does it by default); nothing here checks it.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import xlogy

from .errors import ConfigurationError, DataError, NumericalError
from .linalg import cholesky, spd_inverse

# log() argument floor for zeta at the {0, 1} boundary, see update_zeta.
_ZETA_LOG_FLOOR = np.finfo(float).tiny


class PriorFamily(str, enum.Enum):
    FLAT = "flat"
    NORMAL_SS = "normal-ss"
    MOM_SS = "mom-ss"
    LAPLACE_SS = "laplace-ss"
    LAPLACE_MOM_SS = "laplace-mom-ss"

    @property
    def is_spike_slab(self) -> bool:
        return self is not PriorFamily.FLAT

    @property
    def is_laplace(self) -> bool:
        return self in (PriorFamily.LAPLACE_SS, PriorFamily.LAPLACE_MOM_SS)

    @property
    def is_nonlocal(self) -> bool:
        return self in (PriorFamily.MOM_SS, PriorFamily.LAPLACE_MOM_SS)

    @classmethod
    def parse(cls, value) -> "PriorFamily":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for member in cls:
            if key == member.value or key == member.name.lower().replace("_", "-"):
                return member
        raise ConfigurationError(
            f"unknown prior family {value!r}; expected one of "
            + ", ".join(m.value for m in cls)
        )


@dataclass(frozen=True)
class ObservationSet:
    """Observed data: ``X`` (n, p), covariates ``V`` (n, p_v), one-hot batches ``B`` (n, p_b)."""

    X: np.ndarray
    V: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=float, ndmin=2)
        n = X.shape[0]
        V = np.zeros((n, 0)) if self.V is None else np.array(self.V, dtype=float)
        if V.ndim == 1:
            V = V[:, None]
        B = np.array(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if V.shape[0] != n or B.shape[0] != n:
            raise ConfigurationError(
                f"row counts differ: X has {n}, V has {V.shape[0]}, B has {B.shape[0]}"
            )
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(V))):
            raise DataError("X and V must be finite")
        if B.shape[1] < 1 or not np.all((B == 0) | (B == 1)) or not np.all(B.sum(axis=1) == 1):
            raise DataError("every row of B must contain exactly one 1")
        if np.any(B.sum(axis=0) < 1):
            raise DataError("every batch needs at least one member")
        for name, value in (("X", X), ("V", V), ("B", B)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def from_labels(cls, X, V=None, batch=None) -> "ObservationSet":
        """Build ``B`` from integer batch labels ``0..p_b-1`` (all in one batch if None)."""
        X = np.asarray(X, dtype=float)
        if batch is None:
            B = np.ones((X.shape[0], 1))
        else:
            batch = np.asarray(batch, dtype=int)
            B = np.zeros((X.shape[0], batch.max() + 1))
            B[np.arange(X.shape[0]), batch] = 1.0
        return cls(X, V, B)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def p_v(self) -> int:
        return self.V.shape[1]

    @property
    def p_b(self) -> int:
        return self.B.shape[1]

    @cached_property
    def batch(self) -> np.ndarray:
        """Batch index of each individual."""
        return np.argmax(self.B, axis=1)

    @cached_property
    def batch_sizes(self) -> np.ndarray:
        return self.B.sum(axis=0).astype(int)

    @cached_property
    def batch_members(self) -> list:
        return [np.flatnonzero(self.batch == l) for l in range(self.p_b)]

    @property
    def design(self) -> np.ndarray:
        """Stacked ``(V, B)`` regression design, shape (n, p_v + p_b)."""
        return np.hstack([self.V, self.B])

    def subset(self, rows) -> "ObservationSet":
        """The selected rows, keeping all batch columns (each batch must keep a member)."""
        rows = np.asarray(rows)
        return ObservationSet(self.X[rows], self.V[rows], self.B[rows])


@dataclass(frozen=True)
class ModelState:
    """Parameters (M, theta, beta, T, zeta)."""

    M: np.ndarray
    theta: np.ndarray
    beta: np.ndarray
    T: np.ndarray
    zeta: np.ndarray

    def __post_init__(self):
        M = np.array(self.M, dtype=float, ndmin=2)
        p, q = M.shape
        theta = np.array(self.theta, dtype=float).reshape(p, -1)
        beta = np.array(self.beta, dtype=float).reshape(p, -1)
        T = np.array(self.T, dtype=float).reshape(p, -1)
        zeta = np.array(self.zeta, dtype=float).reshape(-1)
        if T.shape != beta.shape:
            raise ConfigurationError(f"T shape {T.shape} does not match beta shape {beta.shape}")
        if zeta.shape != (q,):
            raise ConfigurationError(f"zeta must have length q={q}, got {zeta.shape}")
        for name, value in (("M", M), ("theta", theta), ("beta", beta), ("T", T)):
            if not np.all(np.isfinite(value)):
                raise NumericalError(f"{name} has non-finite entries")
        if np.any(T <= 0):
            raise NumericalError("precisions must be strictly positive")
        if np.any((zeta < 0) | (zeta > 1)) or not np.all(np.isfinite(zeta)):
            raise NumericalError("zeta entries must lie in [0, 1]")
        for name, value in (("M", M), ("theta", theta), ("beta", beta), ("T", T), ("zeta", zeta)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def p(self) -> int:
        return self.M.shape[0]

    @property
    def q(self) -> int:
        return self.M.shape[1]

    def replace(self, **changes) -> "ModelState":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class LatentMoments:
    """Posterior moments of the factors.

    ``cov_by_batch[l]`` is ``(I + M^T T_l M)^{-1}``; second moments are formed on
    demand because they only differ from the covariance by ``ez_i ez_i^T``.
    """

    ez: np.ndarray
    cov_by_batch: np.ndarray
    batch: np.ndarray

    @property
    def ezz(self) -> np.ndarray:
        """``E[z_i z_i^T]`` for every individual, shape (n, q, q)."""
        return self.cov_by_batch[self.batch] + self.ez[:, :, None] * self.ez[:, None, :]

    def second_moment_sums(self) -> np.ndarray:
        """``sum_{i in batch l} E[z_i z_i^T]``, shape (p_b, q, q)."""
        p_b, q = self.cov_by_batch.shape[0], self.ez.shape[1]
        S = np.empty((p_b, q, q))
        for l in range(p_b):
            rows = self.batch == l
            ez = self.ez[rows]
            S[l] = rows.sum() * self.cov_by_batch[l] + ez.T @ ez
        return S


@dataclass(frozen=True)
class PriorSpec:
    family: PriorFamily = PriorFamily.FLAT
    lambda0: float = 1.0
    lambda1: float = 1.0
    eta: float = 1.0
    xi: float = 1.0
    psi: float = 1.0
    a_zeta: float = 1.0
    b_zeta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", PriorFamily.parse(self.family))
        for name in ("lambda0", "lambda1", "eta", "xi", "psi", "a_zeta", "b_zeta"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigurationError(f"{name} must be positive, got {value}")
        if self.family.is_spike_slab and not self.lambda1 > self.lambda0:
            raise ConfigurationError(
                f"slab scale lambda1={self.lambda1} must exceed spike scale lambda0={self.lambda0}"
            )


def _check_dims(data: ObservationSet, state: ModelState):
    if state.p != data.p or state.theta.shape[1] != data.p_v or state.beta.shape[1] != data.p_b:
        raise ConfigurationError(
            f"state (p={state.p}, p_v={state.theta.shape[1]}, p_b={state.beta.shape[1]}) "
            f"does not match data (p={data.p}, p_v={data.p_v}, p_b={data.p_b})"
        )


def residuals(data: ObservationSet, state: ModelState) -> np.ndarray:
    """``x_i - theta v_i - beta b_i`` for every individual, shape (n, p)."""
    _check_dims(data, state)
    return data.X - data.V @ state.theta.T - data.B @ state.beta.T


def sufficient_statistics(data: ObservationSet, Xt: np.ndarray, moments: LatentMoments, T: np.ndarray):
    """Precision-weighted sums used by the loadings updates and by Q.

    Returns ``A`` (p, q, q) with ``A_j = sum_i tau_{j b_i} E[z_i z_i^T]`` and
    ``R`` (p, q) with ``R_j = sum_i tau_{j b_i} xt_ij E[z_i]``.
    """
    S = moments.second_moment_sums()
    A = np.einsum("jl,lab->jab", T, S)
    q = moments.ez.shape[1]
    R = np.zeros((data.p, q))
    for l, rows in enumerate(data.batch_members):
        R += T[:, l, None] * (Xt[rows].T @ moments.ez[rows])
    return A, R


def expected_spike_slab_precision(p_hat, lambda0, lambda1):
    """``E[1/lambda_gamma]`` under inclusion probability ``p_hat``."""
    p_hat = np.asarray(p_hat, dtype=float)
    return (1.0 - p_hat) / lambda0 + p_hat / lambda1


def loading_penalty(M, p_hat, prior: PriorSpec):
    """``sum_jk E_gamma[log p(m_jk | gamma_jk)]`` up to terms free of M."""
    fam = prior.family
    if not fam.is_spike_slab:
        return 0.0
    Ed = expected_spike_slab_precision(p_hat, prior.lambda0, prior.lambda1)
    value = -np.sum(np.abs(M) * Ed) if fam.is_laplace else -0.5 * np.sum(M**2 * Ed)
    if fam.is_nonlocal:
        # 2 log|m| rather than log(m^2): m^2 underflows for |m| < 1e-154
        with np.errstate(divide="ignore"):
            value += np.sum(xlogy(p_hat, np.abs(M)) * 2.0)
    return float(value)


def zeta_objective(zeta, p_hat, prior: PriorSpec):
    """The inclusion-weight part of Q.

    The ``log(1 - zeta)`` coefficient is ``p + b_zeta`` so that the closed-form
    zeta update used by the engine is this function's exact maximizer.
    """
    p = p_hat.shape[0]
    k = np.arange(1, zeta.size + 1)
    log_z = np.log(np.maximum(zeta, _ZETA_LOG_FLOOR))
    log_1z = np.log(np.maximum(1.0 - zeta, _ZETA_LOG_FLOOR))
    S = p_hat.sum(axis=0)
    return float(np.sum(S * (log_z - log_1z) + (prior.a_zeta / k - 1.0) * log_z + (p + prior.b_zeta) * log_1z))


def expected_log_posterior(
    data: ObservationSet,
    state: ModelState,
    moments: LatentMoments,
    prior: PriorSpec,
    p_hat=None,
) -> float:
    """Expected complete-data log-posterior Q, additive constant set to 0.

    ``moments`` (and ``p_hat`` for spike-and-slab families) come from the
    E-step; when ``p_hat`` is omitted it is computed from ``state``.
    """
    _check_dims(data, state)
    Xt = residuals(data, state)
    T = state.T
    if not np.all(np.linalg.eigvalsh(moments.cov_by_batch) > 0):
        raise NumericalError("posterior factor covariance is not positive definite")
    A, R = sufficient_statistics(data, Xt, moments, T)
    M = state.M
    quad = sum(np.sum(T[:, l] * np.sum(Xt[rows] ** 2, axis=0)) for l, rows in enumerate(data.batch_members))
    cross = np.sum(M * R)
    trace = np.einsum("ja,jab,jb->", M, A, M)
    Q = -0.5 * (quad - 2.0 * cross + trace)
    n_l = data.batch_sizes
    Q += np.sum((n_l + prior.eta - 2.0) / 2.0 * np.log(T).sum(axis=0))
    Q -= prior.eta * prior.xi / 2.0 * np.sum(T)
    Q -= 0.5 / prior.psi * (np.sum(state.theta**2) + np.sum(state.beta**2))
    if prior.family.is_spike_slab:
        if p_hat is None:
            from .priors import inclusion_matrix

            p_hat = inclusion_matrix(state.M, state.zeta, prior)
        Q += loading_penalty(M, p_hat, prior)
        Q += zeta_objective(state.zeta, p_hat, prior)
    return float(Q)


def log_posterior(data: ObservationSet, state: ModelState, prior: PriorSpec) -> float:
    """Observed-data log-posterior (factors and indicators integrated out).

    Generalized EM never decreases this quantity, which makes it the monotone
    diagnostic recorded alongside Q. Constants free of all parameters are dropped.
    """
    from .priors import log_mixture_density

    Xt = residuals(data, state)
    M, T = state.M, state.T
    q = state.q
    total = 0.0
    for l, rows in enumerate(data.batch_members):
        tau = T[:, l]
        P = np.eye(q) + M.T @ (tau[:, None] * M)
        L = cholesky(P, "I + M^T T M")
        xw = Xt[rows] * tau
        proj = np.linalg.solve(L, (xw @ M).T)
        quad = np.sum(xw * Xt[rows]) - np.sum(proj**2)
        logdet = -np.sum(np.log(tau)) + 2.0 * np.sum(np.log(np.diag(L)))
        total += -0.5 * (rows.size * logdet + quad)
    total += np.sum((prior.eta / 2.0 - 1.0) * np.log(T) - prior.eta * prior.xi / 2.0 * T)
    total -= 0.5 / prior.psi * (np.sum(state.theta**2) + np.sum(state.beta**2))
    if prior.family.is_spike_slab:
        total += float(np.sum(log_mixture_density(M, state.zeta, prior)))
        k = np.arange(1, q + 1)
        log_z = np.log(np.maximum(state.zeta, _ZETA_LOG_FLOOR))
        log_1z = np.log(np.maximum(1.0 - state.zeta, _ZETA_LOG_FLOOR))
        total += float(np.sum((prior.a_zeta / k - 1.0) * log_z + prior.b_zeta * log_1z))
    return float(total)


def posterior_covariances(state: ModelState) -> np.ndarray:
    """``(I + M^T T_l M)^{-1}`` for each batch, shape (p_b, q, q)."""
    M, T = state.M, state.T
    P = np.eye(state.q)[None] + np.einsum("ja,jl,jb->lab", M, T, M)
    return spd_inverse(P, "I + M^T T M")
