"""EM fitting: E-step moments, M-step updates and the outer loop.

Loadings are updated row-wise in closed form for the flat and Normal
spike-and-slab priors. For the moment and Laplace priors one coordinate sweep
over ``k = 1..q`` is done per EM iteration; rows are independent, so each
sweep step is vectorized over ``j``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InternalError, NumericalError
from .linalg import spd_solve
from .model import (
    LatentMoments,
    ModelState,
    ObservationSet,
    PriorFamily,
    PriorSpec,
    expected_log_posterior,
    expected_spike_slab_precision,
    log_posterior,
    posterior_covariances,
    residuals,
    sufficient_statistics,
)
from .priors import inclusion_matrix

log = logging.getLogger(__name__)

# Relative Q decrease tolerated as round-off before flagging an update bug.
Q_DECREASE_TOL = 1e-6
_TINY = np.finfo(float).smallest_subnormal


@dataclass(frozen=True)
class StoppingRule:
    eps_q: float = 0.001
    max_iter: int = 100
    eps_m: float = 0.05

    def __post_init__(self):
        if not (self.eps_q > 0 and self.eps_m > 0 and self.max_iter >= 0):
            raise ConfigurationError("stopping tolerances must be positive and max_iter non-negative")


@dataclass(frozen=True)
class CdaCoefficients:
    """Coefficients of ``a m^2 + b m + c |m| + d log m^2`` (MOM uses ``c`` for the log term)."""

    a: float
    b: float
    c: float
    d: float = 0.0


@dataclass
class FitTrace:
    """Per-iteration record.

    ``q_values[t]`` is Q at the iteration-t output under that iteration's
    E-step, ``q_gains[t]`` its increase over the iteration's input (the
    stopping quantity) and ``log_posteriors[t]`` the observed-data
    log-posterior of the output.
    """

    q_values: list = field(default_factory=list)
    q_gains: list = field(default_factory=list)
    log_posteriors: list = field(default_factory=list)
    m_deltas: list = field(default_factory=list)
    iterations: int = 0
    converged_by: str = "not-run"


# ---------------------------------------------------------------- E-step


def e_step(data: ObservationSet, state: ModelState) -> LatentMoments:
    """Posterior factor moments; one q x q inverse per batch."""
    if state.q < 1:
        raise ConfigurationError("q must be at least 1")
    Xt = residuals(data, state)
    cov = posterior_covariances(state)
    ez = np.empty((data.n, state.q))
    for l, rows in enumerate(data.batch_members):
        ez[rows] = (Xt[rows] * state.T[:, l]) @ state.M @ cov[l]
    if not np.all(np.isfinite(ez)):
        raise NumericalError("non-finite factor means in the E-step")
    return LatentMoments(ez=ez, cov_by_batch=cov, batch=data.batch)


# ---------------------------------------------------------------- M-step: loadings


def update_loadings_flat(data: ObservationSet, state: ModelState, moments: LatentMoments) -> np.ndarray:
    A, R = sufficient_statistics(data, residuals(data, state), moments, state.T)
    return spd_solve(A, R, "loadings normal equations (row j)")


def update_loadings_normal_ss(data, state, moments, p_hat, prior: PriorSpec) -> np.ndarray:
    A, R = sufficient_statistics(data, residuals(data, state), moments, state.T)
    Ed = expected_spike_slab_precision(p_hat, prior.lambda0, prior.lambda1)
    idx = np.arange(state.q)
    A = A.copy()
    A[:, idx, idx] += Ed
    return spd_solve(A, R, "ridge loadings system (row j)")


def _coefficient_arrays(A, R, M, p_hat, k, prior: PriorSpec):
    """Vectorized (over rows) coefficients of the univariate objective in column k."""
    Akk = A[:, k, k]
    b = R[:, k] - (np.einsum("jr,jr->j", M, A[:, :, k]) - M[:, k] * Akk)
    Ed = expected_spike_slab_precision(p_hat[:, k], prior.lambda0, prior.lambda1)
    if prior.family is PriorFamily.MOM_SS:
        return -0.5 * (Ed + Akk), b, p_hat[:, k].copy(), np.zeros_like(b)
    d = p_hat[:, k].copy() if prior.family is PriorFamily.LAPLACE_MOM_SS else np.zeros_like(b)
    return -0.5 * Akk, b, -Ed, d


def cda_coefficients(data, state, moments, p_hat, j: int, k: int, prior: PriorSpec) -> CdaCoefficients:
    """Coefficients of Q restricted to ``m_jk`` with all other loadings at ``state.M``."""
    if prior.family not in (PriorFamily.MOM_SS, PriorFamily.LAPLACE_SS, PriorFamily.LAPLACE_MOM_SS):
        raise ConfigurationError(f"no coordinate objective for {prior.family.value}")
    A, R = sufficient_statistics(data, residuals(data, state), moments, state.T)
    a, b, c, d = _coefficient_arrays(A[j : j + 1], R[j : j + 1], state.M[j : j + 1], np.asarray(p_hat)[j : j + 1], k, prior)
    return CdaCoefficients(float(a[0]), float(b[0]), float(c[0]), float(d[0]))


def _tie_sign(prev):
    return np.where(np.asarray(prev) < 0, -1.0, 1.0)


def _tiny_floor(m, weight, sign):
    # the true root is nonzero whenever the log weight is; keep it representable
    return np.where((m == 0.0) & (weight > 0), sign * _TINY, m)


def _quadratic_log_roots(a, b, w):
    """Positive and negative roots of ``2a m^2 + b m + 2w = 0`` (a < 0, w >= 0).

    Each root uses the algebraic form free of cancellation for the sign of ``b``.
    """
    disc = np.sqrt(b * b - 16.0 * a * w)
    big_pos = (b + disc) / (-4.0 * a)
    big_neg = (b - disc) / (-4.0 * a)
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.where(b > 0, big_pos, 4.0 * w / (disc - b))
        neg = np.where(b < 0, big_neg, -4.0 * w / (disc + b))
    return pos, neg


def _maximize_mom(a, b, c, prev=1.0):
    a, b, c = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (a, b, c)))
    pos, neg = _quadratic_log_roots(a, b, c)
    out = np.where(b > 0, pos, neg)
    out = np.where(b == 0, np.where(_tie_sign(prev) > 0, pos, neg), out)
    out = _tiny_floor(out, c, np.where(b == 0, _tie_sign(prev), np.sign(b)))
    # c == 0 means the log term is absent: plain quadratic maximum
    return np.where(c > 0, out, -b / (2.0 * a))


def _maximize_laplace_ss(a, b, c):
    a, b, c = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (a, b, c)))
    out = np.zeros_like(b)
    out = np.where(b > -c, -(b + c) / (2.0 * a), out)
    return np.where(b < c, -(b - c) / (2.0 * a), out)


def _maximize_laplace_mom(a, b, c, d, prev=1.0):
    a, b, c, d = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (a, b, c, d)))
    m_plus, _ = _quadratic_log_roots(a, b + c, d)
    _, m_minus = _quadratic_log_roots(a, b - c, d)
    out = np.where(b > 0, m_plus, m_minus)
    out = np.where(b == 0, np.where(_tie_sign(prev) > 0, m_plus, m_minus), out)
    out = _tiny_floor(out, d, np.where(b == 0, _tie_sign(prev), np.sign(b)))
    return np.where(d > 0, out, _maximize_laplace_ss(a, b, c))


def maximize_mom(coeff: CdaCoefficients, prev: float = 1.0) -> float:
    """Global maximizer of ``a m^2 + b m + c log m^2`` (a < 0, c > 0).

    At ``b == 0`` both roots are maxima and the sign of ``prev`` decides.
    """
    return float(_maximize_mom(coeff.a, coeff.b, coeff.c, prev))


def maximize_laplace_ss(coeff: CdaCoefficients) -> float:
    """Soft-thresholded maximizer of ``a m^2 + b m + c |m|`` (a < 0, c < 0)."""
    return float(_maximize_laplace_ss(coeff.a, coeff.b, coeff.c))


def maximize_laplace_mom(coeff: CdaCoefficients, prev: float = 1.0) -> float:
    """Maximizer of ``a m^2 + b m + c |m| + d log m^2`` (a < 0, c < 0, d > 0); never 0."""
    return float(_maximize_laplace_mom(coeff.a, coeff.b, coeff.c, coeff.d, prev))


def update_loadings_cda(data, state, moments, p_hat, prior: PriorSpec) -> np.ndarray:
    """One coordinate sweep over columns 1..q, each step using the freshest row values."""
    A, R = sufficient_statistics(data, residuals(data, state), moments, state.T)
    M = np.array(state.M)
    fam = prior.family
    for k in range(state.q):
        a, b, c, d = _coefficient_arrays(A, R, M, p_hat, k, prior)
        if fam is PriorFamily.MOM_SS:
            M[:, k] = _maximize_mom(a, b, c, M[:, k])
        elif fam is PriorFamily.LAPLACE_SS:
            M[:, k] = _maximize_laplace_ss(a, b, c)
        else:
            M[:, k] = _maximize_laplace_mom(a, b, c, d, M[:, k])
    return M


# ---------------------------------------------------------------- M-step: the rest


def check_batch_sizes(data: ObservationSet, prior: PriorSpec):
    bad = np.flatnonzero(data.batch_sizes + prior.eta - 2.0 <= 0)
    if bad.size:
        raise ConfigurationError(
            f"batch {int(bad[0])} has n_l={int(data.batch_sizes[bad[0]])}; "
            f"the precision update needs n_l + eta - 2 > 0 (eta={prior.eta})"
        )


def update_precisions(data, state, moments, prior: PriorSpec) -> np.ndarray:
    """Per-batch diagonal precision update; uses ``state.M`` as the current loadings."""
    check_batch_sizes(data, prior)
    Xt = residuals(data, state)
    M = state.M
    S = moments.second_moment_sums()
    T = np.empty_like(state.T)
    for l, rows in enumerate(data.batch_members):
        x = Xt[rows]
        fitted = moments.ez[rows] @ M.T
        ss = np.sum(x * x, axis=0) - 2.0 * np.sum(x * fitted, axis=0) + np.einsum("ja,ab,jb->j", M, S[l], M)
        var = (ss + prior.eta * prior.xi) / (rows.size + prior.eta - 2.0)
        T[:, l] = 1.0 / var
    if not np.all(np.isfinite(T) & (T > 0)):
        raise NumericalError("precision update produced non-positive values")
    return T


def update_coefficients(data, state, moments, prior: PriorSpec):
    """Joint ridge update of ``(theta_j, beta_j)``, weighted by the batch precisions."""
    W = data.design
    Y = data.X - moments.ez @ state.M.T
    d = W.shape[1]
    G = np.zeros((data.p, d, d))
    h = np.zeros((data.p, d))
    for l, rows in enumerate(data.batch_members):
        tau = state.T[:, l]
        Wl = W[rows]
        G += tau[:, None, None] * (Wl.T @ Wl)[None]
        h += tau[:, None] * (Y[rows].T @ Wl)
    idx = np.arange(d)
    G[:, idx, idx] += 1.0 / prior.psi
    coef = spd_solve(G, h, "coefficient ridge system (row j)")
    return coef[:, : data.p_v], coef[:, data.p_v :]


def update_zeta(p_hat, prior: PriorSpec) -> np.ndarray:
    """Closed-form factor weights; negative numerators are clamped to 0."""
    p_hat = np.asarray(p_hat, dtype=float)
    p, q = p_hat.shape
    a_k = prior.a_zeta / np.arange(1, q + 1)
    num = p_hat.sum(axis=0) + a_k - 1.0
    if np.any(num < 0):
        log.debug("zeta numerator negative for factors %s; clamped to 0", np.flatnonzero(num < 0) + 1)
    return np.clip(np.maximum(num, 0.0) / (a_k + prior.b_zeta + p - 1.0), 0.0, 1.0)


def m_step(data, state, moments, prior: PriorSpec, p_hat=None) -> ModelState:
    fam = prior.family
    if fam is PriorFamily.FLAT:
        M = update_loadings_flat(data, state, moments)
    elif fam is PriorFamily.NORMAL_SS:
        M = update_loadings_normal_ss(data, state, moments, p_hat, prior)
    else:
        M = update_loadings_cda(data, state, moments, p_hat, prior)
    state = state.replace(M=M)
    state = state.replace(T=update_precisions(data, state, moments, prior))
    theta, beta = update_coefficients(data, state, moments, prior)
    state = state.replace(theta=theta, beta=beta)
    if fam.is_spike_slab:
        state = state.replace(zeta=update_zeta(p_hat, prior))
    return state


# ---------------------------------------------------------------- loop


@dataclass
class FitResult:
    state: ModelState
    moments: LatentMoments
    p_hat: np.ndarray
    trace: FitTrace

    def __iter__(self):
        return iter((self.state, self.moments, self.p_hat, self.trace))


def fit(data: ObservationSet, prior: PriorSpec, q: int, init: ModelState, rule: StoppingRule = StoppingRule()) -> FitResult:
    """Run EM from ``init`` until the Q gain, the loading change or the iteration cap stops it."""
    if q < 1 or init.q != q:
        raise ConfigurationError(f"q={q} must be >= 1 and match the initial loadings ({init.q} columns)")
    check_batch_sizes(data, prior)
    state = init
    trace = FitTrace()
    for t in range(rule.max_iter):
        moments = e_step(data, state)
        p_hat = inclusion_matrix(state.M, state.zeta, prior) if prior.family.is_spike_slab else None
        q_old = expected_log_posterior(data, state, moments, prior, p_hat)
        new = m_step(data, state, moments, prior, p_hat)
        q_new = expected_log_posterior(data, new, moments, prior, p_hat)
        gain = q_new - q_old
        if gain < -Q_DECREASE_TOL * max(abs(q_old), 1.0):
            raise InternalError(f"Q decreased by {-gain:.3e} at iteration {t + 1}; an update is not ascending")
        dm = float(np.max(np.abs(new.M - state.M))) if new.M.size else 0.0
        trace.q_values.append(q_new)
        trace.q_gains.append(gain)
        trace.log_posteriors.append(log_posterior(data, new, prior))
        trace.m_deltas.append(dm)
        trace.iterations = t + 1
        state = new
        log.debug("iter %d: Q=%.6f gain=%.3e max|dM|=%.3e", t + 1, q_new, gain, dm)
        if gain < rule.eps_q:
            trace.converged_by = "eps_q"
            break
        if dm < rule.eps_m:
            trace.converged_by = "eps_m"
            break
    else:
        trace.converged_by = "max_iter" if rule.max_iter > 0 else "not-run"
    moments = e_step(data, state)
    p_hat = inclusion_matrix(state.M, state.zeta, prior)
    return FitResult(state, moments, p_hat, trace)
