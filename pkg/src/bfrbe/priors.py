"""Spike-and-slab loading priors: default scales, densities and inclusion probabilities.

Normal-type scales are variances, Laplace-type scales are the Laplace scale
``lambda`` (variance ``2 lambda^2``).
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit
from scipy.stats import norm

from .errors import ConfigurationError
from .model import PriorFamily, PriorSpec, expected_spike_slab_precision

__all__ = [
    "default_scales",
    "make_prior",
    "spike_log_density",
    "slab_log_density",
    "log_mixture_density",
    "inclusion_probability",
    "inclusion_matrix",
    "expected_spike_slab_precision",
    "RELEVANCE_THRESHOLD",
]

# m^2 > 0.1 (a tenth of a standardized variable's variance) counts as relevant.
RELEVANCE_THRESHOLD = 0.1
COVERAGE = 0.95
_EXP_CLAMP = 700.0


def mom_tail_mass(lam, t):
    """``P(|m| >= t)`` under the Normal-moment slab ``m^2/lam N(m; 0, lam)``."""
    s = t / np.sqrt(lam)
    return 2.0 * (norm.sf(s) + s * norm.pdf(s))


def laplace_mom_tail_mass(lam, t):
    """``P(|m| >= t)`` under the Laplace-moment slab ``m^2/(2 lam^2) Laplace(m; 0, lam)``."""
    x = t / lam
    return np.exp(-x) * (1.0 + x + 0.5 * x * x)


def _solve_tail(tail, t, target):
    # tail mass increases with the scale; bracket then bisect
    lo, hi = 1e-8, 1.0
    while tail(hi, t) < target:
        hi *= 2.0
    return brentq(lambda lam: tail(lam, t) - target, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=500)


def default_scales(family) -> tuple[float, float]:
    """Default ``(lambda0, lambda1)`` derived from the 0.1 relevance threshold."""
    family = PriorFamily.parse(family)
    if family is PriorFamily.FLAT:
        raise ConfigurationError("the flat prior has no spike/slab scales")
    t = np.sqrt(RELEVANCE_THRESHOLD)
    if family in (PriorFamily.MOM_SS, PriorFamily.NORMAL_SS):
        lam0 = RELEVANCE_THRESHOLD / norm.ppf((1.0 - COVERAGE) / 2.0) ** 2
        lam1 = _solve_tail(mom_tail_mass, t, COVERAGE)
        if family is PriorFamily.NORMAL_SS:
            lam1 *= 3.0  # Normal slab variance matched to the moment slab's 3*lambda
        return float(lam0), float(lam1)
    lam0 = -t / np.log(1.0 - COVERAGE)
    lam1 = _solve_tail(laplace_mom_tail_mass, t, COVERAGE)
    if family is PriorFamily.LAPLACE_SS:
        lam1 *= np.sqrt(6.0)  # 2 lambda^2 matched to the Laplace-moment variance 12 lambda^2
    return float(lam0), float(lam1)


def make_prior(family, **overrides) -> PriorSpec:
    """PriorSpec for ``family`` with default scales unless overridden."""
    family = PriorFamily.parse(family)
    if family.is_spike_slab:
        lam0, lam1 = default_scales(family)
        overrides.setdefault("lambda0", lam0)
        overrides.setdefault("lambda1", lam1)
    return PriorSpec(family=family, **overrides)


def _normal_logpdf(m, var):
    return -0.5 * np.log(2.0 * np.pi * var) - 0.5 * m * m / var


def _laplace_logpdf(m, lam):
    return -np.log(2.0 * lam) - np.abs(m) / lam


def spike_log_density(m, family, lambda0):
    family = PriorFamily.parse(family)
    m = np.asarray(m, dtype=float)
    if family.is_laplace:
        return _laplace_logpdf(m, lambda0)
    return _normal_logpdf(m, lambda0)


def slab_log_density(m, family, lambda1):
    """Log density of the slab; ``-inf`` at 0 for the moment (non-local) slabs."""
    family = PriorFamily.parse(family)
    if family is PriorFamily.FLAT:
        raise ConfigurationError("the flat prior has no slab density")
    m = np.asarray(m, dtype=float)
    with np.errstate(divide="ignore"):
        log_m2 = 2.0 * np.log(np.abs(m))
    if family is PriorFamily.NORMAL_SS:
        return _normal_logpdf(m, lambda1)
    if family is PriorFamily.MOM_SS:
        return log_m2 - np.log(lambda1) + _normal_logpdf(m, lambda1)
    if family is PriorFamily.LAPLACE_SS:
        return _laplace_logpdf(m, lambda1)
    return log_m2 - np.log(2.0 * lambda1**2) + _laplace_logpdf(m, lambda1)


def log_mixture_density(m, zeta, prior: PriorSpec):
    """``log[(1 - zeta) spike(m) + zeta slab(m)]`` elementwise (zeta broadcasts over columns)."""
    m = np.asarray(m, dtype=float)
    zeta = np.broadcast_to(np.asarray(zeta, dtype=float), m.shape)
    with np.errstate(divide="ignore"):
        a = np.log1p(-zeta) + spike_log_density(m, prior.family, prior.lambda0)
        b = np.log(zeta) + slab_log_density(m, prior.family, prior.lambda1)
    return np.logaddexp(a, b)


def _log_spike_slab_ratio(m, family, lambda0, lambda1):
    """``log[spike(m) / slab(m)]`` in the closed forms used for p_hat."""
    m = np.asarray(m, dtype=float)
    m2 = m * m
    with np.errstate(divide="ignore"):
        log_m2 = 2.0 * np.log(np.abs(m))
        if family is PriorFamily.NORMAL_SS:
            return 0.5 * np.log(lambda1 / lambda0) - 0.5 * m2 * (1.0 / lambda0 - 1.0 / lambda1)
        if family is PriorFamily.MOM_SS:
            return (
                np.log(lambda1) - log_m2 + 0.5 * np.log(lambda1 / lambda0)
                - 0.5 * m2 * (1.0 / lambda0 - 1.0 / lambda1)
            )
        if family is PriorFamily.LAPLACE_SS:
            return np.log(lambda1 / lambda0) - np.abs(m) * (1.0 / lambda0 - 1.0 / lambda1)
        return (
            np.log(2.0 * lambda1**2) - log_m2 + np.log(lambda1 / lambda0)
            - np.abs(m) * (1.0 / lambda0 - 1.0 / lambda1)
        )


def _inclusion(m, zeta, family, lambda0, lambda1):
    m = np.asarray(m, dtype=float)
    zeta = np.broadcast_to(np.asarray(zeta, dtype=float), m.shape)
    log_ratio = _log_spike_slab_ratio(m, family, lambda0, lambda1)
    with np.errstate(divide="ignore"):
        log_odds = np.log1p(-zeta) - np.log(zeta)
    # inf - inf cannot occur: the ratio is only +inf at m = 0 for moment slabs
    z = np.clip(log_ratio + log_odds, -_EXP_CLAMP, _EXP_CLAMP)
    p = expit(-z)
    p = np.where(zeta <= 0.0, 0.0, p)
    p = np.where(zeta >= 1.0, 1.0, p)
    if family.is_nonlocal:
        p = np.where(m == 0.0, 0.0, p)
    return p


def inclusion_probability(m, family, lambda0, lambda1, zeta) -> float:
    """Posterior probability that loading ``m`` came from the slab.

    ``zeta`` of exactly 0 or 1 is treated as the degenerate limit (returns 0 or 1).
    """
    family = PriorFamily.parse(family)
    if family is PriorFamily.FLAT:
        raise ConfigurationError("inclusion probabilities need a spike-and-slab family")
    return float(_inclusion(m, zeta, family, lambda0, lambda1))


def inclusion_matrix(M, zeta, prior: PriorSpec) -> np.ndarray:
    """``p_hat`` for every loading; column ``k`` uses the factor weight ``zeta_k``."""
    if not prior.family.is_spike_slab:
        return np.ones_like(np.asarray(M, dtype=float))
    return _inclusion(M, np.asarray(zeta)[None, :], prior.family, prior.lambda0, prior.lambda1)
