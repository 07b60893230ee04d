"""Synthetic scenarios and the reconstruction metrics reported by the benchmark.

Randomness comes from numpy's PCG64. Replicate ``r`` of a scenario seeded
with ``seed`` draws from ``SeedSequence([seed, scenario_key, r])``, so any
replicate can be regenerated on its own.
"""
from __future__ import annotations

import enum
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError
from .model import ModelState, ObservationSet

GRID_LEVELS = 21
BAND_OVERLAP = 1.3


class LoadingKind(str, enum.Enum):
    SPARSE_BANDED = "sparse"
    DENSE_GRID = "dense"


@dataclass(frozen=True)
class ScenarioSpec:
    n: int = 100
    p: int = 1000
    q_true: int = 10
    q_fit: int = 10
    loading_kind: LoadingKind = LoadingKind.SPARSE_BANDED
    batch_effects: bool = False
    seed: int = 0
    band_width: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "loading_kind", LoadingKind(self.loading_kind))
        if not (1 <= self.q_true <= self.p and self.q_fit >= 1 and self.n >= 2):
            raise ConfigurationError(f"invalid scenario sizes: {self}")

    @property
    def key(self) -> int:
        """Stable integer identifying the scenario (excluding the seed) for stream splitting."""
        d = asdict(self)
        d.pop("seed")
        text = repr(sorted((k, str(v.value if isinstance(v, enum.Enum) else v)) for k, v in d.items()))
        return zlib.crc32(text.encode())

    def rng(self, replicate: int = 0) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.key, replicate])))


def band_width(p: int, q_true: int) -> int:
    stride = p // q_true
    return (13 * stride + 5) // 10  # round(1.3 * stride), halves up


def make_loadings(kind, p: int, q_true: int, width: int | None = None) -> np.ndarray:
    """Ground-truth loadings: overlapping unit bands, or a deterministic dense grid in (-1, 1)."""
    kind = LoadingKind(kind)
    M = np.zeros((p, q_true))
    if kind is LoadingKind.SPARSE_BANDED:
        stride = p // q_true
        w = band_width(p, q_true) if width is None else int(width)
        for k in range(q_true):
            M[(k * stride + np.arange(w)) % p, k] = 1.0
        return M
    j, k = np.meshgrid(np.arange(p), np.arange(q_true), indexing="ij")
    g = (j * q_true + k) % GRID_LEVELS
    return -1.0 + 2.0 * (g + 1) / (GRID_LEVELS + 1)


def generate(spec: ScenarioSpec, replicate: int = 0):
    """Draw ``(data, truth, Z)`` for one replicate."""
    rng = spec.rng(replicate)
    n, p, q = spec.n, spec.p, spec.q_true
    M = make_loadings(spec.loading_kind, p, q, spec.band_width)
    Z = rng.standard_normal((n, q))
    if not spec.batch_effects:
        E = rng.standard_normal((n, p))
        data = ObservationSet.from_labels(Z @ M.T + E)
        truth = ModelState(M=M, theta=np.zeros((p, 0)), beta=np.zeros((p, 1)), T=np.ones((p, 1)), zeta=np.ones(q))
        return data, truth, Z
    var1 = 0.5
    var = np.array([var1, 1.5 * var1])
    v = rng.uniform(0.0, 3.0, size=n)
    batch = rng.integers(0, 2, size=n)
    while np.bincount(batch, minlength=2).min() < 2:
        batch = rng.integers(0, 2, size=n)
    theta = np.where(np.arange(p) < p // 2, -2.0, 2.0)[:, None]
    beta = np.column_stack([np.zeros(p), np.full(p, 2.0)])
    E = rng.standard_normal((n, p)) * np.sqrt(var[batch])[:, None]
    X = v[:, None] * theta.T + Z @ M.T + beta[:, batch].T + E
    data = ObservationSet.from_labels(X, v[:, None], batch)
    truth = ModelState(M=M, theta=theta, beta=beta, T=np.repeat(1.0 / var[None], p, axis=0), zeta=np.ones(q))
    return data, truth, Z


@dataclass(frozen=True)
class MetricsRow:
    q_hat: float
    m_nonzeros: float
    mean_fn: float
    cov_fn: float
    zm_fn: float
    iterations: float

    CSV_FIELDS = ("q_hat", "M_nonzeros", "mean_fn", "cov_fn", "zm_fn", "iterations")

    def as_csv_values(self):
        return (self.q_hat, self.m_nonzeros, self.mean_fn, self.cov_fn, self.zm_fn, self.iterations)


def frobenius(A) -> float:
    return float(np.sqrt(np.sum(np.square(A))))


def implied_covariances(state: ModelState) -> np.ndarray:
    """``M M^T + T_l^{-1}`` for each batch, shape (p_b, p, p)."""
    MMt = state.M @ state.M.T
    return MMt[None] + np.stack([np.diag(1.0 / state.T[:, l]) for l in range(state.T.shape[1])])


def evaluate(truth: ModelState, Z, data: ObservationSet, fitted: ModelState, ez, q_hat: int,
             iterations: int = 0, include_covariates: bool = False) -> MetricsRow:
    """Reconstruction metrics of a (sparsified) fit against the generating truth.

    ``ez`` are the factor means under ``fitted``. Without covariates the mean
    error is the factor-part error ``||Z M*^T - E[Z] M^T||``; with them it
    compares the full ``V theta^T + Z M^T + B beta^T``. The covariance error
    stacks all batches.
    """
    true_zm = Z @ truth.M.T
    fit_zm = ez @ fitted.M.T
    zm_fn = frobenius(true_zm - fit_zm)
    if include_covariates:
        true_mean = data.V @ truth.theta.T + true_zm + data.B @ truth.beta.T
        fit_mean = data.V @ fitted.theta.T + fit_zm + data.B @ fitted.beta.T
        mean_fn = frobenius(true_mean - fit_mean)
    else:
        mean_fn = zm_fn
    if truth.T.shape[1] == fitted.T.shape[1]:
        cov_fn = frobenius(implied_covariances(truth) - implied_covariances(fitted))
    else:
        cov_fn = float("nan")
    return MetricsRow(
        q_hat=float(q_hat),
        m_nonzeros=float(np.count_nonzero(fitted.M)),
        mean_fn=mean_fn,
        cov_fn=cov_fn,
        zm_fn=zm_fn,
        iterations=float(iterations),
    )
