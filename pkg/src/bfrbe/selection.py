"""Choosing among candidate fits by precision-weighted K-fold cross-validation.

A candidate pairs an initialization with a post-processing mode. For every
fold the model is refitted on the remaining individuals, the held-out rows are
projected onto the fitted factors, and the residuals are scaled coordinate-wise
by the fitted precisions of each row's batch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .em import FitTrace, StoppingRule, e_step, fit
from .errors import ConfigurationError
from .initialization import InitKind, InitStrategy
from .model import LatentMoments, ModelState, ObservationSet, PriorSpec
from .parallel import run_tasks
from .postprocess import SelectionMode, SparseSelection, apply_selection, left_order, threshold_gamma

log = logging.getLogger(__name__)

TAU_CAP = 1e8
MAX_FOLD_ATTEMPTS = 100


@dataclass(frozen=True)
class Candidate:
    init: InitStrategy
    mode: SelectionMode = SelectionMode.PER_LOADING

    def __post_init__(self):
        object.__setattr__(self, "mode", SelectionMode(self.mode))

    @property
    def label(self) -> str:
        return f"{self.init.kind.value}/{self.mode.value}"


def default_candidates() -> tuple:
    """The four standard candidates in tie-break order."""
    return tuple(
        Candidate(InitStrategy(kind), mode)
        for kind in (InitKind.LEAST_SQUARES, InitKind.LEAST_SQUARES_VARIMAX)
        for mode in (SelectionMode.PER_LOADING, SelectionMode.PER_FACTOR)
    )


@dataclass(frozen=True)
class CvPlan:
    n_folds: int = 10
    seed: int = 0
    candidates: tuple = field(default_factory=default_candidates)
    threshold: float = 0.5
    workers: int = 1

    def __post_init__(self):
        if int(self.n_folds) < 2:
            raise ConfigurationError(f"n_folds must be at least 2, got {self.n_folds}")
        object.__setattr__(self, "candidates", tuple(self.candidates))


@dataclass
class FitReport:
    """A full-data fit after selection: sparse left-ordered state and its summaries."""

    state: ModelState
    selection: SparseSelection
    moments: LatentMoments
    p_hat: np.ndarray
    trace: FitTrace
    candidate: Optional[Candidate] = None
    cv_error: Optional[float] = None
    cv_errors: tuple = ()
    n_cv_fits: int = 0

    @property
    def q_hat(self) -> int:
        return self.selection.q_hat

    @property
    def n_nonzero(self) -> int:
        return self.selection.n_nonzero


def fold_assignment(data: ObservationSet, n_folds: int, seed: int, eta: float = 1.0) -> np.ndarray:
    """Fold index per individual, stratified by batch.

    Each batch is shuffled and the concatenated order is dealt round-robin, so
    fold sizes differ by at most one. Assignments whose training splits would
    leave a batch too small for the precision update are redrawn.
    """
    n = data.n
    if n_folds > n:
        raise ConfigurationError(f"n_folds={n_folds} exceeds the number of individuals ({n})")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_FOLD_ATTEMPTS):
        order = np.concatenate([rng.permutation(rows) for rows in data.batch_members])
        folds = np.empty(n, dtype=int)
        folds[order] = np.arange(n) % n_folds
        ok = all(
            np.all(np.bincount(data.batch[folds != r], minlength=data.p_b) + eta - 2.0 > 0)
            for r in range(n_folds)
        )
        if ok:
            return folds
    raise ConfigurationError(
        f"no fold assignment after {MAX_FOLD_ATTEMPTS} attempts keeps every batch in every training split; "
        "use fewer folds or larger batches"
    )


def project_factors(X, V, batch, state: ModelState) -> np.ndarray:
    """Posterior factor means of new rows under ``state`` (E-step formula)."""
    Xt = X - V @ state.theta.T - state.beta[:, batch].T
    M, T = state.M, state.T
    ez = np.zeros((X.shape[0], state.q))
    for l in np.unique(batch):
        rows = np.flatnonzero(batch == l)
        MtT = M.T * T[:, l]
        ez[rows] = np.linalg.solve(np.eye(state.q) + MtT @ M, MtT @ Xt[rows].T).T
    return ez


def weighted_residual_norms(X, V, batch, state: ModelState, ez) -> np.ndarray:
    """``||(x_i - theta v_i - M z_i - beta b_i) * tau_{b_i}||_2`` per row, tau capped."""
    fitted = V @ state.theta.T + ez @ state.M.T + state.beta[:, batch].T
    tau = np.minimum(state.T[:, batch].T, TAU_CAP)
    return np.sqrt(np.sum(((X - fitted) * tau) ** 2, axis=1))


def _sparse_fit(data, prior, q, init, rule, mode, threshold):
    res = fit(data, prior, q, init.build(data, q), rule)
    sel = threshold_gamma(res.state, res.p_hat, mode, threshold)
    return res, sel


def _fold_task(task):
    data, prior, q, candidate, rule, threshold, folds, r, unit_precision = task
    train_rows = np.flatnonzero(folds != r)
    test_rows = np.flatnonzero(folds == r)
    res, sel = _sparse_fit(data.subset(train_rows), prior, q, candidate.init, rule, candidate.mode, threshold)
    state = apply_selection(res.state, sel)
    if unit_precision:
        state = state.replace(T=np.ones_like(state.T))
    X, V, batch = data.X[test_rows], data.V[test_rows], data.batch[test_rows]
    ez = project_factors(X, V, batch, state)
    return float(np.sum(weighted_residual_norms(X, V, batch, state, ez)))


def _cv_tasks(data, prior, q, candidate, rule, plan, folds, unit_precision=False):
    return [(data, prior, q, candidate, rule, plan.threshold, folds, r, unit_precision) for r in range(plan.n_folds)]


def weighted_cv_error(
    data: ObservationSet,
    prior: PriorSpec,
    q: int,
    init,
    rule: StoppingRule = StoppingRule(),
    plan: CvPlan = CvPlan(),
    mode=SelectionMode.PER_LOADING,
    unit_precision: bool = False,
) -> float:
    """Precision-weighted reconstruction error of ``init`` + ``mode``, averaged over folds.

    ``unit_precision`` replaces every fitted precision by 1 before projecting
    and weighting, which turns the criterion into plain unweighted CV.
    """
    candidate = init if isinstance(init, Candidate) else Candidate(init, mode)
    folds = fold_assignment(data, plan.n_folds, plan.seed, prior.eta)
    parts = run_tasks(_fold_task, _cv_tasks(data, prior, q, candidate, rule, plan, folds, unit_precision), plan.workers)
    return float(np.sum(parts) / plan.n_folds)


def fit_report(
    data: ObservationSet,
    prior: PriorSpec,
    q: int,
    candidate: Candidate,
    rule: StoppingRule = StoppingRule(),
    threshold: float = 0.5,
) -> FitReport:
    """Fit on all rows, threshold, left-order and recompute the factor moments."""
    res, sel = _sparse_fit(data, prior, q, candidate.init, rule, candidate.mode, threshold)
    sel = left_order(sel)
    state = apply_selection(res.state, sel)
    return FitReport(
        state=state,
        selection=sel,
        moments=e_step(data, state),
        p_hat=res.p_hat[:, sel.order],
        trace=res.trace,
        candidate=candidate,
    )


def select_best(
    data: ObservationSet,
    prior: PriorSpec,
    q: int,
    rule: StoppingRule = StoppingRule(),
    plan: CvPlan = CvPlan(),
):
    """Cross-validate every candidate, refit the winner on all rows.

    Returns ``(index of the winning candidate, FitReport)``; ties go to the
    earlier candidate.
    """
    if not plan.candidates:
        raise ConfigurationError("the CV plan has no candidates")
    folds = fold_assignment(data, plan.n_folds, plan.seed, prior.eta)
    tasks = [t for c in plan.candidates for t in _cv_tasks(data, prior, q, c, rule, plan, folds)]
    parts = np.asarray(run_tasks(_fold_task, tasks, plan.workers)).reshape(len(plan.candidates), plan.n_folds)
    errors = tuple(float(e) for e in parts.sum(axis=1) / plan.n_folds)
    best = int(np.argmin(errors))  # first minimum
    for c, e in zip(plan.candidates, errors):
        log.info("cv %-24s %.10g", c.label, e)
    report = fit_report(data, prior, q, plan.candidates[best], rule, plan.threshold)
    report.cv_error = errors[best]
    report.cv_errors = errors
    report.n_cv_fits = len(tasks)
    return best, report
