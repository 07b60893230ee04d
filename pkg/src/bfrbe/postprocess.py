"""Turning a converged fit into a sparse, ordered, batch-standardized summary."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .model import LatentMoments, ModelState, ObservationSet


class SelectionMode(str, enum.Enum):
    PER_LOADING = "per-loading"
    PER_FACTOR = "per-factor"


@dataclass(frozen=True)
class SparseSelection:
    """Selected inclusion pattern.

    ``order[k]`` is the original column now in position ``k``; zeroed columns
    keep their slot so shapes stay stable, but do not count towards ``q_hat``.
    """

    gamma: np.ndarray
    m_sparse: np.ndarray
    order: np.ndarray

    @property
    def q_hat(self) -> int:
        return int(np.sum(self.gamma.sum(axis=0) > 0))

    @property
    def n_nonzero(self) -> int:
        return int(np.count_nonzero(self.m_sparse))


def threshold_gamma(state: ModelState, p_hat, mode=SelectionMode.PER_LOADING, threshold: float = 0.5) -> SparseSelection:
    """Keep loadings whose inclusion probability exceeds ``threshold``.

    In per-factor mode a column survives whole if any of its loadings does.
    Exact zeros in M are never marked as included.
    """
    mode = SelectionMode(mode)
    M = np.asarray(state.M)
    keep = (np.asarray(p_hat) > threshold) & (M != 0)
    if mode is SelectionMode.PER_FACTOR:
        keep = np.broadcast_to(keep.any(axis=0), M.shape) & (M != 0)
    gamma = keep.astype(int)
    return SparseSelection(gamma=gamma, m_sparse=np.where(keep, M, 0.0), order=np.arange(M.shape[1]))


def left_order(selection: SparseSelection) -> SparseSelection:
    """Stable sort of columns by decreasing number of included loadings."""
    counts = selection.gamma.sum(axis=0)
    perm = np.argsort(-counts, kind="stable")
    return SparseSelection(
        gamma=selection.gamma[:, perm],
        m_sparse=selection.m_sparse[:, perm],
        order=selection.order[perm],
    )


def apply_selection(state: ModelState, selection: SparseSelection) -> ModelState:
    """State with the sparse, reordered loadings (zeta follows the column order)."""
    return state.replace(M=selection.m_sparse, zeta=state.zeta[selection.order])


def standardize_factors(data: ObservationSet, state: ModelState, moments: LatentMoments) -> np.ndarray:
    """``(I + M^T T_b M) E[z_i]``: factor means with the batch-specific covariance removed."""
    M = state.M
    out = np.empty_like(moments.ez)
    for l, rows in enumerate(data.batch_members):
        P = np.eye(state.q) + M.T @ (state.T[:, l, None] * M)
        out[rows] = moments.ez[rows] @ P
    return out
