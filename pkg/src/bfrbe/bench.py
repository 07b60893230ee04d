"""Replicated simulation benchmark: generate, select by CV (or a fixed candidate), evaluate."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .em import StoppingRule
from .parallel import run_tasks
from .selection import Candidate, CvPlan, fit_report, select_best
from .simulate import MetricsRow, ScenarioSpec, evaluate, generate


@dataclass(frozen=True)
class BenchmarkRow:
    model: str
    replicate: int
    candidate: str
    metrics: MetricsRow


def _replicate_task(task) -> BenchmarkRow:
    spec, label, prior, r, rule, plan, fixed = task
    data, truth, Z = generate(spec, r)
    if fixed is None:
        # fold seeds differ per replicate but are tied to the scenario seed
        plan = CvPlan(n_folds=plan.n_folds, seed=spec.seed * 1_000_003 + r, candidates=plan.candidates,
                      threshold=plan.threshold, workers=1)
        _, report = select_best(data, prior, spec.q_fit, rule, plan)
    else:
        report = fit_report(data, prior, spec.q_fit, fixed, rule, plan.threshold)
    row = evaluate(truth, Z, data, report.state, report.moments.ez, report.q_hat,
                   report.trace.iterations, include_covariates=spec.batch_effects)
    return BenchmarkRow(label, r, report.candidate.label, row)


def run_benchmark(
    spec: ScenarioSpec,
    priors: dict,
    replicates: int,
    rule: StoppingRule = StoppingRule(),
    plan: CvPlan = CvPlan(),
    fixed: Optional[Candidate] = None,
    workers: int = 1,
) -> list:
    """Rows for every (prior, replicate), ordered by prior then replicate.

    ``priors`` maps a display name to a PriorSpec. With ``fixed`` the CV step
    is skipped and that candidate is used for every replicate.
    """
    tasks = [(spec, label, prior, r, rule, plan, fixed) for label, prior in priors.items() for r in range(replicates)]
    return run_tasks(_replicate_task, tasks, workers)


def summarize(rows: list) -> list:
    """Mean metrics per model, in first-appearance order."""
    out = []
    for label in dict.fromkeys(r.model for r in rows):
        vals = np.array([r.metrics.as_csv_values() for r in rows if r.model == label], dtype=float)
        out.append((label, MetricsRow(*vals.mean(axis=0))))
    return out


def benchmark_table(rows: list) -> tuple:
    """(header, table rows) in the Table 1/2 column layout."""
    header = ("Model",) + MetricsRow.CSV_FIELDS
    return header, [(label,) + m.as_csv_values() for label, m in summarize(rows)]

