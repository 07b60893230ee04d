"""Command-line interface: ``bfrbe {fit,cv,simulate,benchmark}``.

Every option can also be given in a ``key = value`` config file passed with
``--config``; command-line flags take precedence. Failures exit with a status
per error category and a one-line JSON description on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np

from .bench import benchmark_table, run_benchmark
from .em import StoppingRule
from .errors import BfrbeError, ConfigurationError, DataError, InternalError
from .initialization import InitKind, InitStrategy
from .model import ObservationSet, PriorFamily
from .parallel import available_workers
from .postprocess import SelectionMode, standardize_factors
from .priors import make_prior
from .selection import Candidate, CvPlan, default_candidates, fit_report, select_best
from .simulate import LoadingKind, ScenarioSpec, generate

log = logging.getLogger("bfrbe")

EXIT_CODES = {"config": 2, "data": 3, "numerical": 4, "internal": 5}
SD_FLOOR = 1e-12

# defaults live here rather than in argparse so config-file values can fill gaps
DEFAULTS = {
    "prior": "mom-ss",
    "q": None,
    "eps_q": 0.001,
    "eps_m": 0.05,
    "max_iter": 100,
    "seed": 0,
    "threshold": 0.5,
    "no_standardize": False,
    "threads": None,
    "out": None,
    "x": None,
    "v": None,
    "batch_column": None,
    "init": "ls-varimax",
    "mode": "per-loading",
    "folds": 10,
    "n": 100,
    "p": 1000,
    "q_true": 10,
    "loading": "sparse",
    "batch_effects": False,
    "replicate": 0,
    "replicates": 10,
    "priors": "mom-ss",
    "select": "cv",
}
BOOL_KEYS = {"no_standardize", "batch_effects"}
INT_KEYS = {"q", "max_iter", "seed", "threads", "folds", "n", "p", "q_true", "replicate", "replicates"}
FLOAT_KEYS = {"eps_q", "eps_m", "threshold"}


# ------------------------------------------------------------------ I/O


def fmt(x) -> str:
    """Shortest decimal that round-trips to the same double."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def write_matrix(path: Path, header, A):
    write_csv(path, header, np.asarray(A).tolist())


def read_table(path):
    """Header and string rows of a CSV file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"input file not found: {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}: line {i} has {len(r)} fields, header has {len(header)}")
    return header, body


def _numeric(path, header, body, cols):
    out = np.empty((len(body), len(cols)))
    for i, r in enumerate(body):
        for jj, j in enumerate(cols):
            try:
                out[i, jj] = float(r[j])
            except ValueError:
                raise DataError(f"{path}: non-numeric value {r[j]!r} at row {i + 1}, column {header[j]!r}") from None
            if not np.isfinite(out[i, jj]):
                raise DataError(f"{path}: non-finite value at row {i + 1}, column {header[j]!r}")
    return out


def standardize_columns(X, names):
    sd = X.std(axis=0, ddof=1)
    bad = np.flatnonzero(~(sd > SD_FLOOR))
    if bad.size:
        raise DataError(f"column {names[bad[0]]!r} has zero standard deviation and cannot be standardized")
    return (X - X.mean(axis=0)) / sd


def ingest(x_path, v_path=None, batch_column=None, standardize=True):
    """Read ``(ObservationSet, variable names, covariate names, batch labels)``.

    Batch labels are taken as strings and sorted lexicographically to define
    the one-hot columns.
    """
    header, body = read_table(x_path)
    if len(body) < 2:
        raise DataError(f"{x_path}: need at least 2 rows, found {len(body)}")
    if batch_column is not None and batch_column not in header:
        raise ConfigurationError(f"batch column {batch_column!r} not in {x_path}")
    bcol = header.index(batch_column) if batch_column is not None else None
    cols = [j for j in range(len(header)) if j != bcol]
    names = [header[j] for j in cols]
    X = _numeric(x_path, header, body, cols)
    if bcol is None:
        labels, batch = ["all"], np.zeros(len(body), dtype=int)
    else:
        raw = [r[bcol] for r in body]
        labels = sorted(set(raw))
        index = {lab: i for i, lab in enumerate(labels)}
        batch = np.array([index[v] for v in raw])
    V, v_names = None, []
    if v_path is not None:
        vh, vb = read_table(v_path)
        if len(vb) != len(body):
            raise DataError(f"{v_path} has {len(vb)} rows but {x_path} has {len(body)}")
        V, v_names = _numeric(v_path, vh, vb, range(len(vh))), list(vh)
    if standardize:
        X = standardize_columns(X, names)
    return ObservationSet.from_labels(X, V, batch), names, v_names, labels


# ------------------------------------------------------------------ config


def read_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    out = {}
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{i}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise ConfigurationError(f"{path}:{i}: unknown key {key!r}")
        out[key] = value
    return out


def _coerce(key, value):
    if value is None or not isinstance(value, str):
        return value
    try:
        if key in BOOL_KEYS:
            v = value.lower()
            if v not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(value)
            return v in ("1", "true", "yes")
        if key in INT_KEYS:
            return int(value)
        if key in FLOAT_KEYS:
            return float(value)
    except ValueError:
        raise ConfigurationError(f"invalid value {value!r} for {key}") from None
    return value


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Merge flags over config-file values over defaults."""
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    for key, default in DEFAULTS.items():
        if getattr(args, key, None) is None:
            setattr(args, key, _coerce(key, cfg[key]) if key in cfg else default)
    return args


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bfrbe", description="Sparse Bayesian factor regression with batch effects.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--prior", choices=[f.value for f in PriorFamily])
        p.add_argument("--q", type=int, help="number of factors to fit")
        p.add_argument("--eps-q", type=float, dest="eps_q")
        p.add_argument("--eps-m", type=float, dest="eps_m")
        p.add_argument("--max-iter", type=int, dest="max_iter")
        p.add_argument("--seed", type=int)
        p.add_argument("--threshold", type=float, help="inclusion probability cut (default 0.5)")
        p.add_argument("--threads", type=int, help="worker processes (default: all cores)")
        p.add_argument("--out", help="output directory")

    def data_args(p):
        p.add_argument("--x", help="CSV with a header row, one column per variable")
        p.add_argument("--v", help="covariate CSV with a header row")
        p.add_argument("--batch-column", dest="batch_column", help="column of --x holding batch labels")
        p.add_argument("--no-standardize", action="store_true", default=None, dest="no_standardize")

    p = sub.add_parser("fit", help="fit one model and write its estimates")
    common(p)
    data_args(p)
    p.add_argument("--init", choices=[InitKind.LEAST_SQUARES.value, InitKind.LEAST_SQUARES_VARIMAX.value])
    p.add_argument("--mode", choices=[m.value for m in SelectionMode])

    p = sub.add_parser("cv", help="choose among the four candidate fits by weighted cross-validation")
    common(p)
    data_args(p)
    p.add_argument("--folds", type=int)

    def scenario(p):
        p.add_argument("--n", type=int)
        p.add_argument("--p", type=int)
        p.add_argument("--q-true", type=int, dest="q_true")
        p.add_argument("--loading", choices=[k.value for k in LoadingKind])
        p.add_argument("--batch-effects", action="store_true", default=None, dest="batch_effects")

    p = sub.add_parser("simulate", help="write one synthetic dataset and its truth")
    common(p)
    scenario(p)
    p.add_argument("--replicate", type=int)

    p = sub.add_parser("benchmark", help="replicated simulation with reconstruction metrics")
    common(p)
    scenario(p)
    p.add_argument("--replicates", type=int)
    p.add_argument("--priors", help="comma-separated prior families (default mom-ss)")
    p.add_argument("--select", help="'cv' or a fixed candidate such as ls-varimax/per-loading")
    p.add_argument("--folds", type=int)
    return parser


# ------------------------------------------------------------------ commands


def _rule(a) -> StoppingRule:
    return StoppingRule(eps_q=a.eps_q, max_iter=a.max_iter, eps_m=a.eps_m)


def _workers(a) -> int:
    if a.threads is not None and a.threads < 1:
        raise ConfigurationError("--threads must be at least 1")
    return a.threads or available_workers()


def _check_common(a):
    if a.q is not None and a.q < 1:
        raise ConfigurationError("--q must be at least 1")
    if not 0.0 <= a.threshold <= 1.0:
        raise ConfigurationError("--threshold must lie in [0, 1]")
    if a.out is None:
        raise ConfigurationError("--out is required")
    PriorFamily.parse(a.prior)
    _rule(a)
    _workers(a)


def _parse_candidate(text) -> Candidate:
    try:
        kind, mode = text.split("/")
        return Candidate(InitStrategy(InitKind(kind)), SelectionMode(mode))
    except ValueError:
        raise ConfigurationError(f"unknown candidate {text!r}; use e.g. ls-varimax/per-loading") from None


def _load(a):
    if a.x is None:
        raise ConfigurationError("--x is required")
    if a.q is None:
        raise ConfigurationError("--q is required")
    return ingest(a.x, a.v, a.batch_column, standardize=not a.no_standardize)


def write_fit(out: Path, data, report, names, v_names, labels, prior, extra: dict):
    q = report.state.q
    fac = [f"factor_{k + 1}" for k in range(q)]
    write_matrix(out / "M_hat.csv", fac, report.state.M)
    write_matrix(out / "gamma.csv", fac, report.selection.gamma)
    write_matrix(out / "theta_beta.csv", [f"theta_{v}" for v in v_names] + [f"beta_{b}" for b in labels],
                 np.hstack([report.state.theta, report.state.beta]))
    write_matrix(out / "tau.csv", [f"tau_{b}" for b in labels], report.state.T)
    write_matrix(out / "factors.csv", fac, standardize_factors(data, report.state, report.moments))
    tr = report.trace
    write_csv(out / "trace.csv", ("iteration", "q_value", "q_gain", "log_posterior", "max_delta_m"),
              zip(range(1, tr.iterations + 1), tr.q_values, tr.q_gains, tr.log_posteriors, tr.m_deltas))
    summary = {
        "prior": prior.family.value,
        "q": q,
        "q_hat": report.q_hat,
        "M_nonzeros": report.n_nonzero,
        "iterations": tr.iterations,
        "converged_by": tr.converged_by,
        "final_q": tr.q_values[-1] if tr.q_values else None,
        "candidate": report.candidate.label,
        "factor_order": [int(k) + 1 for k in report.selection.order],
        "zeta": [float(z) for z in report.state.zeta],
        "variables": names,
    }
    summary.update(extra)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_fit(a, out: Path):
    data, names, v_names, labels = _load(a)
    prior = make_prior(a.prior)
    cand = Candidate(InitStrategy(InitKind(a.init)), SelectionMode(a.mode))
    report = fit_report(data, prior, a.q, cand, _rule(a), a.threshold)
    write_fit(out, data, report, names, v_names, labels, prior, {})


def cmd_cv(a, out: Path):
    data, names, v_names, labels = _load(a)
    prior = make_prior(a.prior)
    plan = CvPlan(n_folds=a.folds, seed=a.seed, candidates=default_candidates(), threshold=a.threshold,
                  workers=_workers(a))
    best, report = select_best(data, prior, a.q, _rule(a), plan)
    write_csv(out / "cv.csv", ("candidate", "cv_error", "selected"),
              [(c.label, e, int(i == best)) for i, (c, e) in enumerate(zip(plan.candidates, report.cv_errors))])
    write_fit(out, data, report, names, v_names, labels, prior, {"cv_error": report.cv_error})


def _scenario(a) -> ScenarioSpec:
    return ScenarioSpec(n=a.n, p=a.p, q_true=a.q_true, q_fit=a.q or a.q_true, loading_kind=a.loading,
                        batch_effects=a.batch_effects, seed=a.seed)


def cmd_simulate(a, out: Path):
    spec = _scenario(a)
    data, truth, Z = generate(spec, a.replicate)
    names = [f"x{j + 1}" for j in range(spec.p)]
    header = names + (["batch"] if spec.batch_effects else [])
    rows = data.X.tolist()
    if spec.batch_effects:
        rows = [r + [str(int(b))] for r, b in zip(rows, data.batch)]
    write_csv(out / "X.csv", header, rows)
    if data.p_v:
        write_matrix(out / "V.csv", ["v"], data.V)
    write_matrix(out / "M_true.csv", [f"factor_{k + 1}" for k in range(spec.q_true)], truth.M)
    write_matrix(out / "Z.csv", [f"factor_{k + 1}" for k in range(spec.q_true)], Z)
    write_matrix(out / "tau_true.csv", [f"tau_{l}" for l in range(truth.T.shape[1])], truth.T)


def cmd_benchmark(a, out: Path):
    spec = _scenario(a)
    families = [s.strip() for s in a.priors.split(",") if s.strip()]
    priors = {PriorFamily.parse(f).value: make_prior(f) for f in families}
    fixed = None if a.select == "cv" else _parse_candidate(a.select)
    plan = CvPlan(n_folds=a.folds, seed=a.seed, threshold=a.threshold)
    rows = run_benchmark(spec, priors, a.replicates, _rule(a), plan, fixed, _workers(a))
    header, table = benchmark_table(rows)
    write_csv(out / "table.csv", header, table)
    write_csv(out / "replicates.csv", ("Model", "replicate", "candidate") + header[1:],
              [(r.model, r.replicate, r.candidate) + r.metrics.as_csv_values() for r in rows])


COMMANDS = {"fit": cmd_fit, "cv": cmd_cv, "simulate": cmd_simulate, "benchmark": cmd_benchmark}


def _validate(a):
    _check_common(a)
    if a.command in ("fit", "cv"):
        if a.x is None:
            raise ConfigurationError("--x is required")
        if a.q is None:
            raise ConfigurationError("--q is required")
        for path in (a.x, a.v):
            if path is not None and not Path(path).is_file():
                raise ConfigurationError(f"input file not found: {path}")
    if a.command == "fit":
        InitKind(a.init)
        SelectionMode(a.mode)
    if a.command in ("cv", "benchmark"):
        CvPlan(n_folds=a.folds)
    if a.command in ("simulate", "benchmark"):
        _scenario(a)
    if a.command == "benchmark":
        if a.replicates < 1:
            raise ConfigurationError("--replicates must be at least 1")
        for f in a.priors.split(","):
            PriorFamily.parse(f.strip())
        if a.select != "cv":
            _parse_candidate(a.select)


def _setup_logging():
    level = os.environ.get("BFRBE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def run(argv=None) -> int:
    """Execute one command; returns the process exit status."""
    _setup_logging()
    try:
        a = resolve(build_parser().parse_args(argv))
        try:
            _validate(a)
        except ValueError as exc:  # enum lookups
            if isinstance(exc, BfrbeError):
                raise
            raise ConfigurationError(str(exc)) from None
        out = Path(a.out)
        # outputs are assembled in a scratch directory and moved in only on success
        out.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryDirectory(dir=out.parent, prefix=".bfrbe-") as tmp:
            with warnings.catch_warnings():
                warnings.simplefilter("default")
                COMMANDS[a.command](a, Path(tmp))
            out.mkdir(exist_ok=True)
            for f in sorted(Path(tmp).iterdir()):
                shutil.move(str(f), out / f.name)
        return 0
    except BfrbeError as exc:
        return _fail(exc.category, str(exc))
    except (MemoryError, KeyboardInterrupt):
        raise
    except Exception as exc:  # noqa: BLE001 - reported as an internal failure
        log.debug("internal error", exc_info=True)
        return _fail(InternalError.category, f"{type(exc).__name__}: {exc}")


def _fail(category: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": category, "message": message}) + "\n")
    return EXIT_CODES.get(category, EXIT_CODES["internal"])


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
