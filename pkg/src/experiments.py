"""
Experiment runner behind the command line: simulation sweeps over the study
grid, the approximation-error traces, bias/variance/MSE tables, single fits
on user data and the SNR / Condition-1 report.
"""

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .baselines import LocalFit, average_estimator, local_em, sample_size_weights, uniform_weights
from .config import (
    BIAS_MSE_FILENAME,
    DIAGNOSE_FILENAME,
    ESTIMATES_FILENAME,
    ESTIMATORS,
    FIG1_FAILURES_FILENAME,
    FIG1_FILENAME,
    KMEANS_RESTARTS,
    LEDGER_FILENAME,
    MAX_ITERATIONS,
    MESSAGE_LOG_FILENAME,
    OUTPUT_DIR,
    REPLICATIONS,
    REPLICATIONS_FILENAME,
    SEED,
    STUDY_DIM,
    STUDY_HALF_WIDTHS,
    STUDY_MU0,
    STUDY_MU1,
    STUDY_SIGMA2,
    STUDY_SITES,
    STUDY_SIZES,
    TOLERANCE,
    TRACE_FILENAME,
    TRACE_ITERATIONS,
    WORKERS,
)
from .exceptions import ContractViolation, FederatedEMError
from .federation import CommLedger, Federation
from .logs import get_logger
from .metrics import (
    EstimatorOutcome,
    ReplicationSummary,
    aggregate,
    approximation_error,
    condition1_radius_check,
    site_snr,
)
from .model import Covariance, ModelParams, SiteDataset
from .pooled_em import EmConfig, FitTrace, run_pooled_em
from .simgen import StudyConfig, export_study, generate_study, load_sites
from .surrogate_em import initialize_federation, run_distributed_em

logger = get_logger(__name__)

AVERAGE_WEIGHTS = ("uniform", "size")

FIG1_COLUMNS = ["sigma2", "a", "K", "n", "rep", "iter", "rel_error"]
FIG1_FAILURE_COLUMNS = ["sigma2", "a", "K", "n", "rep", "error"]
BIAS_MSE_COLUMNS = ["sigma2", "a", "K", "n", "estimator", "bias", "variance", "mse", "replications", "failures"]
REPLICATION_COLUMNS = ["sigma2", "a", "K", "n", "rep", "estimator", "bias", "sq_error", "d2_truth", "failed"]
TRACE_COLUMNS = ["iter", "log_likelihood", "step_d2", "bytes_up", "bytes_down"]
LEDGER_COLUMNS = ["round", "uplink_bytes", "downlink_bytes", "uplink_messages", "downlink_messages"]
DIAGNOSE_COLUMNS = [
    "sigma2", "a", "K", "n", "snr", "snr_min", "snr_max", "init_d2", "radius", "threshold", "passed",
    "term_eigen", "term_weights", "term_lambda", "term_means",
]


@dataclass(frozen=True)
class ExperimentPlan:
    """The (K, n, sigma2, a) grid plus everything needed to run it."""

    sites: Tuple[int, ...] = tuple(STUDY_SITES)
    sizes: Tuple[int, ...] = tuple(STUDY_SIZES)
    sigma2: Tuple[float, ...] = tuple(STUDY_SIGMA2)
    half_width: Tuple[float, ...] = tuple(STUDY_HALF_WIDTHS)
    dim: int = STUDY_DIM
    mu1: float = STUDY_MU1
    mu0: float = STUDY_MU0
    replications: int = REPLICATIONS
    estimators: Tuple[str, ...] = tuple(ESTIMATORS)
    seed: int = SEED
    workers: int = WORKERS
    out: str = OUTPUT_DIR
    trace_iterations: int = TRACE_ITERATIONS
    tolerance: float = TOLERANCE
    max_iterations: int = MAX_ITERATIONS
    kmeans_restarts: int = KMEANS_RESTARTS
    lambda_init: str = "plugin"
    average_weights: str = "uniform"

    def __post_init__(self):
        for name in ("sites", "sizes", "sigma2", "half_width", "estimators"):
            values = tuple(getattr(self, name))
            if not values:
                raise ContractViolation(f"experiment grid '{name}' is empty")
            object.__setattr__(self, name, values)
        if self.replications < 1:
            raise ContractViolation(f"replications must be >= 1, got {self.replications}")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ContractViolation(f"unknown estimators {unknown}; choose from {ESTIMATORS}")
        if self.average_weights not in AVERAGE_WEIGHTS:
            raise ContractViolation(f"average_weights must be one of {AVERAGE_WEIGHTS}")
        if self.workers < 1:
            raise ContractViolation(f"workers must be >= 1, got {self.workers}")

    @classmethod
    def from_settings(cls, settings: Dict[str, Any]) -> "ExperimentPlan":
        """Build a plan from merged config-file and CLI values; missing keys keep defaults."""
        known = {k: v for k, v in settings.items() if k in cls.__dataclass_fields__ and v is not None}
        return cls(**known)

    def cells(self) -> List[StudyConfig]:
        """Every grid cell, ordered by sigma2, a, K, n."""
        return [
            StudyConfig(
                n_sites=k, n_per_site=n, dim=self.dim, sigma2=s2, half_width=a,
                mu1=self.mu1, mu0=self.mu0, seed=self.seed,
            )
            for s2 in self.sigma2
            for a in self.half_width
            for k in self.sites
            for n in self.sizes
        ]

    def em_config(self, **overrides) -> EmConfig:
        base = EmConfig(
            max_iterations=self.max_iterations,
            tolerance=self.tolerance,
            seed=self.seed,
            kmeans_restarts=self.kmeans_restarts,
            lambda_init=self.lambda_init,
        )
        return replace(base, **overrides)


def cell_key(cfg: StudyConfig) -> Dict[str, Any]:
    return {"sigma2": cfg.sigma2, "a": cfg.half_width, "K": cfg.n_sites, "n": cfg.n_per_site}


@dataclass
class EstimatorRun:
    estimator: str
    means: np.ndarray
    proportions: Optional[np.ndarray]
    trace: Optional[FitTrace] = None
    ledger: Optional[CommLedger] = None
    extra: Dict[str, Any] = field(default_factory=dict)


class StudyFitter:
    """
    Runs the estimators on one set of site datasets.

    Pooled and distributed fits share one starting point: means from a local
    EM fit at the lead site, proportions chosen by each site in the round-0
    exchange. Local fits are cached so the average estimator reuses the
    lead site's.
    """

    def __init__(
        self,
        datasets: Sequence[SiteDataset],
        cov: Covariance,
        config: EmConfig,
        iteration_config: Optional[EmConfig] = None,
        average_weights: str = "uniform",
        truth: Optional[ModelParams] = None,
        log_path=None,
    ):
        self.datasets = list(datasets)
        self.cov = cov
        self.config = config
        self.iteration_config = iteration_config or config
        self.average_weights = average_weights
        self.truth = truth
        self.log_path = log_path
        self._local: Dict[int, LocalFit] = {}
        self._start: Optional[Tuple[Federation, ModelParams]] = None

    def local_fit(self, index: int) -> LocalFit:
        if index not in self._local:
            self._local[index] = local_em(self.datasets[index], self.cov.subset([index]), self.config)
        return self._local[index]

    def start(self) -> Tuple[Federation, ModelParams]:
        if self._start is None:
            federation = Federation.in_process(self.datasets, self.cov, log_path=self.log_path)
            theta0 = initialize_federation(federation, self.local_fit(0).means, self.config.lambda_init)
            self._start = (federation, theta0)
        return self._start

    def run(self, estimator: str) -> EstimatorRun:
        if estimator == "local":
            fit = self.local_fit(0)
            return EstimatorRun(estimator, fit.means, None, fit.trace)
        if estimator == "average":
            fits = [self.local_fit(j) for j in range(len(self.datasets))]
            if self.average_weights == "size":
                weights = sample_size_weights([fit.n_obs for fit in fits])
            else:
                weights = uniform_weights(len(fits))
            site_proportions = np.vstack([fit.params.proportions for fit in fits])
            return EstimatorRun(
                estimator, average_estimator(fits, weights), None, extra={"site_proportions": site_proportions}
            )
        federation, theta0 = self.start()
        if estimator == "pooled":
            trace = run_pooled_em(self.datasets, theta0, self.cov, self.iteration_config, self.truth)
            return EstimatorRun(estimator, trace.final.means, trace.final.proportions, trace)
        if estimator == "distributed":
            trace = run_distributed_em(federation, theta0, self.iteration_config, self.truth)
            return EstimatorRun(estimator, trace.final.means, trace.final.proportions, trace, federation.ledger)
        raise ContractViolation(f"unknown estimator {estimator!r}")


def run_replication(plan: ExperimentPlan, cfg: StudyConfig, replication: int) -> ReplicationSummary:
    """
    One replication of one grid cell across every requested estimator.

    Estimator failures are recorded in the summary; the run carries on.
    """
    datasets, truth = generate_study(cfg, replication)
    fitter = StudyFitter(datasets, cfg.covariance(), plan.em_config(), average_weights=plan.average_weights)
    outcomes = {}
    for name in plan.estimators:
        try:
            result = fitter.run(name)
            monotone = None if result.trace is None else result.trace.log_likelihood_monotone
            outcomes[name] = EstimatorOutcome.from_estimate(
                name, result.means, truth, result.proportions, log_likelihood_monotone=monotone
            )
        except FederatedEMError as e:
            logger.warning("Replication %d, %s failed: %s", replication, name, e)
            outcomes[name] = EstimatorOutcome.failure(name, f"{type(e).__name__}: {e}")
    logger.info("Finished replication %d of cell %s", replication, cell_key(cfg))
    return ReplicationSummary(replication, outcomes, cell_key(cfg))


def run_trace_replication(plan: ExperimentPlan, cfg: StudyConfig, replication: int) -> List[Dict[str, Any]]:
    """
    Per-iteration relative distance between distributed and pooled means.

    A failed replication yields a single row carrying the error and no iterations.
    """
    datasets, _ = generate_study(cfg, replication)
    iteration_config = plan.em_config(max_iterations=plan.trace_iterations, stop_on_convergence=False)
    fitter = StudyFitter(datasets, cfg.covariance(), plan.em_config(), iteration_config)
    try:
        pooled = fitter.run("pooled").trace
        distributed = fitter.run("distributed").trace
    except FederatedEMError as e:
        logger.warning("Trace replication %d failed: %s", replication, e)
        return [dict(cell_key(cfg), rep=replication, error=f"{type(e).__name__}: {e}")]
    rows = []
    for iteration in range(min(len(pooled.records), len(distributed.records))):
        error = approximation_error(distributed.means_at(iteration), pooled.means_at(iteration))
        rows.append(dict(cell_key(cfg), rep=replication, iter=iteration, rel_error=error))
    return rows


def _replication_task(task):
    plan, cfg, replication = task
    return run_replication(plan, cfg, replication)


def _trace_task(task):
    plan, cfg, replication = task
    return run_trace_replication(plan, cfg, replication)


def run_cell(plan: ExperimentPlan, cfg: StudyConfig) -> List[ReplicationSummary]:
    """Every replication of one cell, spread over plan.workers processes."""
    return _run_tasks(plan, _replication_task, cfg)


def trace_cell(plan: ExperimentPlan, cfg: StudyConfig) -> List[List[Dict[str, Any]]]:
    """Trace rows of every replication of one cell, in replication order."""
    return _run_tasks(plan, _trace_task, cfg)


def _run_tasks(plan: ExperimentPlan, worker: Callable, cfg: StudyConfig) -> list:
    """Run every replication of one cell; results come back in replication order."""
    tasks = [(plan, cfg, r) for r in range(plan.replications)]
    if plan.workers > 1:
        with ProcessPoolExecutor(max_workers=plan.workers) as pool:
            return list(pool.map(worker, tasks))
    return [worker(task) for task in tasks]


def write_csv(path, columns: Sequence[str], rows: Sequence[Dict[str, Any]]) -> Path:
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({column: _cell(row.get(column)) for column in columns})
    return path


def _cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def cmd_reproduce_fig1(plan: ExperimentPlan) -> Path:
    """
    Approximation-error traces: distributed vs pooled means per iteration.

    Failed replications are listed in a separate failures table.

    Returns:
        Path of the trace CSV
    """
    rows, failures = [], []
    for cfg in plan.cells():
        print(f"Tracing cell {cell_key(cfg)} over {plan.replications} replications...")
        for replication_rows in trace_cell(plan, cfg):
            for row in replication_rows:
                (failures if "error" in row else rows).append(row)
    write_csv(Path(plan.out) / FIG1_FAILURES_FILENAME, FIG1_FAILURE_COLUMNS, failures)
    path = write_csv(Path(plan.out) / FIG1_FILENAME, FIG1_COLUMNS, rows)
    logger.info("Wrote %d trace rows to %s", len(rows), path)
    return path


def cmd_reproduce_bias_mse(plan: ExperimentPlan) -> Path:
    """
    Bias, variance and MSE of the tracked coordinate for every estimator and cell.

    Also writes the per-replication table next to the summary.

    Returns:
        Path of the summary CSV
    """
    summary_rows, replication_rows = [], []
    for cfg in plan.cells():
        key = cell_key(cfg)
        print(f"Running cell {key} over {plan.replications} replications...")
        summaries = run_cell(plan, cfg)
        for summary in summaries:
            for name, outcome in summary.outcomes.items():
                replication_rows.append(dict(
                    key, rep=summary.replication, estimator=name, bias=outcome.bias,
                    sq_error=outcome.sq_error, d2_truth=outcome.truth_distance, failed=outcome.failed,
                ))
        if len(summaries) < 2:
            logger.warning("Cell %s has fewer than 2 replications; no summary row", key)
            continue
        for name, stats in aggregate(summaries).items():
            summary_rows.append(dict(
                key, estimator=name, bias=stats.bias, variance=stats.variance, mse=stats.mse,
                replications=stats.replications, failures=stats.failures,
            ))
    write_csv(Path(plan.out) / REPLICATIONS_FILENAME, REPLICATION_COLUMNS, replication_rows)
    path = write_csv(Path(plan.out) / BIAS_MSE_FILENAME, BIAS_MSE_COLUMNS, summary_rows)
    logger.info("Wrote %d summary rows to %s", len(summary_rows), path)
    return path


def cmd_simulate(plan: ExperimentPlan, replication: int = 0) -> List[Path]:
    """Export one replication of every grid cell as site files."""
    cells = plan.cells()
    directories = []
    for cfg in cells:
        directory = Path(plan.out)
        if len(cells) > 1:
            directory = directory / f"sigma2={cfg.sigma2}_a={cfg.half_width}_K={cfg.n_sites}_n={cfg.n_per_site}"
        datasets, truth = generate_study(cfg, replication)
        export_study(datasets, truth, cfg, replication, directory)
        directories.append(directory)
    return directories


def cmd_fit(paths: Sequence, plan: ExperimentPlan, estimator: str, sigma2: float) -> Dict[str, Any]:
    """
    Fit one estimator to site files; the first file is the lead site.

    Writes the estimates as JSON, the iteration trace and, for the
    distributed estimator, the communication ledger and the message log.

    Returns:
        The estimates written to the JSON file
    """
    if estimator not in ESTIMATORS:
        raise ContractViolation(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")
    datasets = load_sites(paths)
    cov = Covariance.isotropic(sigma2, datasets[0].dim, len(datasets))
    out = Path(plan.out)
    os.makedirs(out, exist_ok=True)
    log_path = None
    if estimator == "distributed":
        log_path = out / MESSAGE_LOG_FILENAME
        log_path.unlink(missing_ok=True)
    fitter = StudyFitter(datasets, cov, plan.em_config(), average_weights=plan.average_weights, log_path=log_path)
    result = fitter.run(estimator)

    estimates = {
        "estimator": estimator,
        "site_ids": [d.site_id for d in datasets],
        "means": result.means.tolist(),
        "proportions": None if result.proportions is None else result.proportions.tolist(),
    }
    if "site_proportions" in result.extra:
        estimates["site_proportions"] = result.extra["site_proportions"].tolist()
    if result.trace is not None:
        estimates.update(iterations=result.trace.iterations, converged=result.trace.converged,
                         reason=result.trace.reason)
        write_csv(out / TRACE_FILENAME, TRACE_COLUMNS, trace_rows(result.trace))
    if result.ledger is not None:
        write_csv(out / LEDGER_FILENAME, LEDGER_COLUMNS, result.ledger.rows())
    with open(out / ESTIMATES_FILENAME, "w") as f:
        json.dump(estimates, f, indent=2)
    logger.info("Fitted %s on %d sites; results in %s", estimator, len(datasets), out)
    return estimates


def trace_rows(trace: FitTrace) -> List[Dict[str, Any]]:
    return [
        {
            "iter": record.iteration,
            "log_likelihood": record.log_likelihood,
            "step_d2": record.step_distance,
            "bytes_up": record.uplink_bytes,
            "bytes_down": record.downlink_bytes,
        }
        for record in trace.records
    ]


def cmd_diagnose(plan: ExperimentPlan) -> Path:
    """SNR and Condition-1 report for the first replication of every cell."""
    rows = []
    for cfg in plan.cells():
        datasets, truth = generate_study(cfg, 0)
        cov = cfg.covariance()
        fitter = StudyFitter(datasets, cov, plan.em_config())
        _, theta0 = fitter.start()
        report = condition1_radius_check(theta0, truth, cov)
        deltas = site_snr(truth.means, cov)
        row = dict(cell_key(cfg), snr_min=float(deltas.min()), snr_max=float(deltas.max()))
        row.update(report.as_row())
        rows.append(row)
        logger.info(
            "Cell %s: SNR %.4g, initial d2 %.4g vs threshold %.4g -> %s",
            cell_key(cfg), report.snr, report.distance, report.threshold,
            "inside" if report.passed else "outside",
        )
    return write_csv(Path(plan.out) / DIAGNOSE_FILENAME, DIAGNOSE_COLUMNS, rows)
