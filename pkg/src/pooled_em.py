"""
Pooled EM on the union of all site data.

This is the privacy-violating reference the federated estimator is measured
against: it sees every site's observations directly.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .config import DEGENERATE_MASS, KMEANS_RESTARTS, MAX_ITERATIONS, SEED, TOLERANCE
from .exceptions import ContractViolation, DegenerateClassError
from .logs import get_logger
from .metrics import d2_full
from .model import (
    Covariance,
    ModelParams,
    SiteDataset,
    class_weight_sums,
    proportions_from_responsibilities,
    site_e_step,
)

logger = get_logger(__name__)

LIKELIHOOD_SLACK = 1e-9
LAMBDA_INIT_MODES = ("plugin", "profile")


@dataclass(frozen=True)
class EmConfig:
    """Iteration control shared by every EM variant."""

    max_iterations: int = MAX_ITERATIONS
    tolerance: float = TOLERANCE
    seed: int = SEED
    n_classes: int = 2
    kmeans_restarts: int = KMEANS_RESTARTS
    lambda_init: str = "plugin"
    stop_on_convergence: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ContractViolation(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.tolerance > 0.0:
            raise ContractViolation(f"tolerance must be > 0, got {self.tolerance}")
        if self.n_classes < 2:
            raise ContractViolation(f"n_classes must be >= 2, got {self.n_classes}")
        if self.kmeans_restarts < 1:
            raise ContractViolation(f"kmeans_restarts must be >= 1, got {self.kmeans_restarts}")
        if self.lambda_init not in LAMBDA_INIT_MODES:
            raise ContractViolation(f"lambda_init must be one of {LAMBDA_INIT_MODES}, got {self.lambda_init!r}")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    params: ModelParams
    log_likelihood: Optional[float]
    step_distance: Optional[float]
    truth_distance: Optional[float] = None
    uplink_bytes: int = 0
    downlink_bytes: int = 0


@dataclass
class FitTrace:
    """Every iterate of one fit, starting with the initialization at iteration 0."""

    records: List[IterationRecord] = field(default_factory=list)
    converged: bool = False
    reason: str = ""

    @property
    def final(self) -> ModelParams:
        return self.records[-1].params

    @property
    def iterations(self) -> int:
        return len(self.records) - 1

    @property
    def log_likelihoods(self) -> List[Optional[float]]:
        return [record.log_likelihood for record in self.records]

    def means_at(self, iteration: int) -> np.ndarray:
        return self.records[iteration].params.means

    def is_monotone(self, slack: float = LIKELIHOOD_SLACK) -> bool:
        values = [v for v in self.log_likelihoods if v is not None]
        return all(not _decreased(a, b, slack) for a, b in zip(values, values[1:]))

    @property
    def log_likelihood_monotone(self) -> Optional[bool]:
        """is_monotone() for traces that carry log-likelihoods, None otherwise."""
        if all(v is None for v in self.log_likelihoods):
            return None
        return self.is_monotone()


def solve_class_means(precision_weights: np.ndarray, moments: np.ndarray) -> np.ndarray:
    """Solve A_c mu_c = b_c for every class through a Cholesky factorization."""
    means = np.empty_like(moments)
    for c in range(moments.shape[0]):
        try:
            factor = cho_factor(precision_weights[c], lower=True)
        except LinAlgError as e:
            raise DegenerateClassError(c, float(np.trace(precision_weights[c]))) from e
        means[c] = cho_solve(factor, moments[c])
    return means


@dataclass(frozen=True)
class EStep:
    """Per-site responsibilities at one iterate and the pooled log-likelihood there."""

    weights: List[np.ndarray]
    log_likelihood: float


def e_step(datasets: Sequence[SiteDataset], theta: ModelParams, cov: Covariance) -> EStep:
    if len(datasets) != theta.n_sites or cov.n_sites != theta.n_sites:
        raise ContractViolation(
            f"{len(datasets)} datasets, {theta.n_sites} parameter rows, {cov.n_sites} covariances"
        )
    weights, log_likelihood = [], 0.0
    for j, dataset in enumerate(datasets):
        site_weights, site_log_likelihood = site_e_step(
            dataset.observations, theta.means, theta.proportions[j], cov.site(j)
        )
        weights.append(site_weights)
        log_likelihood += site_log_likelihood
    return EStep(weights, log_likelihood)


def pooled_em_step(datasets: Sequence[SiteDataset], theta_t: ModelParams, cov: Covariance) -> ModelParams:
    """
    One EM update M_n(theta_t) on all sites' data.

    Args:
        datasets: One dataset per site, in site order
        theta_t: Current iterate
        cov: Known per-site covariances

    Returns:
        theta_{t+1}: per-site proportions from mean responsibilities and
        class means from precision-weighted responsibility averages
    """
    return m_step(datasets, e_step(datasets, theta_t, cov).weights, cov)


def m_step(datasets: Sequence[SiteDataset], weights: Sequence[np.ndarray], cov: Covariance) -> ModelParams:
    n_classes = weights[0].shape[1]
    dim = datasets[0].dim
    precision_weights = np.zeros((n_classes, dim, dim))
    moments = np.zeros((n_classes, dim))
    class_mass = np.zeros(n_classes)
    proportions = []
    total = 0

    for j, dataset in enumerate(datasets):
        site_cov = cov.site(j)
        proportions.append(proportions_from_responsibilities(weights[j]))
        mass, weighted_sum = class_weight_sums(dataset.observations, weights[j])
        precision_weights += mass[:, np.newaxis, np.newaxis] * site_cov.precision
        for c in range(n_classes):
            moments[c] += weighted_sum[c] @ site_cov.precision
        class_mass += mass
        total += dataset.n_obs

    for c in range(n_classes):
        if class_mass[c] < DEGENERATE_MASS * total:
            raise DegenerateClassError(c, float(class_mass[c]))

    return ModelParams(solve_class_means(precision_weights, moments), np.vstack(proportions))


def run_pooled_em(
    datasets: Sequence[SiteDataset],
    init: ModelParams,
    cov: Covariance,
    config: EmConfig,
    truth: Optional[ModelParams] = None,
) -> FitTrace:
    """
    Iterate pooled EM until successive iterates are within tolerance.

    Args:
        datasets: One dataset per site
        init: Starting parameters
        cov: Known per-site covariances
        config: Iteration control
        truth: Optional true parameters; each record then carries d2 to them

    Returns:
        FitTrace with iteration 0 holding the initialization
    """
    theta = init
    current = e_step(datasets, theta, cov)
    log_likelihood = current.log_likelihood
    trace = FitTrace()
    trace.records.append(IterationRecord(0, theta, log_likelihood, None, _truth_distance(theta, truth)))

    for iteration in range(1, config.max_iterations + 1):
        try:
            updated = m_step(datasets, current.weights, cov)
        except DegenerateClassError as e:
            raise e.at_iteration(iteration) from e

        step = d2_full(updated, theta, align=False)
        current = e_step(datasets, updated, cov)
        new_log_likelihood = current.log_likelihood
        if _decreased(log_likelihood, new_log_likelihood):
            logger.warning(
                "Log-likelihood decreased at iteration %d: %.12g -> %.12g",
                iteration, log_likelihood, new_log_likelihood,
            )
        trace.records.append(
            IterationRecord(iteration, updated, new_log_likelihood, step, _truth_distance(updated, truth))
        )
        logger.debug("Iteration %d: step d2 %.3e, log-likelihood %.10g", iteration, step, new_log_likelihood)
        theta, log_likelihood = updated, new_log_likelihood

        if config.stop_on_convergence and step < config.tolerance:
            trace.converged, trace.reason = True, "tolerance"
            break
    else:
        trace.reason = "max_iterations"

    if config.stop_on_convergence and not trace.converged:
        logger.warning("Pooled EM did not converge within %d iterations", config.max_iterations)
    logger.info("Pooled EM stopped after %d iterations (%s)", trace.iterations, trace.reason)
    return trace


def _truth_distance(theta: ModelParams, truth: Optional[ModelParams]) -> Optional[float]:
    return None if truth is None else d2_full(theta, truth)


def _decreased(before: float, after: float, slack: float = LIKELIHOOD_SLACK) -> bool:
    """True when the log-likelihood fell by more than slack relative to its magnitude."""
    return after < before - slack * max(1.0, abs(before))
