"""
Evaluation quantities: d2 distances, approximation error, SNR,
the Condition-1 initialization check and bias/variance/MSE aggregation.
"""

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .config import CONDITION1_C0, CONDITION1_C1, CONDITION1_CW
from .exceptions import ContractViolation
from .logs import get_logger
from .model import Covariance, ModelParams, SiteCovariance

logger = get_logger(__name__)

# Coordinate whose bias and variance the study reports: first entry of mu_0.
TRACKED_CLASS = 0
TRACKED_COORD = 0


def _check_shapes(theta: ModelParams, theta_ref: ModelParams) -> None:
    if theta.means.shape != theta_ref.means.shape or theta.proportions.shape != theta_ref.proportions.shape:
        raise ContractViolation(
            f"parameter shapes differ: means {theta.means.shape} vs {theta_ref.means.shape}, "
            f"proportions {theta.proportions.shape} vs {theta_ref.proportions.shape}"
        )


def best_label_order(means: np.ndarray, reference_means: np.ndarray) -> List[int]:
    """
    Class order of `means` that best matches `reference_means`.

    Two classes keep their labels only when the summed distances to the
    reference are strictly smaller than after a swap; ties swap. Larger
    models search every permutation for the smallest squared distance.
    """
    means = np.asarray(means, dtype=float)
    reference_means = np.asarray(reference_means, dtype=float)
    if means.shape != reference_means.shape:
        raise ContractViolation(f"mean shapes differ: {means.shape} vs {reference_means.shape}")
    if means.shape[0] == 2:
        keep = np.linalg.norm(means[0] - reference_means[0]) + np.linalg.norm(means[1] - reference_means[1])
        swap = np.linalg.norm(means[0] - reference_means[1]) + np.linalg.norm(means[1] - reference_means[0])
        return [0, 1] if keep < swap else [1, 0]
    identity = list(range(means.shape[0]))
    best, best_cost = identity, float(np.sum((means - reference_means) ** 2))
    for order in itertools.permutations(identity):
        cost = float(np.sum((means[list(order)] - reference_means) ** 2))
        if cost < best_cost:
            best, best_cost = list(order), cost
    return best


def align_labels(theta: ModelParams, theta_ref: ModelParams) -> ModelParams:
    """Relabel theta's classes to agree with theta_ref."""
    _check_shapes(theta, theta_ref)
    order = best_label_order(theta.means, theta_ref.means)
    if order == list(range(theta.n_classes)):
        return theta
    return theta.permute_labels(order)


def d2_full(theta: ModelParams, theta_ref: ModelParams, align: bool = True) -> float:
    """
    (sum_j |lambda_j - lambda_j'|^2)^(1/2) + sum_c ||mu_c - mu_c'||.

    Args:
        theta: Parameters to measure
        theta_ref: Reference parameters
        align: Relabel theta against theta_ref first

    Returns:
        Distance between the two parameter sets
    """
    _check_shapes(theta, theta_ref)
    if align:
        theta = align_labels(theta, theta_ref)
    free = theta.proportions[:, 1:] - theta_ref.proportions[:, 1:]
    lambda_part = math.sqrt(float(np.sum(free ** 2)))
    mean_part = float(np.sum(np.linalg.norm(theta.means - theta_ref.means, axis=1)))
    return lambda_part + mean_part


def d2_site(theta_j: ModelParams, theta_j_ref: ModelParams, align: bool = True) -> float:
    """Single-site d2: |lambda_j - lambda_j'| + sum_c ||mu_c - mu_c'||."""
    if theta_j.n_sites != 1 or theta_j_ref.n_sites != 1:
        raise ContractViolation("d2_site expects single-site parameter views")
    return d2_full(theta_j, theta_j_ref, align=align)


def approximation_error(mu_tilde: np.ndarray, mu_hat: np.ndarray) -> float:
    """||mu_tilde - mu_hat|| / ||mu_hat|| over the stacked mean vectors."""
    mu_tilde = np.asarray(mu_tilde, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    if mu_tilde.shape != mu_hat.shape:
        raise ContractViolation(f"mean shapes differ: {mu_tilde.shape} vs {mu_hat.shape}")
    denominator = float(np.linalg.norm(mu_hat.ravel()))
    if denominator == 0.0:
        raise ContractViolation("approximation error is undefined for a zero reference")
    return float(np.linalg.norm((mu_tilde - mu_hat).ravel())) / denominator


def snr(mu1: np.ndarray, mu0: np.ndarray, sigma: Union[np.ndarray, SiteCovariance]) -> float:
    """Mahalanobis separation Delta between the two class means."""
    if not isinstance(sigma, SiteCovariance):
        sigma = SiteCovariance.from_matrix(sigma, bound=np.inf)
    return sigma.mahalanobis(mu1, mu0)


def site_snr(means: np.ndarray, cov: Covariance) -> np.ndarray:
    """Delta_j for every site's covariance (two-class means, class 1 first in the difference)."""
    return np.array([site.mahalanobis(means[1], means[0]) for site in cov.sites])


@dataclass(frozen=True)
class Condition1Report:
    """Every intermediate of the initialization radius check."""

    distance: float
    snr: float
    radius: float
    threshold: float
    terms: Dict[str, float]
    passed: bool
    c0: float
    c1: float
    cw: float
    eigen_bound: float

    def as_row(self) -> Dict[str, float]:
        row = {
            "snr": self.snr,
            "init_d2": self.distance,
            "radius": self.radius,
            "threshold": self.threshold,
            "passed": int(self.passed),
        }
        row.update(self.terms)
        return row


def condition1_terms(c0: float, c1: float, cw: float, eigen_bound: float, delta: float) -> Dict[str, float]:
    if not (0.0 < c0 <= cw < 0.5 < c1 < 1.0):
        raise ContractViolation(f"need 0 < c0 <= cw < 1/2 < c1 < 1, got c0={c0}, cw={cw}, c1={c1}")
    if eigen_bound < 1.0:
        raise ContractViolation(f"eigenvalue bound must be >= 1, got {eigen_bound}")
    if delta <= 0.0:
        raise ContractViolation("Condition-1 radius needs a positive SNR")
    m = eigen_bound
    root_m = math.sqrt(m)
    return {
        "term_eigen": m ** 1.5 / 4.0,
        "term_weights": abs(c0 - cw) / delta,
        "term_lambda": math.sqrt((2.0 * c1 - 1.0) / m + 4.0 / m) - 2.0 / root_m,
        "term_means": math.sqrt(c1 / m + (m + 1.0 / m + 2.0) / 4.0) - (root_m + 1.0 / root_m) / 2.0,
    }


def condition1_radius_check(
    theta0: ModelParams,
    theta_star: ModelParams,
    cov: Union[Covariance, np.ndarray],
    c0: float = CONDITION1_C0,
    c1: float = CONDITION1_C1,
    cw: float = CONDITION1_CW,
    eigen_bound: Optional[float] = None,
) -> Condition1Report:
    """
    Report whether d2(theta0, theta*) <= r * Delta.

    With site-specific covariances the smallest per-site Delta is used.
    The outcome is a diagnostic; callers log it and carry on.
    """
    if not isinstance(cov, Covariance):
        cov = Covariance.shared(cov, theta_star.n_sites, bound=np.inf)
    m = cov.eigen_bound if eigen_bound is None else eigen_bound
    delta = float(site_snr(theta_star.means, cov).min())
    terms = condition1_terms(c0, c1, cw, m, delta)
    radius = min(terms.values())
    distance = d2_full(theta0, theta_star)
    threshold = radius * delta
    passed = distance <= threshold
    logger.debug(
        "Condition 1: d2=%.4g threshold=%.4g (r=%.4g, Delta=%.4g, M=%.4g) passed=%s",
        distance, threshold, radius, delta, m, passed,
    )
    return Condition1Report(distance, delta, radius, threshold, terms, passed, c0, c1, cw, m)


@dataclass(frozen=True)
class EstimatorOutcome:
    """One estimator's result in one replication, aligned to the truth."""

    estimator: str
    means: Optional[np.ndarray] = None
    proportions: Optional[np.ndarray] = None
    bias: float = float("nan")
    sq_error: float = float("nan")
    truth_distance: Optional[float] = None
    error: Optional[str] = None
    log_likelihood_monotone: Optional[bool] = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    @classmethod
    def from_estimate(
        cls,
        estimator: str,
        means: np.ndarray,
        truth: ModelParams,
        proportions: Optional[np.ndarray] = None,
        log_likelihood_monotone: Optional[bool] = None,
    ) -> "EstimatorOutcome":
        means = np.asarray(means, dtype=float)
        order = best_label_order(means, truth.means)
        aligned = means[order]
        truth_distance = None
        if proportions is not None:
            proportions = np.asarray(proportions, dtype=float)[:, order]
            truth_distance = d2_full(ModelParams(aligned, proportions), truth, align=False)
        bias = float(aligned[TRACKED_CLASS, TRACKED_COORD] - truth.means[TRACKED_CLASS, TRACKED_COORD])
        sq_error = float(np.sum((aligned - truth.means) ** 2)) / aligned.size
        if not (math.isfinite(bias) and math.isfinite(sq_error)):
            raise ContractViolation(f"{estimator} produced non-finite estimates")
        return cls(
            estimator, aligned, proportions, bias, sq_error, truth_distance,
            log_likelihood_monotone=log_likelihood_monotone,
        )

    @classmethod
    def failure(cls, estimator: str, error: str) -> "EstimatorOutcome":
        return cls(estimator, error=error)


@dataclass(frozen=True)
class ReplicationSummary:
    replication: int
    outcomes: Dict[str, EstimatorOutcome] = field(default_factory=dict)
    cell: Dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class EstimatorStats:
    estimator: str
    bias: float
    variance: float
    mse: float
    replications: int
    failures: int


def aggregate(replications: Sequence[ReplicationSummary]) -> Dict[str, EstimatorStats]:
    """
    Per-estimator mean bias, unbiased variance of the tracked coordinate and MSE.

    Failed replications are counted and left out of the statistics.
    """
    if len(replications) < 2:
        raise ContractViolation(f"aggregate needs at least 2 replications, got {len(replications)}")
    estimators: List[str] = []
    for summary in replications:
        for name in summary.outcomes:
            if name not in estimators:
                estimators.append(name)

    stats = {}
    for name in estimators:
        outcomes = [s.outcomes[name] for s in replications if name in s.outcomes]
        good = [o for o in outcomes if not o.failed]
        failures = len(outcomes) - len(good)
        biases = np.array([o.bias for o in good])
        errors = np.array([o.sq_error for o in good])
        if len(good) < 2:
            logger.warning("%s: only %d successful replications", name, len(good))
        bias = float(biases.mean()) if len(good) else float("nan")
        variance = float(biases.var(ddof=1)) if len(good) >= 2 else float("nan")
        mse = float(errors.mean()) if len(good) else float("nan")
        stats[name] = EstimatorStats(name, bias, variance, mse, len(good), failures)
    return stats
