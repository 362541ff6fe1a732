"""
Distributed EM through a density-ratio-tilted surrogate Q at the lead site.

The lead site reweights its own observations toward every other site's
mixture, builds a quadratic stand-in for the pooled Q function and adds a
linear correction so the stand-in's gradient at the current means equals
the pooled gradient assembled from the sites' reports. Only the reports
cross the site boundary.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import logsumexp

from .config import MAX_ITERATIONS, TOLERANCE
from .exceptions import ContractViolation, DegenerateTiltError, IncompleteRoundError
from .logs import get_logger
from .messages import GradientReport, MeanBroadcast
from .metrics import d2_full
from .model import (
    Covariance,
    ModelParams,
    SiteCovariance,
    SiteDataset,
    class_weight_sums,
    component_log_densities,
    site_proportion_update,
    tilts_from_log_totals,
    weighted_q_gradient,
)
from .pooled_em import EmConfig, FitTrace, IterationRecord

logger = get_logger(__name__)

RESIDUAL_TOLERANCE = 1e-10


@dataclass(frozen=True)
class RoundInputs:
    """Everything the lead site holds when it assembles round t's surrogate."""

    lead: SiteDataset
    theta: ModelParams
    reports: Sequence[GradientReport]
    lead_index: int = 0
    site_ids: Optional[Sequence[int]] = None

    def ordered_reports(self):
        """Reports in site order; raises if any site is missing or out of round."""
        site_ids = list(self.site_ids) if self.site_ids is not None else [r.site_id for r in self.reports]
        if len(site_ids) != self.theta.n_sites:
            raise ContractViolation(f"{len(site_ids)} sites but theta has {self.theta.n_sites} rows")
        by_site = {report.site_id: report for report in self.reports}
        rounds = {report.round_index for report in self.reports}
        round_index = min(rounds) if rounds else -1
        missing = [site for site in site_ids if site not in by_site]
        if missing or len(rounds) > 1:
            stale = [r.site_id for r in self.reports if r.round_index != round_index]
            raise IncompleteRoundError(round_index, missing + stale)
        return [by_site[site] for site in site_ids]


@dataclass(frozen=True)
class SurrogateQ:
    """
    Q~(mu) = Q-check(mu) + <g_corr, mu>, quadratic in the class means.

    precision_weights[c] is A_c = sum_j s_j sum_i t_ij w_ijc Omega_j and
    moments[c] is b_c = sum_j s_j sum_i t_ij w_ijc Omega_j y_i, with
    s_j = n_j / (N n_lead). Q-check's gradient is b_c - A_c mu_c.
    """

    anchor: np.ndarray
    precision_weights: np.ndarray
    moments: np.ndarray
    correction: np.ndarray
    tilts: np.ndarray
    pooled_gradient: np.ndarray
    tilted_gradient: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.anchor.shape[0]

    @property
    def dim(self) -> int:
        return self.anchor.shape[1]

    def tilted_q_gradient(self, means: np.ndarray) -> np.ndarray:
        means = np.asarray(means, dtype=float).reshape(self.anchor.shape)
        return self.moments - np.einsum("cij,cj->ci", self.precision_weights, means)

    def gradient(self, means: np.ndarray) -> np.ndarray:
        """Gradient of Q~ at the given (S, d) means."""
        return self.tilted_q_gradient(means) + self.correction

    def hessian(self) -> np.ndarray:
        """Block-diagonal (S*d, S*d) Hessian, identical for Q~ and Q-check."""
        size = self.n_classes * self.dim
        hessian = np.zeros((size, size))
        for c in range(self.n_classes):
            block = slice(c * self.dim, (c + 1) * self.dim)
            hessian[block, block] = -self.precision_weights[c]
        return hessian

    def value(self, means: np.ndarray) -> float:
        """Q~ up to an additive constant that does not depend on the means."""
        means = np.asarray(means, dtype=float).reshape(self.anchor.shape)
        quadratic = -0.5 * np.einsum("ci,cij,cj->", means, self.precision_weights, means)
        return float(quadratic + np.sum(self.moments * means) + np.sum(self.correction * means))


def build_surrogate(inputs: RoundInputs, cov: Covariance) -> SurrogateQ:
    """
    Assemble the lead site's surrogate for one round.

    Args:
        inputs: Lead data, current iterate and one report per site
        cov: Known per-site covariances

    Returns:
        SurrogateQ whose gradient at the current means equals the pooled gradient
    """
    reports = inputs.ordered_reports()
    theta, lead = inputs.theta, inputs.lead
    y = lead.observations
    n_lead = lead.n_obs
    sizes = [report.n_obs for report in reports]
    total = sum(sizes)
    lead_cov = cov.site(inputs.lead_index)
    n_classes, dim = theta.means.shape

    # one pass over the lead data per distinct covariance
    log_densities = {}

    def lead_log_densities(site_cov):
        key = id(site_cov)
        if key not in log_densities:
            log_densities[key] = component_log_densities(y, theta.means, site_cov)
        return log_densities[key]

    lead_total = logsumexp(lead_log_densities(lead_cov) + np.log(theta.proportions[inputs.lead_index]), axis=1)

    precision_weights = np.zeros((n_classes, dim, dim))
    moments = np.zeros((n_classes, dim))
    tilted_gradient = np.zeros((n_classes, dim))
    pooled_gradient = np.zeros((n_classes, dim))
    tilts = np.empty((len(reports), n_lead))

    for j, report in enumerate(reports):
        if report.gradient.shape != (n_classes, dim):
            raise ContractViolation(f"site {report.site_id} reported a gradient of shape {report.gradient.shape}")
        site_cov = cov.site(j)
        weighted = lead_log_densities(site_cov) + np.log(theta.proportions[j])
        site_total = logsumexp(weighted, axis=1)
        tilts[j] = tilts_from_log_totals(site_total, lead_total)
        weights = np.exp(weighted - site_total[:, np.newaxis]) * tilts[j][:, np.newaxis]
        scale = sizes[j] / (total * n_lead)
        mass, weighted_sum = class_weight_sums(y, weights)
        precision_weights += scale * mass[:, np.newaxis, np.newaxis] * site_cov.precision
        moments += scale * (weighted_sum @ site_cov.precision)
        tilted_gradient += weighted_q_gradient(y, weights, theta.means, site_cov, scale)
        pooled_gradient += (sizes[j] / total) * report.gradient

    correction = pooled_gradient - tilted_gradient
    return SurrogateQ(
        anchor=theta.means.copy(),
        precision_weights=precision_weights,
        moments=moments,
        correction=correction,
        tilts=tilts,
        pooled_gradient=pooled_gradient,
        tilted_gradient=tilted_gradient,
    )


def maximize_surrogate(sq: SurrogateQ, cov: Optional[Covariance] = None) -> np.ndarray:
    """
    Closed-form argmax of the surrogate: A_c mu_c = b_c + g_corr_c per class.

    Returns:
        (S, d) maximizing means
    """
    rhs = sq.moments + sq.correction
    means = np.empty_like(rhs)
    factors = []
    for c in range(sq.n_classes):
        try:
            factor = cho_factor(sq.precision_weights[c], lower=True)
        except LinAlgError as e:
            raise DegenerateTiltError(c) from e
        factors.append(factor)
        means[c] = cho_solve(factor, rhs[c])

    limit = RESIDUAL_TOLERANCE * (1.0 + np.linalg.norm(sq.gradient(sq.anchor)))
    residual = sq.gradient(means)
    if np.linalg.norm(residual) >= limit:
        # one step of iterative refinement
        for c in range(sq.n_classes):
            means[c] += cho_solve(factors[c], residual[c])
        residual = sq.gradient(means)
        if np.linalg.norm(residual) >= limit:
            logger.warning("Surrogate residual %.3e above %.3e after refinement", np.linalg.norm(residual), limit)
    return means


def update_lambda(site: SiteDataset, theta_j_t: ModelParams, site_cov: SiteCovariance) -> float:
    """Mean class-1 responsibility over the site's observations, clamped."""
    return float(update_proportions(site, theta_j_t, site_cov)[1])


def update_proportions(site: SiteDataset, theta_j_t: ModelParams, site_cov: SiteCovariance) -> np.ndarray:
    return site_proportion_update(site.observations, theta_j_t.means, theta_j_t.proportions[0], site_cov)


def plugin_proportions(site: SiteDataset, means: np.ndarray, site_cov: SiteCovariance) -> np.ndarray:
    """One proportion update from (mu0, uniform proportions)."""
    n_classes = means.shape[0]
    uniform = ModelParams(means, np.full((1, n_classes), 1.0 / n_classes))
    return update_proportions(site, uniform, site_cov)


def profile_proportions(
    site: SiteDataset,
    means: np.ndarray,
    site_cov: SiteCovariance,
    tol: float = TOLERANCE,
    max_iter: int = MAX_ITERATIONS,
) -> np.ndarray:
    """
    Maximize the site's likelihood over its proportions with the means held fixed.

    Fixed-point iteration of the proportion update, started from the plug-in
    value; each step can only raise the site likelihood.
    """
    proportions = plugin_proportions(site, means, site_cov)
    for _ in range(max_iter):
        updated = site_proportion_update(site.observations, means, proportions, site_cov)
        step = float(np.abs(updated - proportions).max())
        proportions = updated
        if step < tol:
            break
    return proportions


def profile_lambda(
    site: SiteDataset,
    means: np.ndarray,
    site_cov: SiteCovariance,
    tol: float = TOLERANCE,
    max_iter: int = MAX_ITERATIONS,
) -> float:
    return float(profile_proportions(site, means, site_cov, tol, max_iter)[1])


def initial_proportions(
    site: SiteDataset, means: np.ndarray, site_cov: SiteCovariance, mode: str = "plugin"
) -> np.ndarray:
    if mode == "plugin":
        return plugin_proportions(site, means, site_cov)
    if mode == "profile":
        return profile_proportions(site, means, site_cov)
    raise ContractViolation(f"unknown lambda init mode {mode!r}")


def initialize_federation(federation, means0: np.ndarray, mode: str = "plugin") -> ModelParams:
    """
    Round-0 exchange: broadcast mu0, let every site pick its starting proportions.

    Returns:
        theta0 shared by the pooled and distributed fits
    """
    theta0 = federation.initialize(np.asarray(means0, dtype=float), mode)
    logger.debug("Initial proportions: %s", theta0.proportions[:, 1:].ravel())
    return theta0


def run_distributed_em(federation, init: ModelParams, config: EmConfig,
                       truth: Optional[ModelParams] = None) -> FitTrace:
    """
    Federated EM rounds: collect reports, maximize the surrogate, broadcast means.

    Args:
        federation: Federation whose sites answer collect and broadcast phases
        init: Starting parameters agreed with every site
        config: Iteration control
        truth: Optional true parameters for d2 tracking

    Returns:
        FitTrace; log-likelihoods are None since no site pools its data
    """
    federation.seed(init)
    theta = init
    start_up, start_down = federation.ledger.uplink_bytes, federation.ledger.downlink_bytes
    trace = FitTrace()
    trace.records.append(IterationRecord(0, theta, None, None, _truth_distance(theta, truth)))

    for round_index in range(1, config.max_iterations + 1):
        reports = federation.round_collect(round_index, theta)
        inputs = RoundInputs(federation.lead, theta, reports, federation.lead_index, federation.site_ids)
        surrogate = build_surrogate(inputs, federation.covariance)
        means = maximize_surrogate(surrogate, federation.covariance)
        updated = ModelParams(means, np.vstack([report.proportions for report in reports]))
        federation.round_broadcast(MeanBroadcast(round_index, means))

        step = d2_full(updated, theta, align=False)
        trace.records.append(
            IterationRecord(
                round_index,
                updated,
                None,
                step,
                _truth_distance(updated, truth),
                federation.ledger.uplink_bytes - start_up,
                federation.ledger.downlink_bytes - start_down,
            )
        )
        logger.debug("Round %d: step d2 %.3e", round_index, step)
        theta = updated
        if config.stop_on_convergence and step < config.tolerance:
            trace.converged, trace.reason = True, "tolerance"
            break
    else:
        trace.reason = "max_iterations"

    if config.stop_on_convergence and not trace.converged:
        logger.warning("Distributed EM did not converge within %d rounds", config.max_iterations)
    logger.info(
        "Distributed EM stopped after %d rounds (%s), %d bytes up, %d bytes down",
        trace.iterations, trace.reason, trace.records[-1].uplink_bytes, trace.records[-1].downlink_bytes,
    )
    return trace


def _truth_distance(theta: ModelParams, truth: Optional[ModelParams]) -> Optional[float]:
    return None if truth is None else d2_full(theta, truth)
