"""
Heterogeneous Gaussian mixture model shared by every estimator.

Each site j draws observations from sum_c p_jc N(mu_c, Sigma_j): the class
means are shared across sites, the mixing proportions are site specific and
the covariances are known. With two classes, class 1 is the Z = 1 class whose
site proportion is lambda_j and class 0 carries 1 - lambda_j.

Every density is evaluated in log space through a Cholesky factor of
Sigma_j, so responsibilities and density ratios stay finite far out in the
tails.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.special import logsumexp

from .config import EIGEN_BOUND, LAMBDA_FLOOR
from .exceptions import ContractViolation, NumericalOverflowError

LOG_2PI = float(np.log(2.0 * np.pi))
ROW_SUM_SLACK = 1e-9


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def clamp_proportions(proportions: np.ndarray, floor: float = LAMBDA_FLOOR) -> np.ndarray:
    """
    Clamp mixing proportions into the open simplex.

    With two classes each entry is clipped to [floor, 1 - floor]; the clip is
    applied per column so relabelling the classes permutes the result
    exactly. With more classes the clipped rows are renormalised.

    Args:
        proportions: (K, S) or (S,) array of proportions

    Returns:
        Array of the same shape
    """
    p = np.asarray(proportions, dtype=float)
    clipped = np.clip(p, floor, 1.0 - floor)
    if p.shape[-1] == 2:
        return clipped
    return clipped / clipped.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class ModelParams:
    """Shared class means (S, d) plus per-site mixing proportions (K, S)."""

    means: np.ndarray
    proportions: np.ndarray

    def __post_init__(self):
        means = np.array(self.means, dtype=float)
        proportions = np.array(self.proportions, dtype=float)
        if proportions.ndim == 1:
            proportions = proportions[np.newaxis, :]
        if means.ndim != 2 or means.shape[1] < 1:
            raise ContractViolation(f"means must be an (S, d) array, got shape {means.shape}")
        if means.shape[0] < 2:
            raise ContractViolation(f"need at least two classes, got {means.shape[0]}")
        if proportions.ndim != 2 or proportions.shape[0] < 1 or proportions.shape[1] != means.shape[0]:
            raise ContractViolation(
                f"proportions must be (K, {means.shape[0]}), got shape {proportions.shape}"
            )
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(proportions))):
            raise ContractViolation("parameters must be finite")
        if np.any(np.abs(proportions.sum(axis=1) - 1.0) > ROW_SUM_SLACK):
            raise ContractViolation("each site's proportions must sum to one")
        low = 0.5 * LAMBDA_FLOOR
        if np.any(proportions < low) or np.any(proportions > 1.0 - low):
            raise ContractViolation(
                f"proportions must lie in [{LAMBDA_FLOOR}, {1.0 - LAMBDA_FLOOR}]"
            )
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "proportions", _frozen(proportions))

    @classmethod
    def two_class(cls, mu0: Sequence[float], mu1: Sequence[float], lambdas: Sequence[float]) -> "ModelParams":
        """Build S = 2 parameters from (mu0, mu1) and the per-site lambda_j."""
        lam = np.atleast_1d(np.asarray(lambdas, dtype=float))
        return cls(np.vstack([mu0, mu1]), np.column_stack([1.0 - lam, lam]))

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_sites(self) -> int:
        return self.proportions.shape[0]

    @property
    def lambdas(self) -> np.ndarray:
        """Per-site proportion of class 1 (two-class models only)."""
        if self.n_classes != 2:
            raise ContractViolation("lambdas are defined for two-class models only")
        return self.proportions[:, 1]

    def site_view(self, site_index: int) -> "ModelParams":
        """The (lambda_j, mu) view of one site, as a K = 1 parameter set."""
        return ModelParams(self.means, self.proportions[site_index:site_index + 1])

    def permute_labels(self, order: Sequence[int]) -> "ModelParams":
        order = list(order)
        return ModelParams(self.means[order], self.proportions[:, order])

    def swap_labels(self) -> "ModelParams":
        return self.permute_labels(list(range(self.n_classes))[::-1])

    def with_means(self, means: np.ndarray) -> "ModelParams":
        return ModelParams(means, self.proportions)


@dataclass(frozen=True)
class SiteCovariance:
    """One known covariance with its Cholesky factor and precision."""

    matrix: np.ndarray
    chol_lower: np.ndarray
    precision: np.ndarray
    log_det: float
    eigenvalues: np.ndarray

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, bound: float = EIGEN_BOUND) -> "SiteCovariance":
        sigma = np.array(matrix, dtype=float)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise ContractViolation(f"covariance must be square, got shape {sigma.shape}")
        if not np.allclose(sigma, sigma.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(sigma).max())):
            raise ContractViolation("covariance must be symmetric")
        eigenvalues = np.linalg.eigvalsh(sigma)
        if eigenvalues.min() <= 0.0:
            raise ContractViolation("covariance must be positive definite")
        if eigenvalues.min() < 1.0 / bound or eigenvalues.max() > bound:
            raise ContractViolation(
                f"covariance eigenvalues [{eigenvalues.min():.3g}, {eigenvalues.max():.3g}] "
                f"outside [1/{bound}, {bound}]"
            )
        try:
            lower = cholesky(sigma, lower=True)
        except LinAlgError as e:
            raise ContractViolation(f"covariance factorization failed: {e}") from e
        identity = np.eye(sigma.shape[0])
        inv_lower = solve_triangular(lower, identity, lower=True)
        precision = inv_lower.T @ inv_lower
        precision = 0.5 * (precision + precision.T)
        log_det = 2.0 * float(np.sum(np.log(np.diag(lower))))
        return cls(_frozen(sigma), _frozen(lower), _frozen(precision), log_det, _frozen(eigenvalues))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def whiten(self, points: np.ndarray) -> np.ndarray:
        """L^-1 x for every row x, so Mahalanobis distances become Euclidean."""
        points = np.asarray(points, dtype=float)
        return solve_triangular(self.chol_lower, points.T, lower=True).T

    def mahalanobis(self, a: np.ndarray, b: np.ndarray) -> float:
        diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        solved = solve_triangular(self.chol_lower, diff, lower=True)
        return float(np.sqrt(np.sum(solved ** 2)))


@dataclass(frozen=True)
class Covariance:
    """Known per-site covariances Sigma_j."""

    sites: Tuple[SiteCovariance, ...]
    bound: float = EIGEN_BOUND

    def __post_init__(self):
        if len(self.sites) < 1:
            raise ContractViolation("at least one site covariance is required")
        dims = {site.dim for site in self.sites}
        if len(dims) != 1:
            raise ContractViolation(f"site covariances disagree on dimension: {sorted(dims)}")

    @classmethod
    def per_site(cls, matrices: Sequence[np.ndarray], bound: float = EIGEN_BOUND) -> "Covariance":
        return cls(tuple(SiteCovariance.from_matrix(m, bound) for m in matrices), bound)

    @classmethod
    def shared(cls, matrix: np.ndarray, n_sites: int, bound: float = EIGEN_BOUND) -> "Covariance":
        site = SiteCovariance.from_matrix(matrix, bound)
        return cls(tuple([site] * n_sites), bound)

    @classmethod
    def isotropic(cls, sigma2: float, dim: int, n_sites: int, bound: float = EIGEN_BOUND) -> "Covariance":
        return cls.shared(sigma2 * np.eye(dim), n_sites, bound)

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def dim(self) -> int:
        return self.sites[0].dim

    @property
    def eigen_bound(self) -> float:
        """Smallest M with M^-1 <= eig(Sigma_j) <= M for every site."""
        return float(max(max(s.eigenvalues.max(), 1.0 / s.eigenvalues.min()) for s in self.sites))

    def site(self, index: int) -> SiteCovariance:
        return self.sites[index]

    def subset(self, indices: Sequence[int]) -> "Covariance":
        return Covariance(tuple(self.sites[i] for i in indices), self.bound)


@dataclass(frozen=True)
class SiteDataset:
    """The n x d observation matrix held by one site."""

    site_id: int
    observations: np.ndarray

    def __post_init__(self):
        data = np.array(self.observations, dtype=float)
        if data.ndim == 1:
            data = data[:, np.newaxis]
        if data.ndim != 2 or data.shape[0] < 1:
            raise ContractViolation(f"site {self.site_id} needs an (n, d) matrix with n >= 1")
        if not np.all(np.isfinite(data)):
            raise ContractViolation(f"site {self.site_id} has non-finite observations")
        object.__setattr__(self, "observations", _frozen(data))

    @property
    def n_obs(self) -> int:
        return self.observations.shape[0]

    @property
    def dim(self) -> int:
        return self.observations.shape[1]


def _check_dim(observations: np.ndarray, means: np.ndarray) -> np.ndarray:
    y = np.asarray(observations, dtype=float)
    if y.shape[-1] != means.shape[1]:
        raise ContractViolation(f"observation dimension {y.shape[-1]} != model dimension {means.shape[1]}")
    return y


def component_log_densities(observations: np.ndarray, means: np.ndarray, site_cov: SiteCovariance) -> np.ndarray:
    """(n, S) matrix of log N(y_i; mu_c, Sigma_j)."""
    y = _check_dim(np.atleast_2d(observations), means)
    z = site_cov.whiten(y)
    centers = site_cov.whiten(means)
    squared = ((z[:, np.newaxis, :] - centers[np.newaxis, :, :]) ** 2).sum(axis=2)
    return -0.5 * (site_cov.dim * LOG_2PI + site_cov.log_det + squared)


def site_e_step(
    observations: np.ndarray, means: np.ndarray, proportions_row: np.ndarray, site_cov: SiteCovariance
) -> Tuple[np.ndarray, float]:
    """Responsibilities (n, S) and the site's observed-data log-likelihood from one pass."""
    weighted = component_log_densities(observations, means, site_cov) + np.log(proportions_row)
    row_totals = logsumexp(weighted, axis=1, keepdims=True)
    return np.exp(weighted - row_totals), float(np.sum(row_totals))


def responsibilities(
    observations: np.ndarray, means: np.ndarray, proportions_row: np.ndarray, site_cov: SiteCovariance
) -> np.ndarray:
    """
    Posterior class probabilities for a batch of observations from one site.

    Args:
        observations: (n, d) observations
        means: (S, d) class means
        proportions_row: (S,) mixing proportions of the site
        site_cov: Known covariance of the site

    Returns:
        (n, S) responsibilities, rows summing to one
    """
    return site_e_step(observations, means, proportions_row, site_cov)[0]


def responsibility(y: np.ndarray, params_j: ModelParams, site_cov: SiteCovariance) -> np.ndarray:
    """Posterior class probabilities of a single observation under (lambda_j, mu, Sigma_j)."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise ContractViolation("responsibility expects a single d-vector")
    return responsibilities(y[np.newaxis, :], params_j.means, params_j.proportions[0], site_cov)[0]


def proportions_from_responsibilities(weights: np.ndarray) -> np.ndarray:
    """Mean responsibility over a site's observations, clamped."""
    return clamp_proportions(weights.mean(axis=0))


def site_proportion_update(
    observations: np.ndarray, means: np.ndarray, proportions_row: np.ndarray, site_cov: SiteCovariance
) -> np.ndarray:
    return proportions_from_responsibilities(responsibilities(observations, means, proportions_row, site_cov))


def density_ratios(
    observations: np.ndarray,
    means: np.ndarray,
    lead_proportions: np.ndarray,
    site_proportions: np.ndarray,
    lead_cov: SiteCovariance,
    site_cov: Optional[SiteCovariance] = None,
) -> np.ndarray:
    """
    Site-j mixture density over lead-site mixture density at each observation.

    Computed as the exponent of a difference of log-sum-exps, so identical
    mixtures give exactly 1.

    Returns:
        (n,) positive tilt factors
    """
    site_cov = lead_cov if site_cov is None else site_cov
    lead_log = component_log_densities(observations, means, lead_cov)
    site_log = lead_log if site_cov is lead_cov else component_log_densities(observations, means, site_cov)
    lead_total = logsumexp(lead_log + np.log(lead_proportions), axis=1)
    site_total = logsumexp(site_log + np.log(site_proportions), axis=1)
    return tilts_from_log_totals(site_total, lead_total)


def tilts_from_log_totals(site_total: np.ndarray, lead_total: np.ndarray) -> np.ndarray:
    """exp(site log mixture density - lead log mixture density), checked finite and positive."""
    with np.errstate(over="ignore"):
        ratio = np.exp(site_total - lead_total)
    if not np.all(np.isfinite(ratio)) or np.any(ratio <= 0.0):
        raise NumericalOverflowError("density ratio is not a finite positive number")
    return ratio


def density_ratio(
    y: np.ndarray,
    means: np.ndarray,
    lead_proportions: np.ndarray,
    site_proportions: np.ndarray,
    lead_cov: SiteCovariance,
    site_cov: Optional[SiteCovariance] = None,
) -> float:
    """Tilt factor t(y, eta_j) for one lead-site observation."""
    y = np.asarray(y, dtype=float)
    return float(density_ratios(y[np.newaxis, :], means, lead_proportions, site_proportions, lead_cov, site_cov)[0])


def mixture_log_likelihood(datasets: Sequence[SiteDataset], params: ModelParams, cov: Covariance) -> float:
    """Observed-data log-likelihood summed over all sites and observations."""
    if len(datasets) == 0:
        raise ContractViolation("mixture_log_likelihood needs at least one dataset")
    if len(datasets) != params.n_sites or cov.n_sites != params.n_sites:
        raise ContractViolation(
            f"{len(datasets)} datasets, {params.n_sites} parameter rows, {cov.n_sites} covariances"
        )
    return sum(
        site_e_step(dataset.observations, params.means, params.proportions[j], cov.site(j))[1]
        for j, dataset in enumerate(datasets)
    )


def class_weight_sums(observations: np.ndarray, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class weight totals (S,) and weighted observation sums (S, d)."""
    sums = np.stack([weights[:, c] @ observations for c in range(weights.shape[1])])
    return weights.sum(axis=0), sums


def weighted_q_gradient(
    observations: np.ndarray, weights: np.ndarray, means: np.ndarray, site_cov: SiteCovariance, scale: float
) -> np.ndarray:
    """scale * sum_i weights_ic Omega (y_i - mu_c), as an (S, d) array."""
    gradient = np.empty_like(means)
    for c in range(means.shape[0]):
        residual = weights[:, c] @ (observations - means[c])
        gradient[c] = site_cov.precision @ residual
    return scale * gradient


def local_q_value(
    site: SiteDataset, params_j: ModelParams, responsibilities_at: ModelParams, site_cov: SiteCovariance
) -> float:
    """
    Site Q function Q_j(theta_j | theta_j^t) averaged over the site's observations.

    Responsibilities are evaluated at responsibilities_at; the log densities
    and log proportions at params_j.
    """
    y = site.observations
    weights = responsibilities(y, responsibilities_at.means, responsibilities_at.proportions[0], site_cov)
    log_terms = component_log_densities(y, params_j.means, site_cov) + np.log(params_j.proportions[0])
    return float(np.sum(weights * log_terms) / site.n_obs)


def local_q_gradient(
    site: SiteDataset, params_j: ModelParams, responsibilities_at: ModelParams, site_cov: SiteCovariance
) -> np.ndarray:
    """
    Gradient of Q_j with respect to the class means.

    Args:
        site: The site's data
        params_j: (lambda_j, mu) at which the gradient is taken
        responsibilities_at: Iterate theta_j^t conditioning the E-step
        site_cov: Known covariance of the site

    Returns:
        (S * d,) vector, the (S, d) gradient raveled in class order
    """
    y = _check_dim(site.observations, params_j.means)
    weights = responsibilities(y, responsibilities_at.means, responsibilities_at.proportions[0], site_cov)
    return weighted_q_gradient(y, weights, params_j.means, site_cov, 1.0 / site.n_obs).ravel()


def site_round_statistics(
    site: SiteDataset, params_j: ModelParams, site_cov: SiteCovariance
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Proportion update and Q_j gradient at theta_j^t from a single E-step.

    Returns:
        (S,) clamped proportions and the (S * d,) raveled gradient
    """
    y = _check_dim(site.observations, params_j.means)
    weights = responsibilities(y, params_j.means, params_j.proportions[0], site_cov)
    gradient = weighted_q_gradient(y, weights, params_j.means, site_cov, 1.0 / site.n_obs)
    return proportions_from_responsibilities(weights), gradient.ravel()
