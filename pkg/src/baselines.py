"""
Comparison estimators: k-means initialised local EM per site and the
label-matched average of the local fits.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from sklearn.cluster import KMeans

from .config import KMEANS_MAX_ITERATIONS, KMEANS_RESTARTS, SEED
from .exceptions import ContractViolation, UnsupportedConfigurationError
from .logs import get_logger
from .metrics import best_label_order
from .model import Covariance, ModelParams, SiteDataset
from .pooled_em import EmConfig, FitTrace, run_pooled_em
from .surrogate_em import plugin_proportions

logger = get_logger(__name__)

WEIGHT_SLACK = 1e-9


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    wcss: float
    restart: int


def _kmeans_restart(points: np.ndarray, start: np.ndarray, max_iterations: int):
    model = KMeans(
        n_clusters=start.shape[0], init=start, n_init=1, max_iter=max_iterations, tol=0.0, algorithm="lloyd"
    )
    labels = model.fit_predict(points)
    return model.cluster_centers_, labels, float(model.inertia_)


def kmeans_init(
    data: Union[SiteDataset, np.ndarray],
    n_clusters: int = 2,
    restarts: int = KMEANS_RESTARTS,
    seed: int = SEED,
    max_iterations: int = KMEANS_MAX_ITERATIONS,
) -> KMeansResult:
    """
    Lloyd's algorithm from several random seedings; keeps the lowest WCSS.

    Each restart is one Lloyd run from distinct data rows drawn from the
    restart's own stream, so the first r restarts are the same for any
    restart count. Centroids come back sorted lexicographically.

    Args:
        data: Site dataset or (n, d) array
        n_clusters: Number of clusters S
        restarts: Number of random seedings
        seed: Master seed
        max_iterations: Lloyd iterations per restart

    Returns:
        KMeansResult of the best restart
    """
    points = data.observations if isinstance(data, SiteDataset) else np.asarray(data, dtype=float)
    if restarts < 1:
        raise ContractViolation(f"restarts must be >= 1, got {restarts}")
    if points.shape[0] < n_clusters:
        raise ContractViolation(f"k-means needs n >= {n_clusters}, got {points.shape[0]}")
    distinct = np.unique(points, axis=0)
    if distinct.shape[0] < n_clusters:
        raise ContractViolation(f"k-means needs {n_clusters} distinct points, got {distinct.shape[0]}")

    best: Optional[KMeansResult] = None
    for restart in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(restart,)))
        start = distinct[rng.choice(distinct.shape[0], size=n_clusters, replace=False)]
        centroids, labels, wcss = _kmeans_restart(points, start, max_iterations)
        if best is None or wcss < best.wcss:
            best = KMeansResult(centroids, labels, wcss, restart)
    logger.debug("k-means: best of %d restarts is %d with WCSS %.6g", restarts, best.restart, best.wcss)

    order = np.lexsort(best.centroids.T[::-1])
    relabel = np.argsort(order)
    return KMeansResult(best.centroids[order], relabel[best.labels], best.wcss, best.restart)


@dataclass(frozen=True)
class LocalFit:
    """One site's own EM fit."""

    site_id: int
    n_obs: int
    params: ModelParams
    trace: FitTrace

    @property
    def means(self) -> np.ndarray:
        return self.params.means


def local_em(site: SiteDataset, cov: Covariance, config: EmConfig) -> LocalFit:
    """
    Fit the mixture on one site alone.

    Means start from k-means, the proportions from one update at the
    uniform plug-in.

    Args:
        site: The site's data
        cov: Single-site covariance (K = 1)
        config: Iteration control; seed and restarts drive k-means
    """
    if cov.n_sites != 1:
        raise ContractViolation(f"local_em needs a single-site covariance, got {cov.n_sites}")
    clusters = kmeans_init(site, config.n_classes, config.kmeans_restarts, config.seed)
    proportions = plugin_proportions(site, clusters.centroids, cov.site(0))
    init = ModelParams(clusters.centroids, proportions[np.newaxis, :])
    trace = run_pooled_em([site], init, cov, config)
    return LocalFit(site.site_id, site.n_obs, trace.final, trace)


def uniform_weights(n_sites: int) -> np.ndarray:
    return np.full(n_sites, 1.0 / n_sites)


def sample_size_weights(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=float)
    return sizes / sizes.sum()


def match_to_anchor(means: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Keep the labels when strictly closer to the anchor than the swap; ties swap."""
    return means[best_label_order(means, anchor)]


def average_estimator(fits: Sequence[LocalFit], weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """
    Weighted average of label-matched local means, anchored on the first fit.

    Args:
        fits: Local fits, the anchor first
        weights: Per-site weights summing to one; uniform by default

    Returns:
        (2, d) averaged means
    """
    if len(fits) == 0:
        raise ContractViolation("average_estimator needs at least one fit")
    if any(fit.params.n_classes != 2 for fit in fits):
        raise UnsupportedConfigurationError("label matching is defined for two classes only")
    weights = uniform_weights(len(fits)) if weights is None else np.asarray(weights, dtype=float)
    if weights.shape != (len(fits),):
        raise ContractViolation(f"need {len(fits)} weights, got shape {weights.shape}")
    if abs(weights.sum() - 1.0) > WEIGHT_SLACK:
        raise ContractViolation(f"weights must sum to 1, got {weights.sum()}")

    anchor = fits[0].means
    matched = [anchor] + [match_to_anchor(fit.means, anchor) for fit in fits[1:]]
    return np.einsum("j,jcd->cd", weights, np.stack(matched))
