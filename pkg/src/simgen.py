"""
Synthetic multi-site studies and the on-disk site file format.

Every (seed, replication) pair owns its random streams: one for the site
proportions and one per site for the observations, so replications can be
generated in any order or in parallel.
"""

import csv
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import SEED, SITE_FILENAME_TEMPLATE, STUDY_DIM, STUDY_METADATA_FILENAME, STUDY_MU0, STUDY_MU1
from .exceptions import ContractViolation, DataFormatError
from .logs import get_logger
from .model import Covariance, ModelParams, SiteDataset

logger = get_logger(__name__)


@dataclass(frozen=True)
class StudyConfig:
    """One cell of the simulation grid."""

    n_sites: int = 10
    n_per_site: int = 1000
    dim: int = STUDY_DIM
    sigma2: float = 2.5
    half_width: float = 0.1
    mu1: float = STUDY_MU1
    mu0: float = STUDY_MU0
    seed: int = SEED
    site_sizes: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.n_sites < 1 or self.n_per_site < 1 or self.dim < 1:
            raise ContractViolation("n_sites, n_per_site and dim must be positive")
        if not 0.0 <= self.half_width < 0.5:
            raise ContractViolation(f"half_width must be in [0, 0.5), got {self.half_width}")
        if self.sigma2 <= 0.0:
            raise ContractViolation(f"sigma2 must be positive, got {self.sigma2}")
        if self.site_sizes is not None:
            object.__setattr__(self, "site_sizes", tuple(int(n) for n in self.site_sizes))
            if len(self.site_sizes) != self.n_sites or min(self.site_sizes) < 1:
                raise ContractViolation(f"site_sizes must list {self.n_sites} positive sizes")

    @property
    def sizes(self) -> Tuple[int, ...]:
        return self.site_sizes if self.site_sizes is not None else (self.n_per_site,) * self.n_sites

    @property
    def true_means(self) -> np.ndarray:
        return np.vstack([np.full(self.dim, self.mu0), np.full(self.dim, self.mu1)])

    def covariance(self) -> Covariance:
        return Covariance.isotropic(self.sigma2, self.dim, self.n_sites)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def draw_lambdas(cfg: StudyConfig, replication: int) -> np.ndarray:
    """lambda_j ~ U(0.5 - a, 0.5 + a); a = 0 gives exactly 0.5."""
    u = _stream(cfg.seed, replication, 0).random(cfg.n_sites)
    return 0.5 - cfg.half_width + 2.0 * cfg.half_width * u


def simulate_site(cfg: StudyConfig, replication: int, site_index: int, lam: float,
                  n_obs: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw one site's observations and latent labels.

    Returns:
        (n, d) observations and (n,) class labels, 1 with probability lam
    """
    n_obs = cfg.sizes[site_index] if n_obs is None else n_obs
    rng = _stream(cfg.seed, replication, site_index + 1)
    labels = (rng.random(n_obs) < lam).astype(int)
    noise = rng.standard_normal((n_obs, cfg.dim)) * np.sqrt(cfg.sigma2)
    return cfg.true_means[labels] + noise, labels


def generate_study(cfg: StudyConfig, replication: int) -> Tuple[List[SiteDataset], ModelParams]:
    """
    Generate one replication of a study.

    Args:
        cfg: Study settings
        replication: Replication index, selects the random streams

    Returns:
        (datasets in site order with site_id = position, true parameters)
    """
    if replication < 0:
        raise ContractViolation(f"replication must be >= 0, got {replication}")
    lambdas = draw_lambdas(cfg, replication)
    datasets = []
    for j in range(cfg.n_sites):
        observations, _ = simulate_site(cfg, replication, j, lambdas[j])
        datasets.append(SiteDataset(j, observations))
    truth = ModelParams.two_class(cfg.true_means[0], cfg.true_means[1], lambdas)
    return datasets, truth


def site_path(directory, site_id: int) -> Path:
    return Path(directory) / SITE_FILENAME_TEMPLATE.format(site_id=site_id)


def export_study(
    datasets: Sequence[SiteDataset], truth: ModelParams, cfg: StudyConfig, replication: int, directory
) -> List[Path]:
    """
    Write one CSV per site plus a JSON sidecar with the settings and true parameters.

    Floats are written with repr so reading them back is exact.
    """
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    paths = []
    for dataset in datasets:
        path = site_path(directory, dataset.site_id)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow([f"x{k + 1}" for k in range(dataset.dim)])
            for row in dataset.observations:
                writer.writerow([repr(float(v)) for v in row])
        paths.append(path)

    metadata = {
        "config": asdict(cfg),
        "replication": replication,
        "site_ids": [d.site_id for d in datasets],
        "true_means": truth.means.tolist(),
        "true_proportions": truth.proportions.tolist(),
    }
    with open(directory / STUDY_METADATA_FILENAME, "w") as f:
        json.dump(metadata, f, indent=2)
    logger.info("Exported %d sites to %s", len(paths), directory)
    return paths


def load_site_file(path, site_id: Optional[int] = None) -> SiteDataset:
    """
    Read a site CSV: a header of column names, then one observation per row.

    Args:
        path: File to read
        site_id: Site id to assign; parsed from a site_<id>.csv name when omitted

    Raises:
        DataFormatError: naming the file and line of the first problem
    """
    path = Path(path)
    if site_id is None:
        site_id = _site_id_from_name(path) or 0
    if not path.exists():
        raise DataFormatError(f"Site file not found: {path}", str(path))

    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or any(not name.strip() for name in header):
            raise DataFormatError(f"{path}: missing or empty header", str(path), 1)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}:{line}: expected {len(header)} columns, got {len(row)}", str(path), line
                )
            try:
                rows.append([float(value) for value in row])
            except ValueError as e:
                raise DataFormatError(f"{path}:{line}: {e}", str(path), line) from e
    if not rows:
        raise DataFormatError(f"{path}: no observations", str(path))
    values = np.array(rows)
    if not np.all(np.isfinite(values)):
        raise DataFormatError(f"{path}: non-finite observation", str(path))
    return SiteDataset(site_id, values)


def _site_id_from_name(path: Path) -> Optional[int]:
    prefix, _, suffix = SITE_FILENAME_TEMPLATE.partition("{site_id}")
    name = path.name
    if name.startswith(prefix) and name.endswith(suffix):
        core = name[len(prefix):len(name) - len(suffix)]
        if core.isdigit():
            return int(core)
    return None


def load_sites(paths: Sequence) -> List[SiteDataset]:
    """Load several site files; the first is the lead site."""
    ids = [_site_id_from_name(Path(path)) for path in paths]
    if None in ids or len(set(ids)) != len(ids):
        ids = list(range(len(paths)))
    datasets = [load_site_file(path, site_id) for path, site_id in zip(paths, ids)]
    dims = {d.dim for d in datasets}
    if len(dims) != 1:
        raise DataFormatError(f"Site files disagree on dimension: {sorted(dims)}", str(paths[0]))
    return datasets
