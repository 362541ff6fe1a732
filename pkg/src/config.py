"""Configuration settings for the federated mixture EM engine."""

import os
from typing import Any, Dict, List, Optional

from dotenv import dotenv_values, load_dotenv

from .exceptions import ConfigError

# Load environment variables
load_dotenv()

# Numerical guards
LAMBDA_FLOOR = float(os.getenv("FEDEM_LAMBDA_FLOOR", "1e-6"))
DEGENERATE_MASS = float(os.getenv("FEDEM_DEGENERATE_MASS", "1e-8"))
EIGEN_BOUND = float(os.getenv("FEDEM_EIGEN_BOUND", "100.0"))

# EM iteration control
TOLERANCE = float(os.getenv("FEDEM_TOLERANCE", "1e-8"))
MAX_ITERATIONS = int(os.getenv("FEDEM_MAX_ITERATIONS", "500"))
KMEANS_RESTARTS = int(os.getenv("FEDEM_KMEANS_RESTARTS", "5"))
KMEANS_MAX_ITERATIONS = int(os.getenv("FEDEM_KMEANS_MAX_ITERATIONS", "100"))

# Experiment runner
SEED = int(os.getenv("FEDEM_SEED", "20240101"))
REPLICATIONS = int(os.getenv("FEDEM_REPLICATIONS", "200"))
WORKERS = int(os.getenv("FEDEM_WORKERS", "1"))
OUTPUT_DIR = os.getenv("FEDEM_OUTPUT_DIR", "results")
LOG_LEVEL = os.getenv("FEDEM_LOG_LEVEL", "INFO")

# Simulation study defaults
STUDY_DIM = 5
STUDY_MU1 = 5.0  # every coordinate of the class-1 mean
STUDY_MU0 = 4.0  # every coordinate of the class-0 mean
STUDY_SIGMA2 = [2.5, 5.0]
STUDY_HALF_WIDTHS = [0.1, 0.3]
STUDY_SITES = [10, 30]
STUDY_SIZES = [1000, 3000]
TRACE_ITERATIONS = 50
ESTIMATORS = ["local", "average", "pooled", "distributed"]

# Condition-1 diagnostic constants
CONDITION1_C0 = 0.1
CONDITION1_CW = 0.1
CONDITION1_C1 = 0.75

# Output file names
FIG1_FILENAME = "fig1_trace.csv"
FIG1_FAILURES_FILENAME = "fig1_failures.csv"
BIAS_MSE_FILENAME = "bias_mse.csv"
REPLICATIONS_FILENAME = "replications.csv"
STUDY_METADATA_FILENAME = "study.json"
SITE_FILENAME_TEMPLATE = "site_{site_id}.csv"
DIAGNOSE_FILENAME = "diagnose.csv"
ESTIMATES_FILENAME = "estimates.json"
TRACE_FILENAME = "trace.csv"
LEDGER_FILENAME = "ledger.csv"
MESSAGE_LOG_FILENAME = "messages.bin"

# Keys accepted in experiment config files, with the parser for each
_LIST_FLOAT = "list_float"
_LIST_INT = "list_int"
_LIST_STR = "list_str"
CONFIG_KEYS = {
    "sites": _LIST_INT,
    "sizes": _LIST_INT,
    "sigma2": _LIST_FLOAT,
    "half_width": _LIST_FLOAT,
    "dim": int,
    "mu1": float,
    "mu0": float,
    "replications": int,
    "estimators": _LIST_STR,
    "seed": int,
    "workers": int,
    "out": str,
    "trace_iterations": int,
    "tolerance": float,
    "max_iterations": int,
    "kmeans_restarts": int,
    "lambda_init": str,
    "average_weights": str,
}


def _parse_value(key: str, raw: str) -> Any:
    kind = CONFIG_KEYS[key]
    items = [item.strip() for item in raw.split(",") if item.strip()]
    if kind == _LIST_FLOAT:
        return [float(item) for item in items]
    if kind == _LIST_INT:
        return [int(item) for item in items]
    if kind == _LIST_STR:
        return items
    return kind(raw.strip())


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """
    Load a key=value experiment config file.

    Args:
        path: Path to the config file, or None for no file

    Returns:
        Dictionary of parsed values keyed by config key
    """
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}", path=path)

    raw_values = dotenv_values(path)
    parsed: Dict[str, Any] = {}
    for key, raw in raw_values.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"Unknown config key '{key}' in {path}", path=path, key=key)
        if raw is None:
            raise ConfigError(f"Config key '{key}' in {path} has no value", path=path, key=key)
        try:
            parsed[key] = _parse_value(key, raw)
        except ValueError as e:
            raise ConfigError(f"Bad value for '{key}' in {path}: {e}", path=path, key=key) from e
    return parsed


def merge_settings(file_values: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """CLI overrides win over file values; None overrides are ignored."""
    merged = dict(file_values)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def parse_list(raw: Optional[str], cast) -> Optional[List[Any]]:
    """Parse a comma separated CLI value."""
    if raw is None:
        return None
    return [cast(item.strip()) for item in raw.split(",") if item.strip()]
