"""Error types raised by the federated EM engine."""

from typing import Any, Dict, Optional, Sequence


class FederatedEMError(Exception):
    """Root of every error the library raises."""

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.context: Dict[str, Any] = context

    def summary(self) -> Dict[str, Any]:
        """Machine-readable description used by the CLI on failure."""
        data = {"error": type(self).__name__, "message": str(self)}
        for key, value in self.context.items():
            data[key] = value if isinstance(value, (int, float, str, bool, type(None))) else str(value)
        return data


class ContractViolation(FederatedEMError, ValueError):
    """A precondition, shape or dimension requirement was broken."""


class UnsupportedConfigurationError(FederatedEMError):
    pass


class ConfigError(FederatedEMError):
    pass


class DataFormatError(FederatedEMError):
    """A site data file could not be parsed."""

    def __init__(self, message: str, path: str, line: Optional[int] = None):
        super().__init__(message, path=path, line=line)
        self.path = path
        self.line = line


class NumericalOverflowError(FederatedEMError):
    pass


class DegenerateClassError(FederatedEMError):
    """A class lost (almost) all of its responsibility mass."""

    def __init__(self, class_index: int, mass: float, iteration: Optional[int] = None):
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(
            f"Class {class_index} is degenerate{where}: total responsibility {mass:.3e}",
            class_index=class_index,
            mass=mass,
            iteration=iteration,
        )
        self.class_index = class_index
        self.mass = mass
        self.iteration = iteration

    def at_iteration(self, iteration: int) -> "DegenerateClassError":
        return DegenerateClassError(self.class_index, self.mass, iteration)


class DegenerateTiltError(FederatedEMError):
    """The surrogate quadratic is not negative definite for a class."""

    def __init__(self, class_index: int):
        super().__init__(
            f"Tilted weight-precision matrix of class {class_index} is not positive definite",
            class_index=class_index,
        )
        self.class_index = class_index


class FederationError(FederatedEMError):
    def __init__(self, message: str, round_index: Optional[int] = None, **context: Any):
        super().__init__(message, round_index=round_index, **context)
        self.round_index = round_index


class IncompleteRoundError(FederationError):
    def __init__(self, round_index: int, missing: Sequence[int]):
        super().__init__(
            f"Round {round_index} is missing reports from sites {sorted(missing)}",
            round_index=round_index,
            missing=",".join(str(site) for site in sorted(missing)),
        )
        self.missing = sorted(missing)


class TransportError(FederationError):
    pass
