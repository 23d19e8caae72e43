"""Exception types raised across the pipeline."""


class RausError(Exception):
    """Base class for all package errors."""


class ParseError(RausError):
    """Malformed input row or value; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(RausError):
    """Header or column layout violates the expected CSV schema."""


class DataError(RausError):
    """Input data is structurally valid but unusable (missing labels, etc.)."""


class DegenerateVariable(RausError):
    """Variable carries no usable signal (constant, or too few bins)."""


class StratumTooSmall(RausError):
    """A split stratum has fewer than 2 subjects."""


class EmptyStratum(RausError):
    """No cases exist at a prediction timestep."""


class EmptyInput(RausError):
    """No rows remain after dropping missing values."""


class NoRankableVariables(RausError):
    """Every candidate variable is degenerate."""


class ParentSpaceTooLarge(RausError):
    """Parent configuration count exceeds the configured cap."""


class InvalidStructure(RausError):
    """Structure violates acyclicity or slice-direction constraints."""


class TreewidthTooLarge(RausError):
    """Largest clique state space exceeds the configured cap."""


class InconsistentEvidence(RausError):
    """Evidence has probability zero under the current parameters."""


class HorizonExceeded(RausError):
    """Requested prediction timestep lies beyond the panel horizon."""


class OracleTooLarge(RausError):
    """Joint state space too large for brute-force enumeration."""


class UndefinedMetric(RausError):
    """Metric undefined for the given inputs (e.g. single-class scores)."""


class UnstableBootstrap(RausError):
    """More than half of the bootstrap resamples were degenerate."""


class ConvergenceFailure(RausError):
    """Iterative fit did not converge within the iteration budget."""


class LayoutError(RausError):
    """Graph layout cannot place a node (missing from the ranking)."""


class ConfigError(RausError):
    """Invalid run configuration."""
