"""Exception hierarchy shared across the package."""


class DsivError(Exception):
    """Base class for all package errors."""


class DimensionError(DsivError):
    """Shapes or axes are incompatible with the requested operation."""


class NumericError(DsivError):
    """Input values outside the numeric domain of an operation (NaN, log of non-positive, ...)."""


class ContractError(DsivError):
    """A caller violated an operation's contract (non-scalar backward target, bad labels, ...)."""


class ConfigurationError(DsivError):
    """Invalid model / training / generator configuration."""


class DeterminismError(DsivError):
    """A builder expected to be deterministic produced differing values on re-evaluation."""


class TrainingError(DsivError):
    """Training diverged (NaN loss) or otherwise failed mid-run."""


class ParseError(DsivError):
    """Malformed CSV / JSON artifact on disk."""
