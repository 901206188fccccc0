"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: ConfigError -> 2,
ProtocolFault -> 3, NumericError -> 4.
"""


class ContractViolation(ValueError):
    """An argument breaks a documented precondition (shape, range, dtype)."""


class ArchitectureError(ValueError):
    """Malformed architecture description; message names the offending descriptor."""


class NumericError(ArithmeticError):
    """Non-finite value where training must halt loudly instead of corrupting weights."""


class CheckpointError(ValueError):
    """Unreadable or corrupt checkpoint stream; message carries the byte offset."""


class ArchitectureMismatch(CheckpointError):
    """Checkpoint architecture hash does not match the expected architecture."""


class NiftiParseError(ValueError):
    """Malformed NIfTI-1 stream; message names the header field and byte offset."""


class GenerationError(RuntimeError):
    """Phantom generation cannot satisfy the requested parameters."""


class ProtocolFault(RuntimeError):
    """Exchange-store state is inconsistent with the turn-taking protocol."""


class ProtocolTimeout(ProtocolFault):
    """Waited longer than the configured limit for our turn."""


class DegenerateSampleError(ValueError):
    """Paired test with no nonzero differences; the statistic is undefined."""


class UndefinedCorrelationError(ValueError):
    """Correlation requested for a sample with zero variance."""


class ConfigError(ValueError):
    """Experiment configuration is missing, unreadable, or inconsistent."""
