"""Exception hierarchy shared by all subpackages."""


class ProxyTransferError(Exception):
    """Base class for every error raised by this package."""


class ContractError(ProxyTransferError, ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ContractError):
    """Input is numerically degenerate (e.g. a zero-norm vector)."""


class DegenerateTaskError(ContractError):
    """The learning task is ill-posed (e.g. fewer than two classes)."""


class ConfigError(ProxyTransferError, ValueError):
    """Invalid configuration value or combination."""


class CheckpointFormatError(ProxyTransferError):
    """A checkpoint file is malformed, truncated, or of another version."""


class CheckpointVersionError(CheckpointFormatError):
    """A checkpoint was written by an incompatible format version."""


class IncompatibleCheckpointError(ProxyTransferError):
    """A checkpoint does not match the requested architecture."""


class OptimizerError(ProxyTransferError):
    """Optimizer received unusable gradients; the run must abort."""


class IngestionError(ProxyTransferError):
    """A dataset directory or file could not be read."""


class SamplingError(ProxyTransferError, ValueError):
    """A subsampling request cannot be satisfied."""


class SplitError(ProxyTransferError, ValueError):
    """A cross-validation split cannot be constructed."""


class ReportingError(ProxyTransferError):
    """Run records cannot be aggregated into one report."""


class TrainingAbort(ProxyTransferError):
    """Training stopped early because of a non-finite loss or gradient."""

    def __init__(self, reason: str, history=None):
        super().__init__(reason)
        self.reason = reason
        self.history = list(history or [])
