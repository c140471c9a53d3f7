"""Exception taxonomy shared across the package."""


class LapsegError(Exception):
    """Base class for all package errors."""


class DimensionError(LapsegError):
    """Tensor shapes or extents violate an operation's contract."""


class ContractError(LapsegError):
    """An operation was called outside its stated preconditions."""


class ConfigError(LapsegError):
    """Invalid or inconsistent run configuration."""


class DataError(LapsegError):
    """A dataset file or record is unreadable or malformed."""


class NumericsError(LapsegError):
    """Non-finite value encountered where finite values are required."""


class CheckpointFormatError(LapsegError):
    """Checkpoint file is corrupt, truncated, or of an unknown version."""


class MissingTensorError(CheckpointFormatError):
    """Checkpoint does not line up with the target architecture."""

    def __init__(self, missing, unexpected=()):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        parts = []
        if self.missing:
            parts.append("missing tensors: " + ", ".join(self.missing))
        if self.unexpected:
            parts.append("unexpected tensors: " + ", ".join(self.unexpected))
        super().__init__("; ".join(parts) or "tensor name mismatch")
