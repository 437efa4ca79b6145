"""Exception types shared across the package."""


class MDDNError(Exception):
    """Base class for all package errors."""


class InputError(MDDNError, ValueError):
    """An argument violates an operation's preconditions."""


class ConfigError(MDDNError, ValueError):
    """An invalid or inconsistent model / run configuration."""


class ContractError(MDDNError, RuntimeError):
    """A caller broke a usage contract (mutated inputs, missing gradients, ...)."""


class FormatError(MDDNError, IOError):
    """A checkpoint or image file could not be decoded."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(MDDNError, RuntimeError):
    """Loss became non-finite during training."""
