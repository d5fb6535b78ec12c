"""Exception types shared across the package."""


class FednasError(Exception):
    """Base class for package errors."""


class ConfigError(FednasError):
    """Invalid or incomplete experiment configuration."""


class NumericsError(FednasError):
    """Non-finite values encountered during computation (divergence)."""


class CheckpointError(FednasError):
    """Corrupt or incompatible checkpoint/serialized artifact."""
