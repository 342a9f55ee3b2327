class DirectPretrainError(Exception):
    """Base class for errors raised by this package."""


class SampleError(DirectPretrainError, ValueError):
    """Invalid image sample or resize request."""


class BnError(DirectPretrainError, ValueError):
    pass


class CheckpointError(DirectPretrainError):
    pass


class CheckpointIntegrityError(CheckpointError):
    """The checkpoint file is truncated, corrupted or of an unknown format."""


class TransferError(CheckpointError):
    """Strict partial load hit a shape mismatch."""


class PlannerError(DirectPretrainError, ValueError):
    pass


class ConfigError(DirectPretrainError):
    """One or more schema violations; ``errors`` lists all of them."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


class DivergenceError(DirectPretrainError, RuntimeError):
    """Training produced a non-finite loss."""
