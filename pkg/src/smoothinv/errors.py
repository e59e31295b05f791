"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Tensor shapes do not compose for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class FormatError(ValueError):
    """A file on disk does not follow the expected binary layout."""


class VersionError(FormatError):
    """A file was written by a newer (or unknown) format version."""


class ConfigError(ValueError):
    """Bad configuration: unknown key, type mismatch or malformed line."""


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class InversionError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class TransformError(RuntimeError):
    """The external denoiser hook failed, timed out or wrote bad output."""
