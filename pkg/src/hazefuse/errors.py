"""Exception hierarchy shared by all hazefuse modules."""


class HazefuseError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(HazefuseError, ValueError):
    """Operand shapes are incompatible. Messages name both shapes."""


class ConfigError(HazefuseError, ValueError):
    """Invalid configuration. May carry a list of all violations found."""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations) if violations else [message]


class ContractError(HazefuseError, ValueError):
    """An operation precondition was violated (e.g. non-scalar loss)."""


class NonFiniteError(HazefuseError, FloatingPointError):
    """A forward op produced NaN or Inf."""


class SingularityError(HazefuseError, ValueError):
    """Transmission below the inversion floor; message reports pixel count."""


class FormatError(HazefuseError, ValueError):
    """Malformed binary file. Carries the byte offset of the defect."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(HazefuseError, ValueError):
    """Base class for checkpoint load failures."""


class CrcMismatchError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ParamMismatchError(CheckpointError):
    """Checkpoint names do not match the model's ParamSet."""

    def __init__(self, missing, unexpected):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        super().__init__(
            f"checkpoint/param name mismatch: missing={self.missing} unexpected={self.unexpected}"
        )


class TrainingDivergedError(HazefuseError, RuntimeError):
    """Loss became non-finite; message carries step and batch ids."""
