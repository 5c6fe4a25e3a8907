class TUNetRegError(Exception):
    """Base class for all tunetreg errors."""


# ----------------------------------------------------------------------------
# DATA AND I/O
# ----------------------------------------------------------------------------
class IOFailure(TUNetRegError, OSError):
    pass


class MissingFile(IOFailure, FileNotFoundError):
    pass


class MalformedHeader(TUNetRegError, ValueError):
    pass


class UnsupportedDims(TUNetRegError, ValueError):
    pass


class PatchTooLarge(TUNetRegError, ValueError):
    pass


class MissingSegmentation(TUNetRegError, ValueError):
    pass


# ----------------------------------------------------------------------------
# SHAPES
# ----------------------------------------------------------------------------
class ShapeMismatch(TUNetRegError, ValueError):
    pass


class IndivisibleShape(TUNetRegError, ValueError):
    pass


class IndivisibleChannels(TUNetRegError, ValueError):
    pass


# ----------------------------------------------------------------------------
# CONFIGURATION
# ----------------------------------------------------------------------------
class InvalidConfig(TUNetRegError, ValueError):
    pass


class InvalidSpec(InvalidConfig):
    pass


# ----------------------------------------------------------------------------
# TRAINING AND CHECKPOINTS
# ----------------------------------------------------------------------------
class EmptyDataset(TUNetRegError, ValueError):
    pass


class DivergedLoss(TUNetRegError, ArithmeticError):
    def __init__(self, step: int, value: float) -> None:
        super().__init__(f"Non-finite loss {value} at step {step}.")
        self.step = step
        self.value = value


class VersionMismatch(TUNetRegError, ValueError):
    pass


class MalformedCheckpoint(TUNetRegError, ValueError):
    pass
