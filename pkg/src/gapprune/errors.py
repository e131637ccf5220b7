"""Exception types shared across the package."""


class GapPruneError(Exception):
    """Base class for all package errors."""


class DimensionError(GapPruneError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(GapPruneError, ValueError):
    """A precondition of an operation does not hold."""


class NonFiniteError(GapPruneError, FloatingPointError):
    """A NaN or infinity appeared in tensor data."""


class FormatError(GapPruneError, ValueError):
    """A file does not have the expected binary layout."""


class ConsistencyError(GapPruneError, ValueError):
    """Two related inputs disagree (e.g. image and label counts)."""


class IntegrityError(GapPruneError, ValueError):
    """A file is truncated or fails its checksum."""


class ArchitectureMismatchError(ContractError):
    """A checkpoint or twin model has a different architecture."""


class TrainingDivergedError(GapPruneError, RuntimeError):
    def __init__(self, epoch: int, batch: int, lr: float, detail: str = ""):
        self.epoch = epoch
        self.batch = batch
        self.lr = lr
        msg = f"non-finite loss at epoch {epoch}, batch {batch}, lr {lr:g}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class EmptyHistogramError(GapPruneError, ValueError):
    """No kept parameters are left to histogram."""
