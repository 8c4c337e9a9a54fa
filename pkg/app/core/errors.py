"""
Error hierarchy for the valence pipeline.
Every failure raised by the services derives from ValenceError, which is a
ValueError so callers that already guard bad input keep working.
"""
from typing import Optional


class ValenceError(ValueError):
    """Base class for all pipeline errors"""


# signal ---------------------------------------------------------------------

class SignalTooShort(ValenceError):
    pass


class TooFewBeats(ValenceError):
    pass


class EmptyAfterCleaning(ValenceError):
    pass


class TooShort(ValenceError):
    pass


class TargetTooSmall(ValenceError):
    pass


class StageError(ValenceError):
    """A preprocessing stage failed; `stage` names it and `cause` keeps the original error"""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause

    def __reduce__(self):
        return type(self), (self.stage, self.cause)


# nn -------------------------------------------------------------------------

class ShapeMismatch(ValenceError):
    pass


class NonFiniteActivation(ValenceError):
    pass


class StaleCache(ValenceError):
    pass


class LengthMismatch(ValenceError):
    pass


class EmptyDataset(ValenceError):
    pass


class NonFiniteLoss(ValenceError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"Non-finite loss {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss

    def __reduce__(self):
        return type(self), (self.epoch, self.loss)


class InvalidConfig(ValenceError):
    pass


# bayes ----------------------------------------------------------------------

class InvalidAlpha(ValenceError):
    pass


class EmptyPosterior(ValenceError):
    pass


class TooFewSamples(ValenceError):
    pass


# eval -----------------------------------------------------------------------

class OutOfScale(ValenceError):
    pass


class InsufficientSubjects(ValenceError):
    pass


class EmptyRecords(ValenceError):
    pass


class EmptyInput(ValenceError):
    pass


class CoverageNotMonotone(ValenceError):
    pass


class FoldFailed(ValenceError):
    def __init__(self, fold_index: int, cause: Exception):
        super().__init__(f"Fold {fold_index} failed: {cause}")
        self.fold_index = fold_index
        self.cause = cause

    def __reduce__(self):
        return type(self), (self.fold_index, self.cause)


# data -----------------------------------------------------------------------

class MissingManifest(ValenceError):
    pass


class MalformedRow(ValenceError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"Manifest line {line}: {reason}")
        self.line = line
        self.reason = reason

    def __reduce__(self):
        return type(self), (self.line, self.reason)


class AllTrialsSkipped(ValenceError):
    pass


class InvalidBeatTimes(ValenceError):
    pass


class InvalidSpec(ValenceError):
    pass


# cli ------------------------------------------------------------------------

class MalformedGrid(ValenceError):
    def __init__(self, row: Optional[int], reason: str):
        where = f"Grid row {row}" if row is not None else "Grid file"
        super().__init__(f"{where}: {reason}")
        self.row = row
        self.reason = reason

    def __reduce__(self):
        return type(self), (self.row, self.reason)


class MissingReport(ValenceError):
    pass
