"""Exception hierarchy shared across the package."""


class AdaGaussError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(AdaGaussError, ValueError):
    pass


class NotSymmetric(AdaGaussError, ValueError):
    pass


class NotPositiveDefinite(AdaGaussError, ValueError):
    """Raised when a Cholesky pivot falls at or below the singularity floor."""


class NoConvergence(AdaGaussError, RuntimeError):
    pass


class TooFewSamples(AdaGaussError, ValueError):
    pass


class EmptyInput(AdaGaussError, ValueError):
    pass


class AllZero(AdaGaussError, ValueError):
    pass


class CollapsedBatch(NotPositiveDefinite):
    """The covariance of a training minibatch is not positive-definite."""


class NonScalarLoss(AdaGaussError, ValueError):
    pass


class NaNGradient(AdaGaussError, FloatingPointError):
    pass


class NonFiniteUpdate(AdaGaussError, FloatingPointError):
    pass


class TapeConsumed(AdaGaussError, RuntimeError):
    pass


class InvalidConfig(AdaGaussError, ValueError):
    pass


class LabelOutOfRange(AdaGaussError, ValueError):
    pass


class NoPreviousHeads(AdaGaussError, ValueError):
    pass


class TooFewSamplesForClass(TooFewSamples):
    def __init__(self, class_id, count, required):
        super().__init__(
            f"class {class_id} has {count} samples, at least {required} required"
        )
        self.class_id = class_id


class DuplicateClass(AdaGaussError, KeyError):
    pass


class AdapterDimMismatch(ShapeMismatch):
    pass


class EmptyMemory(AdaGaussError, ValueError):
    pass


class EmptyTask(AdaGaussError, ValueError):
    pass


class ClassMismatch(AdaGaussError, ValueError):
    pass


class PlacementFailure(AdaGaussError, RuntimeError):
    pass


class ParseError(AdaGaussError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NonNumericFeature(ParseError):
    pass


class MissingLabelColumn(AdaGaussError, KeyError):
    pass


class EmptyDataset(AdaGaussError, ValueError):
    pass


class TooFewClasses(AdaGaussError, ValueError):
    pass


class MissingCheckpoint(AdaGaussError, FileNotFoundError):
    pass


class RunFailure(AdaGaussError, RuntimeError):
    """A module error annotated with the task index and phase where it occurred."""

    def __init__(self, task, phase, cause):
        super().__init__(f"task {task}, phase {phase}: {type(cause).__name__}: {cause}")
        self.task = task
        self.phase = phase
        self.cause = cause
