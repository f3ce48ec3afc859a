"""Exception hierarchy shared by every pipeline stage."""


class GDSMError(Exception):
    """Base class for all pipeline errors (CLI maps these to exit code 1)."""


class FileMissing(GDSMError, FileNotFoundError):
    pass


class FormatError(GDSMError, ValueError):
    pass


class DimsMismatch(GDSMError, ValueError):
    """Volume dimensions differ from the expected registration grid."""


class NonFiniteInput(GDSMError, ValueError):
    pass


class EmptyManifest(GDSMError, ValueError):
    pass


class InvalidParams(GDSMError, ValueError):
    pass


class IntervalOutOfBounds(GDSMError, IndexError):
    pass


class EmptyMaskOnSlice(GDSMError, ValueError):
    """Raised internally when a mask has no support on a slice; extraction skips it."""


class ShapeMismatch(GDSMError, ValueError):
    pass


class NonFiniteOutput(GDSMError, ArithmeticError):
    pass


class EmptyDataset(GDSMError, ValueError):
    pass


class DivergedLoss(GDSMError, ArithmeticError):
    pass


class UntrainedSource(GDSMError, ValueError):
    pass


class MissingPatches(GDSMError, KeyError):
    pass


class TooFewRows(GDSMError, ValueError):
    pass


class NoDefinedColumns(GDSMError, ValueError):
    pass


class SelectionLeakage(GDSMError, RuntimeError):
    """Selection indices were derived from rows outside the training split."""


class UnfittedAggregator(GDSMError, RuntimeError):
    pass


class LengthMismatch(GDSMError, ValueError):
    pass


class EmptyInput(GDSMError, ValueError):
    pass


class ConstantTargets(GDSMError, ValueError):
    pass


class ConstantVector(GDSMError, ValueError):
    pass


class StageOrderViolation(GDSMError, RuntimeError):
    pass


class ConfigMismatch(GDSMError, RuntimeError):
    """A stage artifact was produced under a different configuration hash."""
