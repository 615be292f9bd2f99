"""Exception hierarchy shared by every module of the toolkit."""


class EdgeOptError(Exception):
    """Base class for all toolkit errors."""


# graph-core
class GraphError(EdgeOptError):
    pass


class ShapeMismatch(GraphError):
    pass


class MissingWeight(GraphError):
    pass


class InvalidGraph(GraphError):
    pass


class EmptyInput(EdgeOptError, ValueError):
    pass


class NonFiniteInput(EdgeOptError, ValueError):
    pass


class ModelFormatError(EdgeOptError):
    pass


class FormatVersionMismatch(ModelFormatError):
    pass


class ChecksumMismatch(ModelFormatError):
    pass


# pruning
class UnsupportedLayerKind(EdgeOptError):
    pass


class GraphRewriteConflict(EdgeOptError):
    pass


# quantization
class NonFiniteRange(EdgeOptError, ValueError):
    pass


class EmptyCalibrationSet(EdgeOptError, ValueError):
    pass


class PlanCoverageError(EdgeOptError):
    pass


# early exits
class AttachPointError(EdgeOptError):
    pass


class UnknownAttachPoint(AttachPointError):
    pass


class AttachAtTerminal(AttachPointError):
    pass


class NotACutPoint(AttachPointError):
    """The tensor does not split the graph into two independent segments."""


class EmptyTrainingSet(EdgeOptError, ValueError):
    pass


class LabelOutOfRange(EdgeOptError, ValueError):
    pass


class UntrainedHead(EdgeOptError):
    pass


class InvalidDistribution(EdgeOptError, ValueError):
    pass


class EmptyEvalSet(EdgeOptError, ValueError):
    pass


# metrics
class EmptyRecords(EdgeOptError, ValueError):
    pass


class LengthMismatch(EdgeOptError, ValueError):
    pass


class ZeroSize(EdgeOptError, ValueError):
    pass


# data / harness
class DatasetError(EdgeOptError):
    pass


class BadMagic(DatasetError):
    pass


class CountMismatch(DatasetError):
    pass


class TruncatedFile(DatasetError):
    pass


class ParseError(DatasetError):
    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.row = row
        self.column = column


class ConfigError(EdgeOptError):
    pass


class StageError(EdgeOptError):
    """Wraps a failure with the name of the pipeline stage that raised it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
