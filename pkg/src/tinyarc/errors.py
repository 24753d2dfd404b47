"""Exception hierarchy shared across the package."""


class TinyArcError(Exception):
    """Base class for every error raised by tinyarc."""


class GridError(TinyArcError, ValueError):
    """A raw board failed validation or two boards are incompatible."""


class EmptyGrid(GridError):
    pass


class RaggedRows(GridError):
    pass


class ColorOutOfRange(GridError):
    pass


class OversizeGrid(GridError):
    pass


class ShapeMismatch(GridError):
    pass


class DecodeError(TinyArcError, ValueError):
    """Token sequence is not the encoding of any grid."""


class BadHeader(DecodeError):
    pass


class RowLengthMismatch(DecodeError):
    pass


class RowCountMismatch(DecodeError):
    pass


class UnexpectedToken(DecodeError):
    pass


class TrailingTokens(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class InconsistentBounds(TinyArcError, ValueError):
    pass


class ContextOverflow(TinyArcError):
    """An episode cannot be made to fit the context window."""


class ModelError(TinyArcError):
    pass


class InvalidConfig(ModelError, ValueError):
    pass


class ContextExceeded(ModelError):
    pass


class UnknownToken(ModelError, ValueError):
    pass


class EmptyMask(ModelError, ValueError):
    pass


class NonFiniteGradient(ModelError, FloatingPointError):
    pass


class NoTrainableEpisodes(ModelError):
    pass


class CheckpointError(TinyArcError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CheckpointShapeMismatch(CheckpointError):
    """Manifest shapes disagree with the stored config."""


class UnknownTarget(TinyArcError, KeyError):
    pass


class EmptyTTTSet(TinyArcError):
    pass


class NoCandidates(TinyArcError):
    pass


class AllViewsSkipped(TinyArcError):
    pass


class TaskLoadError(TinyArcError):
    pass


class ParseError(TaskLoadError):
    pass


class SchemaError(TaskLoadError):
    pass


class GridValidationError(TaskLoadError):
    def __init__(self, task_id: str, location: str, cause: Exception):
        super().__init__(f"task {task_id}: {location}: {cause}")
        self.task_id = task_id
        self.location = location
        self.cause = cause


class MissingSolution(TaskLoadError):
    pass


class NoStrategies(TinyArcError, ValueError):
    pass
