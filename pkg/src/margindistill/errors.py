"""Exception hierarchy shared by every module.

Each error carries a stable machine-greppable code; the CLI prefixes
messages on stderr with it (e.g. ``E_DIM_MISMATCH: ...``).
"""


class MarginDistillError(Exception):
    """Base class for all library errors."""

    code = "E_ERROR"


class ZeroNorm(MarginDistillError):
    """A vector with norm below the degeneracy threshold was normalized."""

    code = "E_ZERO_NORM"


class DimensionMismatch(MarginDistillError):
    code = "E_DIM_MISMATCH"


class ShapeMismatch(MarginDistillError):
    code = "E_SHAPE_MISMATCH"


class LabelOutOfRange(MarginDistillError):
    code = "E_LABEL_RANGE"


class EmptyBatch(MarginDistillError):
    code = "E_EMPTY_BATCH"


class NonPositiveTemperature(MarginDistillError):
    code = "E_BAD_TEMPERATURE"


class InvalidConfig(MarginDistillError):
    code = "E_INVALID_CONFIG"


class IoFailure(MarginDistillError):
    code = "E_IO"


class CorruptCheckpoint(MarginDistillError):
    code = "E_CORRUPT_CHECKPOINT"


class CorruptDataset(MarginDistillError):
    code = "E_CORRUPT_DATASET"


class InsufficientSamples(MarginDistillError):
    code = "E_INSUFFICIENT_SAMPLES"


class MissingTeacher(MarginDistillError):
    code = "E_MISSING_TEACHER"


class DivergedLoss(MarginDistillError):
    code = "E_DIVERGED"


class EmptyProtocol(MarginDistillError):
    code = "E_EMPTY_PROTOCOL"


class ProtocolMismatch(MarginDistillError):
    code = "E_PROTOCOL_MISMATCH"
