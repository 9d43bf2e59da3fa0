from __future__ import annotations


class DtnError(Exception):
    """Base class for every error raised on purpose by this package."""


class TensorError(DtnError):
    pass


class ShapeMismatchError(TensorError, ValueError):
    pass


class NonScalarLossError(TensorError, ValueError):
    pass


class ForeignNodeError(TensorError):
    """A tensor was used with a tape that did not record it."""


class EmbeddingError(DtnError, ValueError):
    pass


class FeatureRangeError(EmbeddingError):
    pass


class ZeroNormError(EmbeddingError):
    pass


class LayerError(DtnError):
    pass


class DegenerateContextError(LayerError, ArithmeticError):
    pass


class ConfigurationError(LayerError, ValueError):
    pass


class HeadError(DtnError, ValueError):
    pass


class TrainingError(DtnError):
    pass


class NonFiniteLossError(TrainingError, ArithmeticError):
    pass


class InvalidLabelError(TrainingError, ValueError):
    pass


class AutomatonError(DtnError, ValueError):
    pass


class AttentionError(DtnError, ValueError):
    pass


class DatasetError(DtnError):
    pass


class IdxFormatError(DatasetError, ValueError):
    pass


class CheckpointError(DtnError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnknownTopologyError(CheckpointError):
    pass


class ConfigError(DtnError, ValueError):
    pass
