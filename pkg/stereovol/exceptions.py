"""
Exceptions raised by stereovol.

Input validation errors derive from ``ValueError`` so that code catching
``ValueError`` around data preparation keeps working. Each family carries the
exit code used by the command line interface.
"""


class StereoVolError(Exception):
    """Base class for all stereovol errors."""

    exit_code = 1


# Data and input validation


class DataError(StereoVolError, ValueError):
    """Invalid or inconsistent input data."""

    exit_code = 2


class UnknownClassError(DataError):
    """A class label is not part of the vocabulary or prior table."""


class NonPositiveVolumeError(DataError):
    """A volume that must be strictly positive is not."""


class DegenerateFramePairError(DataError):
    """Left and right frames of a stereo sample are the same frame."""


class SequenceTooShortError(DataError):
    """A frame sequence has too few frames for non-consecutive sampling."""


class EmptyClassError(DataError):
    """A vocabulary class has no training samples."""


class EmptyMeshError(DataError):
    """A mesh has no faces."""


class OpenMeshError(DataError):
    """A mesh is not watertight."""


class LengthMismatchError(DataError):
    """Two sequences that must be aligned have different lengths."""


class EmptyBatchError(DataError):
    """A loss was requested over zero items."""


class IndexOutOfRangeError(DataError):
    """A class index is outside [0, C)."""


class ZeroGroundTruthError(DataError):
    """A ground-truth volume is zero or negative, MAPE is undefined."""


class TooFewItemsError(DataError):
    """Too few items for a statistic to be defined."""


class DataEmptyError(DataError):
    """No training data."""


class DimMismatchError(DataError):
    """Embedding dimensions do not match the model."""


class ShapeMismatchError(DataError):
    """Parameter, gradient or optimizer state shapes do not match."""


class MissingContextError(DataError):
    """A context-aware prompt was requested without context text."""


# Encoders


class EncoderError(StereoVolError):
    exit_code = 3


class DecodeFailureError(EncoderError):
    """An image could not be decoded."""


class BackendUnavailableError(EncoderError):
    """A pretrained backend or its weights cannot be loaded."""


# Model and training


class ModelError(StereoVolError):
    exit_code = 4


class CheckpointMismatchError(ModelError):
    """A checkpoint does not fit the encoders or data it is used with."""


class NonFiniteLossError(ModelError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


# External VLM baseline


class VlmError(StereoVolError):
    exit_code = 5


class UnparseableResponseError(VlmError, ValueError):
    """A chat-completion answer does not follow the requested format."""


class TransportError(VlmError):
    """The chat-completion transport failed."""


# Configuration


class ConfigError(StereoVolError, ValueError):
    exit_code = 6
