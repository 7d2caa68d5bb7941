"""stereovol - Text-guided stereo volume estimation."""

try:
    from stereovol._version import __version__
except ImportError:  # pragma: no cover
    __version__ = "0.0.0"

from stereovol.models import (
    ClassVocabulary,
    EmbeddingVector,
    MetricsReport,
    PredictionRecord,
    PredictionSet,
    StereoFeature,
    StereoSample,
    TrainConfig,
)

__all__ = [
    "ClassVocabulary",
    "EmbeddingVector",
    "MetricsReport",
    "PredictionRecord",
    "PredictionSet",
    "StereoFeature",
    "StereoSample",
    "TrainConfig",
]
