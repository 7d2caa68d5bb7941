"""Data models shared by every stereovol module."""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from stereovol.exceptions import (
    DataError,
    DegenerateFramePairError,
    NonPositiveVolumeError,
    UnknownClassError,
)
from stereovol.utils import verify_finite, verify_range, verify_set

# Image embeddings of the default encoders (CLIP ViT-L/14@336px, MPNet)
DEFAULT_EMBEDDING_DIM = 768

FUSION_INPUTS = ["stereo+text", "stereo", "text"]
TEMPLATE_IDS = [0, 1, 2, 3, 4, 5]

# Reported volumes are never negative
REPORT_FLOOR_ML = 0.0

# An image is either a path on disk or an H x W x 3 array with values in [0, 1]
ImageRef = Union[str, np.ndarray]


def _check_sample(sample):
    if not sample.item_id:
        raise DataError("item_id must be a non-empty string")
    if not sample.class_label:
        raise DataError(f"Item '{sample.item_id}' has an empty class label")
    if not sample.volume_gt > 0:
        raise NonPositiveVolumeError(
            f"Item '{sample.item_id}' has volume {sample.volume_gt} mL, must be > 0"
        )
    frames = tuple(sample.frame_indices) + tuple(sample.extra_frame_indices)
    if any(index < 0 for index in frames):
        raise DataError(f"Item '{sample.item_id}' has negative frame indices {frames}")
    if sample.frame_indices[0] == sample.frame_indices[1]:
        raise DegenerateFramePairError(
            f"Item '{sample.item_id}' pairs frame {sample.frame_indices[0]} with itself"
        )
    if len(set(frames)) != len(frames):
        raise DegenerateFramePairError(
            f"Item '{sample.item_id}' repeats frames in {frames}"
        )
    if len(sample.extra_images) != len(sample.extra_frame_indices):
        raise DataError(
            f"Item '{sample.item_id}' has {len(sample.extra_images)} extra images "
            f"but {len(sample.extra_frame_indices)} extra frame indices"
        )


@dataclass(frozen=True)
class StereoSample:
    """One item: a stereo pair of frames, its class and its true volume."""

    item_id: str
    class_label: str
    left_image: ImageRef
    right_image: ImageRef
    volume_gt: float  # mL
    frame_indices: Tuple[int, int]
    # Views beyond the pair, only used by the image-count ablation
    extra_images: Tuple[ImageRef, ...] = ()
    extra_frame_indices: Tuple[int, ...] = ()
    food_code: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "frame_indices", tuple(self.frame_indices))
        object.__setattr__(self, "extra_images", tuple(self.extra_images))
        object.__setattr__(
            self, "extra_frame_indices", tuple(self.extra_frame_indices)
        )
        _check_sample(self)

    def views(self, n_images=2) -> List[Tuple[int, ImageRef]]:
        """(frame index, image) of the first ``n_images`` views, left first."""
        views = [
            (self.frame_indices[0], self.left_image),
            (self.frame_indices[1], self.right_image),
        ]
        views.extend(zip(self.extra_frame_indices, self.extra_images))
        if n_images > len(views):
            raise DataError(
                f"Item '{self.item_id}' has {len(views)} views, {n_images} requested"
            )
        return views[:n_images]


@dataclass(frozen=True)
class ClassVocabulary:
    """Ordered class names; the order defines the classifier's output indices."""

    names: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) == 0:
            raise DataError("A class vocabulary needs at least one class")
        if len(set(self.names)) != len(self.names):
            raise DataError(f"Class names are not unique: {self.names}")
        if any(not name for name in self.names):
            raise DataError("Class names must be non-empty")
        object.__setattr__(
            self, "_indices", {name: i for i, name in enumerate(self.names)}
        )

    @classmethod
    def from_labels(cls, labels):
        """Vocabulary of the distinct labels, sorted alphabetically."""
        return cls(tuple(sorted(set(labels))))

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self._indices

    def index(self, name) -> int:
        try:
            return self._indices[name]
        except KeyError as err:
            raise UnknownClassError(
                f"Class '{name}' is not in the vocabulary {list(self.names)}"
            ) from err

    def name(self, index) -> str:
        return self.names[index]


def validate_sample(sample: StereoSample, vocab: ClassVocabulary) -> StereoSample:
    """Return ``sample`` unchanged if it holds all invariants for ``vocab``."""
    _check_sample(sample)
    if sample.class_label not in vocab:
        raise UnknownClassError(
            f"Item '{sample.item_id}' has class '{sample.class_label}' which is "
            "not in the vocabulary"
        )
    return sample


@dataclass(frozen=True)
class EmbeddingVector:
    """A finite real vector produced by an encoder."""

    values: np.ndarray
    dim: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != self.dim:
            raise DataError(
                f"Embedding of shape {values.shape} does not have dimension {self.dim}"
            )
        verify_finite("values", values)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def of(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(values, values.shape[-1])


@dataclass(frozen=True)
class StereoFeature:
    """Ordered concatenation of per-view embeddings, left view first."""

    values: np.ndarray

    @classmethod
    def from_views(cls, *embeddings: EmbeddingVector):
        values = np.concatenate([embedding.values for embedding in embeddings])
        values.setflags(write=False)
        return cls(values)

    @property
    def dim(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and architecture settings for the fusion model."""

    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_mse: float = 1.0
    mu_ce: float = 0.5
    seed: int = 0
    projection_dim: int = 512  # K
    classifier_hidden: int = 0  # 0: single affine layer
    regressor_hidden: Optional[int] = None  # None: K // 2
    n_images: int = 2
    fusion_inputs: str = "stereo+text"
    teacher_forcing: float = 0.0
    standardize_targets: bool = False
    deterministic: bool = True
    template_id: int = 5
    volume_decimals: int = 1
    max_pairs: int = 10
    min_gap: int = 1

    def __post_init__(self):
        verify_range("epochs", self.epochs, 1, 1_000_000)
        verify_range("batch_size", self.batch_size, 1, 1_000_000)
        verify_range("learning_rate", self.learning_rate, 0.0, 10.0)
        verify_range("adam_beta1", self.adam_beta1, 0.0, 0.999999)
        verify_range("adam_beta2", self.adam_beta2, 0.0, 0.999999)
        verify_range("adam_eps", self.adam_eps, 1e-300, 1.0)
        verify_range("lambda_mse", self.lambda_mse, 0.0, float("inf"))
        verify_range("mu_ce", self.mu_ce, 0.0, float("inf"))
        if self.lambda_mse == 0 and self.mu_ce == 0:
            raise ValueError("lambda_mse and mu_ce cannot both be 0")
        verify_range("seed", self.seed, 0, 2**32 - 1)
        verify_range("projection_dim", self.projection_dim, 2, 1_000_000)
        verify_range("classifier_hidden", self.classifier_hidden, 0, 1_000_000)
        if self.regressor_hidden is not None:
            verify_range("regressor_hidden", self.regressor_hidden, 1, 1_000_000)
        verify_range("n_images", self.n_images, 1, 1_000)
        verify_set("fusion_inputs", self.fusion_inputs, FUSION_INPUTS)
        verify_range("teacher_forcing", self.teacher_forcing, 0.0, 1.0)
        verify_set("standardize_targets", self.standardize_targets, [True, False])
        verify_set("deterministic", self.deterministic, [True, False])
        verify_set("template_id", self.template_id, TEMPLATE_IDS)
        verify_range("volume_decimals", self.volume_decimals, 0, 6)
        verify_range("max_pairs", self.max_pairs, 1, 1_000_000)
        verify_range("min_gap", self.min_gap, 1, 1_000_000)


@dataclass(frozen=True)
class FrameSequence:
    """Frames of one item captured while the camera moves around it."""

    item_id: str
    class_label: str
    frames: Tuple[ImageRef, ...]
    mesh: Optional[str] = None
    volume_ml: Optional[float] = None
    food_code: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if len(self.frames) < 2:
            raise DataError(
                f"Sequence '{self.item_id}' has {len(self.frames)} frames, needs >= 2"
            )
        if self.volume_ml is not None and not self.volume_ml > 0:
            raise NonPositiveVolumeError(
                f"Sequence '{self.item_id}' has volume {self.volume_ml} mL"
            )


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Triangle mesh with vertices in a consistent length unit."""

    vertices: np.ndarray  # (n, 3)
    faces: np.ndarray  # (m, 3) vertex indices

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        verify_finite("vertices", vertices)
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise DataError(
                f"Face indices must be in [0, {len(vertices)}), got "
                f"[{faces.min()}, {faces.max()}]"
            )
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)


@dataclass(frozen=True)
class PredictionRecord:
    """Estimated and true volume of one item."""

    item_id: str
    class_label: str
    volume_est: float  # mL
    volume_gt: float  # mL
    predicted_class: Optional[str] = None
    prompt: Optional[str] = None
    food_code: Optional[str] = None
    # Set when an estimate below the report floor was raised to it
    clipped: bool = False
    volume_raw: Optional[float] = None  # mL, unclipped model output

    def clip(self, floor_ml: float = REPORT_FLOOR_ML) -> "PredictionRecord":
        """The record with its estimate raised to floor_ml if it is below it."""
        if self.volume_est >= floor_ml:
            return self
        raw = self.volume_raw if self.clipped else self.volume_est
        return replace(self, volume_est=floor_ml, clipped=True, volume_raw=raw)


@dataclass(frozen=True)
class PredictionSet:
    """Predictions of one method over a test set."""

    records: Tuple[PredictionRecord, ...]
    method: str = "ours"

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        ids = [record.item_id for record in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("Prediction item ids must be unique")
        for record in self.records:
            if not record.volume_gt > 0:
                raise NonPositiveVolumeError(
                    f"Item '{record.item_id}' has ground-truth volume "
                    f"{record.volume_gt} mL"
                )

    def __len__(self):
        return len(self.records)

    @property
    def estimates(self):
        return np.array([record.volume_est for record in self.records], dtype=float)

    @property
    def ground_truth(self):
        return np.array([record.volume_gt for record in self.records], dtype=float)

    @property
    def n_clipped(self):
        return sum(record.clipped for record in self.records)


@dataclass(frozen=True)
class MetricsReport:
    """Regression metrics of a prediction set."""

    mae_ml: float
    mape_percent: float
    pearson_r: float
    r_squared: float
    cosine_similarity: float
    n_items: int
    classification_accuracy: Optional[float] = None
    method: str = "ours"
    n_clipped: int = 0
    extra: Dict[str, float] = field(default_factory=dict)
