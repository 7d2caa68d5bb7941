"""
Frozen image and text encoders.

Every backend maps an input to a fixed-length real vector and never changes
after construction. The ``test`` backends are small deterministic functions
that let the whole pipeline run without downloading pretrained weights; the
pretrained backends wrap ``transformers`` and ``sentence-transformers`` models
and are imported lazily.
"""

import hashlib
import logging
import os
import re
from abc import ABC, abstractmethod
from typing import Dict, Hashable, List, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from stereovol.exceptions import (
    BackendUnavailableError,
    ConfigError,
    DataError,
    DecodeFailureError,
)
from stereovol.models import EmbeddingVector, StereoSample
from stereovol.utils import verify_range

logger = logging.getLogger(__name__)

CACHE_DIR_ENV = "STEREOVOL_CACHE_DIR"

# Side of the grid of block means used by the test image encoder
TEST_GRID = 4


def load_image(image) -> np.ndarray:
    """Decode an image reference to an H x W x 3 float array in [0, 1]."""
    if isinstance(image, np.ndarray):
        array = np.asarray(image, dtype=np.float64)
    else:
        try:
            with Image.open(image) as handle:
                array = np.asarray(handle.convert("RGB"), dtype=np.float64) / 255.0
        except (OSError, UnidentifiedImageError) as err:
            raise DecodeFailureError(f"Cannot decode image '{image}': {err}") from err
    if array.ndim != 3 or array.shape[2] != 3 or array.shape[0] * array.shape[1] == 0:
        raise DecodeFailureError(
            f"Expected a non-empty H x W x 3 image, got shape {array.shape}"
        )
    if not np.all(np.isfinite(array)):
        raise DecodeFailureError("Image contains non-finite values")
    return array


def _cache_dir(cache_dir=None):
    return cache_dir or os.environ.get(CACHE_DIR_ENV)


class ImageEncoderBackend(ABC):
    """A frozen image encoder with a fixed output dimension."""

    name: str
    output_dim: int
    frozen = True
    # Crop/pad policy for non-square inputs, recorded in run manifests
    preprocessing = "none"
    # Floating point operations of one forward pass, for compute reporting
    flops_per_image = 0

    @abstractmethod
    def _encode(self, image: np.ndarray) -> np.ndarray:
        """Embed one decoded image."""

    def encode_batch(self, images: Sequence) -> np.ndarray:
        return np.stack([self._encode(load_image(image)) for image in images])

    def settings(self) -> dict:
        """Arguments that recreate this backend through ``create_image_encoder``."""
        return {"name": self.name, "dim": self.output_dim}


class TextEncoderBackend(ABC):
    """A frozen sentence encoder with a fixed output dimension."""

    name: str
    output_dim: int

    @abstractmethod
    def _encode(self, prompt: str) -> np.ndarray:
        """Embed one prompt."""

    def encode_batch(self, prompts: Sequence[str]) -> np.ndarray:
        return np.stack([self._encode(prompt) for prompt in prompts])

    def settings(self) -> dict:
        return {"name": self.name, "dim": self.output_dim}


def encode_image(backend: ImageEncoderBackend, image) -> EmbeddingVector:
    """Embed one image; identical inputs give bitwise identical vectors."""
    values = backend.encode_batch([image])[0]
    return EmbeddingVector(values, backend.output_dim)


def encode_text(backend: TextEncoderBackend, prompt: str) -> EmbeddingVector:
    """Embed one prompt."""
    if not prompt:
        raise DataError("Cannot encode an empty prompt")
    values = backend.encode_batch([prompt])[0]
    return EmbeddingVector(values, backend.output_dim)


def block_statistics(image: np.ndarray, grid: int = TEST_GRID) -> np.ndarray:
    """Channel means of the whole image followed by those of a grid of blocks.

    Every statistic is an average of pixel values, so a change of the pixels
    by delta (in the L2 sense) changes the statistics by at most
    ``sqrt(2) * |delta|``.
    """
    rows = np.array_split(np.arange(image.shape[0]), min(grid, image.shape[0]))
    cols = np.array_split(np.arange(image.shape[1]), min(grid, image.shape[1]))
    blocks = np.zeros((grid, grid, 3))
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            blocks[i, j] = image[np.ix_(r, c)].mean(axis=(0, 1))
    return np.concatenate([image.mean(axis=(0, 1)), blocks.reshape(-1)])


class TestImageEncoder(ImageEncoderBackend):
    """Seeded random projection of block statistics, plus a fixed offset."""

    __test__ = False
    name = "test"
    preprocessing = "block-means"

    def __init__(self, dim: int, seed: int = 0, grid: int = TEST_GRID):
        verify_range("dim", dim, 1, float("inf"))
        self.output_dim = int(dim)
        self.seed = int(seed)
        self.grid = int(grid)
        n_features = 3 + 3 * grid * grid
        rng = np.random.default_rng([self.seed, n_features, self.output_dim])
        self._weights = rng.standard_normal((self.output_dim, n_features)) * np.sqrt(
            8.0 / n_features
        )
        self._offset = rng.standard_normal(self.output_dim) * 0.1

    @property
    def lipschitz_bound(self) -> float:
        """Bound L with |e(x) - e(y)| <= L * |x - y| (L2 norms over pixels)."""
        return float(np.sqrt(2.0) * np.linalg.norm(self._weights, ord=2))

    def _encode(self, image):
        return self._weights @ block_statistics(image, self.grid) + self._offset

    def settings(self):
        return {"name": self.name, "dim": self.output_dim, "seed": self.seed}


def _tokens(prompt):
    return re.findall(r"[^\s]+", prompt.lower())


class TestTextEncoder(TextEncoderBackend):
    """Sum of seeded pseudo-random token vectors, scaled by 1/sqrt(#tokens)."""

    __test__ = False
    name = "test"

    def __init__(self, dim: int, seed: int = 0):
        verify_range("dim", dim, 1, float("inf"))
        self.output_dim = int(dim)
        self.seed = int(seed)
        self._tokens: Dict[str, np.ndarray] = {}

    def _token_vector(self, token):
        if token not in self._tokens:
            key = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
            rng = np.random.default_rng(list(key))
            self._tokens[token] = rng.standard_normal(self.output_dim)
        return self._tokens[token]

    def _encode(self, prompt):
        tokens = _tokens(prompt)
        if not tokens:
            raise DataError("Cannot encode a prompt without tokens")
        total = np.zeros(self.output_dim)
        for token in tokens:
            total = total + self._token_vector(token)
        return total / np.sqrt(len(tokens))

    def settings(self):
        return {"name": self.name, "dim": self.output_dim, "seed": self.seed}


def make_test_image_encoder(dim: int, seed: int = 0) -> TestImageEncoder:
    """Deterministic image backend for tests and desk-scale experiments."""
    return TestImageEncoder(dim, seed)


def make_test_text_encoder(dim: int, seed: int = 0) -> TestTextEncoder:
    """Deterministic text backend for tests and desk-scale experiments."""
    return TestTextEncoder(dim, seed)


class HuggingFaceImageEncoder(ImageEncoderBackend):
    """Pretrained vision backbone from ``transformers``.

    CLIP checkpoints return the projected image embedding, other checkpoints
    the pooled output (or the CLS token when there is no pooler).
    """

    preprocessing = "resize-shortest-side+center-crop"

    def __init__(self, name, model_id, flops_per_image=0, cache_dir=None, device=None):
        try:
            import torch
            from transformers import (
                AutoImageProcessor,
                AutoModel,
                CLIPVisionModelWithProjection,
            )
        except ImportError as err:
            raise BackendUnavailableError(
                "Pretrained image encoders need the 'pretrained' extra "
                "(pip install stereovol[pretrained])"
            ) from err

        self.name = name
        self.model_id = model_id
        self.flops_per_image = flops_per_image
        self._torch = torch
        self._device = device or "cpu"
        self._is_clip = "clip" in model_id.lower()
        try:
            self._processor = AutoImageProcessor.from_pretrained(
                model_id, cache_dir=_cache_dir(cache_dir)
            )
            model_class = CLIPVisionModelWithProjection if self._is_clip else AutoModel
            self._model = model_class.from_pretrained(
                model_id, cache_dir=_cache_dir(cache_dir)
            )
        except OSError as err:
            raise BackendUnavailableError(
                f"Cannot load weights of '{model_id}': {err}"
            ) from err
        self._model.eval().to(self._device)
        for parameter in self._model.parameters():
            parameter.requires_grad_(False)
        config = self._model.config
        self.output_dim = int(
            config.projection_dim if self._is_clip else config.hidden_size
        )

    def encode_batch(self, images):
        pil_images = [
            Image.fromarray(np.round(load_image(image) * 255).astype(np.uint8))
            for image in images
        ]
        inputs = self._processor(images=pil_images, return_tensors="pt").to(
            self._device
        )
        with self._torch.no_grad():
            outputs = self._model(**inputs)
        if self._is_clip:
            embeddings = outputs.image_embeds
        elif getattr(outputs, "pooler_output", None) is not None:
            embeddings = outputs.pooler_output
        else:
            embeddings = outputs.last_hidden_state[:, 0]
        return embeddings.double().cpu().numpy()

    def _encode(self, image):
        return self.encode_batch([image])[0]


class SentenceTransformerTextEncoder(TextEncoderBackend):
    """Pretrained sentence encoder from ``sentence-transformers``."""

    def __init__(self, name, model_id, cache_dir=None, device=None):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as err:
            raise BackendUnavailableError(
                "Pretrained text encoders need the 'pretrained' extra "
                "(pip install stereovol[pretrained])"
            ) from err
        self.name = name
        self.model_id = model_id
        try:
            self._model = SentenceTransformer(
                model_id, cache_folder=_cache_dir(cache_dir), device=device or "cpu"
            )
        except OSError as err:
            raise BackendUnavailableError(
                f"Cannot load weights of '{model_id}': {err}"
            ) from err
        self.output_dim = int(self._model.get_sentence_embedding_dimension())

    def encode_batch(self, prompts):
        embeddings = self._model.encode(
            list(prompts), convert_to_numpy=True, normalize_embeddings=False
        )
        return np.asarray(embeddings, dtype=np.float64)

    def _encode(self, prompt):
        return self.encode_batch([prompt])[0]


# Name -> (Hugging Face model id, approximate FLOPs per image)
PRETRAINED_IMAGE_ENCODERS = {
    "clip-vit-l14-336": ("openai/clip-vit-large-patch14-336", 190_700_000_000),
    "clip-vit-l14": ("openai/clip-vit-large-patch14", 81_100_000_000),
    "clip-vit-b32": ("openai/clip-vit-base-patch32", 4_400_000_000),
    "vit-l14": ("google/vit-large-patch16-224", 61_600_000_000),
    "vit-b32": ("google/vit-base-patch32-224-in21k", 4_400_000_000),
    "deit-small": ("facebook/deit-small-patch16-224", 4_600_000_000),
    "deit-base": ("facebook/deit-base-patch16-224", 17_600_000_000),
}

PRETRAINED_TEXT_ENCODERS = {
    "mpnet-v2": "sentence-transformers/all-mpnet-base-v2",
}

DEFAULT_IMAGE_ENCODER = "clip-vit-l14-336"
DEFAULT_TEXT_ENCODER = "mpnet-v2"


def create_image_encoder(name, dim=None, seed=0, cache_dir=None, device=None):
    """Build an image backend by registry name."""
    if name == "test":
        if dim is None:
            raise ConfigError("The test image encoder needs a dimension")
        return make_test_image_encoder(dim, seed)
    if name not in PRETRAINED_IMAGE_ENCODERS:
        raise ConfigError(
            f"Unknown image encoder '{name}', choose from "
            f"{['test'] + sorted(PRETRAINED_IMAGE_ENCODERS)}"
        )
    model_id, flops = PRETRAINED_IMAGE_ENCODERS[name]
    backend = HuggingFaceImageEncoder(name, model_id, flops, cache_dir, device)
    if dim is not None and dim != backend.output_dim:
        raise ConfigError(
            f"Image encoder '{name}' produces {backend.output_dim}-d embeddings, "
            f"{dim} expected"
        )
    return backend


def create_text_encoder(name, dim=None, seed=0, cache_dir=None, device=None):
    """Build a text backend by registry name."""
    if name == "test":
        if dim is None:
            raise ConfigError("The test text encoder needs a dimension")
        return make_test_text_encoder(dim, seed)
    if name not in PRETRAINED_TEXT_ENCODERS:
        raise ConfigError(
            f"Unknown text encoder '{name}', choose from "
            f"{['test'] + sorted(PRETRAINED_TEXT_ENCODERS)}"
        )
    backend = SentenceTransformerTextEncoder(
        name, PRETRAINED_TEXT_ENCODERS[name], cache_dir, device
    )
    if dim is not None and dim != backend.output_dim:
        raise ConfigError(
            f"Text encoder '{name}' produces {backend.output_dim}-d embeddings, "
            f"{dim} expected"
        )
    return backend


def _view_key(sample: StereoSample, frame_index, image) -> Hashable:
    if isinstance(image, np.ndarray):
        return (sample.item_id, frame_index)
    return str(image)


class ImageEmbeddingCache:
    """Embeddings of each (item, frame), computed once.

    The encoders are frozen, so caching does not change any output.
    """

    def __init__(self, backend: ImageEncoderBackend):
        self.backend = backend
        self._cache: Dict[Hashable, np.ndarray] = {}

    def __len__(self):
        return len(self._cache)

    def embed(self, sample: StereoSample, n_images: int = 2) -> np.ndarray:
        """Concatenated view embeddings of one sample, left view first."""
        parts: List[np.ndarray] = []
        for frame_index, image in sample.views(n_images):
            key = _view_key(sample, frame_index, image)
            if key not in self._cache:
                self._cache[key] = encode_image(self.backend, image).values
            parts.append(self._cache[key])
        return np.concatenate(parts)

    def embed_all(self, samples: Sequence[StereoSample], n_images: int = 2):
        """Stacked features of many samples, shape (N, n_images * D)."""
        return np.stack([self.embed(sample, n_images) for sample in samples])
