"""
Shared test data.

Synthetic items are squares of a class-specific colour on a grey background.
The square's area is proportional to a latent size s, and the true volume is
the class base volume times s, so volume is recoverable from the pixels.
"""

import numpy as np

from stereovol.encoders import make_test_image_encoder, make_test_text_encoder
from stereovol.ingestion import build_manifest
from stereovol.models import (
    ClassVocabulary,
    FrameSequence,
    PredictionRecord,
    PredictionSet,
    StereoSample,
    TrainConfig,
    TriangleMesh,
)

IMAGE_SIZE = 32
N_FRAMES = 6
FRAME_SHIFT_PX = 1.5
BACKGROUND = 0.2
# Side of the square at s = 1
BASE_SIDE_PX = 10.0
SIZE_RANGE = (0.6, 1.4)

CLASS_BASE_VOLUMES = {
    "apple": 250.0,
    "banana": 150.0,
    "bread": 400.0,
    "cake": 600.0,
    "egg": 100.0,
}

CLASS_COLORS = {
    "apple": (0.9, 0.1, 0.1),
    "banana": (0.95, 0.9, 0.1),
    "bread": (0.6, 0.4, 0.2),
    "cake": (0.9, 0.6, 0.9),
    "egg": (0.95, 0.95, 0.95),
}

SYNTHETIC_VOCAB = ClassVocabulary.from_labels(CLASS_BASE_VOLUMES)

# Embedding sizes of the deterministic test encoders
TEST_IMAGE_DIM = 32
TEST_TEXT_DIM = 32

FAST_CONFIG = TrainConfig(
    epochs=3,
    batch_size=16,
    projection_dim=16,
    max_pairs=3,
)


def _coverage(lo, hi, n):
    """Fraction of each unit pixel interval [k, k + 1) inside [lo, hi]."""
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1.0, hi) - np.maximum(edges, lo), 0.0, 1.0)


def render_square(color, size, frame, image_size=IMAGE_SIZE):
    """Anti-aliased square whose area is BASE_SIDE_PX**2 * size pixels.

    The square moves FRAME_SHIFT_PX to the right with every frame, as if the
    camera moved around the object.
    """
    side = BASE_SIDE_PX * np.sqrt(size)
    cx = image_size / 2 + FRAME_SHIFT_PX * (frame - (N_FRAMES - 1) / 2)
    cy = image_size / 2
    cov_x = _coverage(cx - side / 2, cx + side / 2, image_size)
    cov_y = _coverage(cy - side / 2, cy + side / 2, image_size)
    coverage = np.outer(cov_y, cov_x)[:, :, None]
    return BACKGROUND * (1.0 - coverage) + np.asarray(color) * coverage


def make_sequences(n_per_class=4, seed=0):
    """FrameSequence per synthetic item, with in-memory frames."""
    rng = np.random.default_rng(seed)
    sequences = []
    for label in sorted(CLASS_BASE_VOLUMES):
        for k in range(n_per_class):
            size = rng.uniform(*SIZE_RANGE)
            sequences.append(
                FrameSequence(
                    item_id=f"{label}-{k:03d}",
                    class_label=label,
                    frames=tuple(
                        render_square(CLASS_COLORS[label], size, frame)
                        for frame in range(N_FRAMES)
                    ),
                    volume_ml=CLASS_BASE_VOLUMES[label] * size,
                    food_code=f"FC-{label}",
                )
            )
    return sequences


def path_sequence(item_id="item-0", class_label="apple", n_frames=N_FRAMES):
    """Sequence whose frames are file names only, for sampling tests."""
    return FrameSequence(
        item_id=item_id,
        class_label=class_label,
        frames=tuple(f"{item_id}/frame_{k:03d}.png" for k in range(n_frames)),
        volume_ml=CLASS_BASE_VOLUMES.get(class_label, 100.0),
    )


def make_sample(
    item_id="apple-000", class_label="apple", volume=250.0, frames=(0, 2), size=1.0
):
    color = CLASS_COLORS.get(class_label, (0.5, 0.5, 0.5))
    return StereoSample(
        item_id=item_id,
        class_label=class_label,
        left_image=render_square(color, size, frames[0]),
        right_image=render_square(color, size, frames[1]),
        volume_gt=volume,
        frame_indices=frames,
    )


def make_predictions(estimates, ground_truth, method="ours", labels=None):
    labels = labels or ["apple"] * len(estimates)
    return PredictionSet(
        tuple(
            PredictionRecord(
                item_id=f"item-{k:04d}",
                class_label=label,
                volume_est=float(est),
                volume_gt=float(gt),
            )
            for k, (est, gt, label) in enumerate(zip(estimates, ground_truth, labels))
        ),
        method=method,
    )


UNIT_CUBE_VERTICES = np.array(
    [
        [0, 0, 0],
        [1, 0, 0],
        [1, 1, 0],
        [0, 1, 0],
        [0, 0, 1],
        [1, 0, 1],
        [1, 1, 1],
        [0, 1, 1],
    ],
    dtype=np.float64,
)

# Counter-clockwise seen from outside
UNIT_CUBE_FACES = np.array(
    [
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [3, 7, 6],
        [3, 6, 2],
        [0, 4, 7],
        [0, 7, 3],
        [1, 2, 6],
        [1, 6, 5],
    ]
)

UNIT_CUBE = TriangleMesh(UNIT_CUBE_VERTICES, UNIT_CUBE_FACES)


def cube_obj_text():
    lines = [f"v {x:g} {y:g} {z:g}" for x, y, z in UNIT_CUBE_VERTICES]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in UNIT_CUBE_FACES]
    return "\n".join(lines) + "\n"


def synthetic_split(n_per_class=4, seed=0, max_pairs=3, n_images=2):
    """Train and test samples with the last fifth of every class held out."""
    sequences = make_sequences(n_per_class, seed)
    n_test = max(1, round(0.2 * n_per_class))
    test_ids = [
        seq.item_id
        for seq in sequences
        if int(seq.item_id.rsplit("-", 1)[1]) >= n_per_class - n_test
    ]
    train_ids = [seq.item_id for seq in sequences if seq.item_id not in test_ids]
    return build_manifest(
        sequences,
        seed=seed,
        max_pairs=max_pairs,
        split_ids=(train_ids, test_ids),
        n_images=n_images,
    )


def synthetic_encoders(seed=0):
    return (
        make_test_image_encoder(TEST_IMAGE_DIM, seed),
        make_test_text_encoder(TEST_TEXT_DIM, seed),
    )
