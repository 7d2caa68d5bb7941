"""
Build stereo samples from frame sequences and ground-truth volumes from meshes.
"""

import logging
import zlib
from typing import List, Optional, Sequence, Tuple

import numpy as np
import trimesh
from sklearn.model_selection import train_test_split

from stereovol.exceptions import (
    DataError,
    EmptyMeshError,
    OpenMeshError,
    SequenceTooShortError,
)
from stereovol.models import FrameSequence, StereoSample, TriangleMesh
from stereovol.utils import verify_positive, verify_range

logger = logging.getLogger(__name__)

# Relative tolerance of the translation check on the signed volume
TRANSLATION_RTOL = 1e-6


def _valid_pairs(n_frames, min_gap):
    return [
        (i, j) for i in range(n_frames) for j in range(i + min_gap + 1, n_frames)
    ]


def _check_length(seq: FrameSequence, min_frames, min_gap):
    if len(seq.frames) < min_frames:
        raise SequenceTooShortError(
            f"Sequence '{seq.item_id}' has {len(seq.frames)} frames, at least "
            f"{min_frames} are needed for non-consecutive sampling with "
            f"min_gap={min_gap}"
        )


def item_seed(seed, item_id) -> int:
    """Seed for one item, stable across processes and item orderings."""
    sequence = np.random.SeedSequence([seed, zlib.crc32(item_id.encode("utf-8"))])
    return int(sequence.generate_state(1)[0])


def sample_stereo_pair(
    seq: FrameSequence, min_gap: int = 1, seed: int = 0
) -> Tuple[int, int]:
    """Sample two non-consecutive frames of a sequence

    Arguments:
    ----------

        seq: FrameSequence
            Frames of one item in capture order.

        min_gap: int
            Frames whose indices differ by ``min_gap`` or less count as
            consecutive. With the default of 1 the pair satisfies j - i >= 2.

        seed: int
            Seed of the sampler, equal seeds give equal pairs.

    Returns:
    --------

        Tuple(int, int)
            Indices (i, j) with i < j and j - i > min_gap, drawn uniformly among
            all such pairs.
    """
    verify_range("min_gap", min_gap, 1, float("inf"))
    _check_length(seq, min_gap + 2, min_gap)
    pairs = _valid_pairs(len(seq.frames), min_gap)
    rng = np.random.default_rng(seed)
    return pairs[int(rng.integers(len(pairs)))]


def enumerate_training_pairs(
    seq: FrameSequence, max_pairs: int, min_gap: int = 1
) -> List[Tuple[int, int]]:
    """Enumerate distinct non-consecutive frame pairs for training

    All pairs (i, j) with j - i > min_gap in lexicographic order. When there
    are more than ``max_pairs`` of them, an evenly spaced subset of that order
    is returned so that the pairs are spread over the whole sequence.
    """
    verify_range("max_pairs", max_pairs, 1, float("inf"))
    _check_length(seq, min_gap + 2, min_gap)
    pairs = _valid_pairs(len(seq.frames), min_gap)
    if len(pairs) <= max_pairs:
        return pairs
    picks = np.round(np.linspace(0, len(pairs) - 1, max_pairs)).astype(int)
    return [pairs[i] for i in picks]


def sample_frame_set(
    seq: FrameSequence, n_images: int, min_gap: int = 1, seed: int = 0
) -> Tuple[int, ...]:
    """Sample ``n_images`` frames with pairwise gaps larger than ``min_gap``.

    Used for views beyond the stereo pair. Indices are returned in capture
    order and every subset of the same size is equally likely.
    """
    verify_range("n_images", n_images, 1, float("inf"))
    needed = (n_images - 1) * (min_gap + 1) + 1
    _check_length(seq, needed, min_gap)
    slack = len(seq.frames) - needed
    rng = np.random.default_rng(seed)
    # Stars and bars: sorted draws shifted by the mandatory gaps
    draws = np.sort(rng.choice(slack + n_images, size=n_images, replace=False))
    return tuple(int(b - k + k * (min_gap + 1)) for k, b in enumerate(draws))


def load_obj(path) -> TriangleMesh:
    """Read a triangle mesh from an OBJ file.

    Vertices at the same position are welded, since OBJ exporters duplicate
    vertices along texture seams and that would open the mesh.
    """
    loaded = trimesh.load(path, file_type="obj", force="mesh", process=False)
    vertices = np.asarray(loaded.vertices, dtype=np.float64)
    faces = np.asarray(loaded.faces, dtype=np.int64)
    welded, inverse = np.unique(vertices, axis=0, return_inverse=True)
    return TriangleMesh(vertices=welded, faces=inverse.reshape(-1)[faces])


def signed_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    """Sum of signed volumes of the tetrahedra (origin, v0, v1, v2)."""
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    return float(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0)


def _edge_problems(faces):
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    _, undirected_counts = np.unique(
        np.sort(directed, axis=1), axis=0, return_counts=True
    )
    _, directed_counts = np.unique(directed, axis=0, return_counts=True)
    boundary = int(np.count_nonzero(undirected_counts != 2))
    flipped = int(np.count_nonzero(directed_counts > 1))
    return boundary, flipped


def mesh_volume_ml(mesh: TriangleMesh, unit_scale_to_cm: float = 1.0) -> float:
    """Volume enclosed by a watertight triangle mesh

    Arguments:
    ----------

        mesh: TriangleMesh
            Closed mesh with consistently oriented faces.

        unit_scale_to_cm: float
            Length of one mesh unit in centimeters (0.1 for millimeters, 100 for
            meters).

    Returns:
    --------

        float
            Volume in mL (1 cm3 = 1 mL), never negative.

    Notes:
    ------

        The volume is the divergence-theorem sum of signed tetrahedron volumes.
        The mesh is rejected if any edge is not shared by exactly two faces, if
        two faces traverse an edge in the same direction, or if the signed sum
        changes when the mesh is translated.
    """
    verify_positive("unit_scale_to_cm", unit_scale_to_cm)
    if len(mesh.faces) == 0:
        raise EmptyMeshError("The mesh has no faces")

    boundary, flipped = _edge_problems(mesh.faces)
    if boundary:
        raise OpenMeshError(f"The mesh has {boundary} boundary or non-manifold edges")
    if flipped:
        raise OpenMeshError(f"The mesh has {flipped} inconsistently oriented edges")

    volume = signed_volume(mesh.vertices, mesh.faces)
    extent = np.ptp(mesh.vertices, axis=0)
    shifted = signed_volume(mesh.vertices + extent + 1.0, mesh.faces)
    scale = float(np.prod(extent + 1.0))
    if abs(volume - shifted) > TRANSLATION_RTOL * scale:
        raise OpenMeshError(
            f"The signed volume is not translation invariant ({volume} vs {shifted})"
        )

    return abs(volume) * unit_scale_to_cm**3


def sequence_volume_ml(seq: FrameSequence, unit_scale_to_cm: float = 1.0) -> float:
    """Ground-truth volume of a sequence, from its record or from its mesh."""
    if seq.volume_ml is not None:
        return float(seq.volume_ml)
    if seq.mesh is None:
        raise DataError(f"Sequence '{seq.item_id}' has neither a volume nor a mesh")
    return mesh_volume_ml(load_obj(seq.mesh), unit_scale_to_cm)


def _sample(seq, volume, frames):
    return StereoSample(
        item_id=seq.item_id,
        class_label=seq.class_label,
        left_image=seq.frames[frames[0]],
        right_image=seq.frames[frames[1]],
        volume_gt=volume,
        frame_indices=(frames[0], frames[1]),
        extra_images=tuple(seq.frames[i] for i in frames[2:]),
        extra_frame_indices=tuple(frames[2:]),
        food_code=seq.food_code,
    )


def _test_frames(seq, n_images, min_gap, seed):
    if n_images <= 2:
        return sample_stereo_pair(seq, min_gap, seed)
    return sample_frame_set(seq, n_images, min_gap, seed)


def _train_frames(seq, n_images, max_pairs, min_gap, seed):
    if n_images <= 2:
        return enumerate_training_pairs(seq, max_pairs, min_gap)
    frame_sets = []
    for k in range(max_pairs):
        frames = sample_frame_set(seq, n_images, min_gap, item_seed(seed + k, "set"))
        if frames not in frame_sets:
            frame_sets.append(frames)
    return frame_sets


def build_manifest(
    sequences: Sequence[FrameSequence],
    train_fraction: float = 0.8,
    seed: int = 0,
    max_pairs: int = 10,
    min_gap: int = 1,
    split_ids: Optional[Tuple[Sequence[str], Sequence[str]]] = None,
    unit_scale_to_cm: float = 1.0,
    n_images: int = 2,
) -> Tuple[List[StereoSample], List[StereoSample]]:
    """Split sequences into train and test samples

    Arguments:
    ----------

        sequences: list
            FrameSequence instances, one per item.

        train_fraction: float
            Fraction of items in the training split when ``split_ids`` is not
            given.

        seed: int
            Seed of the random split and of the per-item frame sampling.

        max_pairs: int
            Maximum number of frame combinations per training item.

        min_gap: int
            See ``sample_stereo_pair``.

        split_ids: Tuple(list, list)
            Dataset-provided train and test item ids. Overrides the random split.

        unit_scale_to_cm: float
            Mesh unit length in cm, used for items whose volume comes from a mesh.

        n_images: int
            Views per sample. 1 and 2 give stereo pairs.

    Returns:
    --------

        Tuple(list, list)
            Training samples (up to ``max_pairs`` per item) and test samples
            (exactly one per item), both sorted by item id.
    """
    if len(sequences) == 0:
        raise DataError("No sequences to build a manifest from")
    by_id = {seq.item_id: seq for seq in sequences}
    if len(by_id) != len(sequences):
        raise DataError("Sequence item ids must be unique")

    ids = sorted(by_id)
    if split_ids is not None:
        train_ids, test_ids = sorted(split_ids[0]), sorted(split_ids[1])
        unknown = set(train_ids + test_ids) - set(ids)
        if unknown:
            raise DataError(f"Split lists name unknown items {sorted(unknown)}")
        if set(train_ids) & set(test_ids):
            raise DataError("Train and test split lists overlap")
    else:
        verify_range("train_fraction", train_fraction, 0.0, 1.0)
        if train_fraction == 1.0:
            train_ids, test_ids = ids, []
        elif train_fraction == 0.0:
            train_ids, test_ids = [], ids
        else:
            n_train = int(np.floor(train_fraction * len(ids)))
            if not 0 < n_train < len(ids):
                raise DataError(
                    f"A train fraction of {train_fraction} leaves an empty train or "
                    f"test split of {len(ids)} items, use 0.0 or 1.0 to put every "
                    "item in one split"
                )
            train_ids, test_ids = train_test_split(
                ids, train_size=n_train, random_state=seed, shuffle=True
            )
            train_ids, test_ids = sorted(train_ids), sorted(test_ids)

    train, test = [], []
    for item_id in train_ids:
        seq = by_id[item_id]
        volume = sequence_volume_ml(seq, unit_scale_to_cm)
        frame_sets = _train_frames(
            seq, n_images, max_pairs, min_gap, item_seed(seed, item_id)
        )
        train.extend(_sample(seq, volume, frames) for frames in frame_sets)
    for item_id in test_ids:
        seq = by_id[item_id]
        volume = sequence_volume_ml(seq, unit_scale_to_cm)
        frames = _test_frames(seq, n_images, min_gap, item_seed(seed, item_id))
        test.append(_sample(seq, volume, frames))

    logger.info(
        "Built manifest with %d train items (%d samples) and %d test items",
        len(train_ids),
        len(train),
        len(test_ids),
    )
    return train, test
