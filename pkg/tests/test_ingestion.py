import numpy as np
import trimesh
from fixtures import (
    UNIT_CUBE,
    UNIT_CUBE_FACES,
    UNIT_CUBE_VERTICES,
    cube_obj_text,
    make_sequences,
    path_sequence,
)
from pytest import approx, raises

from stereovol.exceptions import (
    DataError,
    EmptyMeshError,
    OpenMeshError,
    SequenceTooShortError,
)
from stereovol.ingestion import (
    build_manifest,
    enumerate_training_pairs,
    item_seed,
    load_obj,
    mesh_volume_ml,
    sample_frame_set,
    sample_stereo_pair,
    sequence_volume_ml,
)
from stereovol.models import FrameSequence, TriangleMesh


def test_sample_stereo_pair_is_non_consecutive():
    seq = path_sequence(n_frames=8)
    pairs = {sample_stereo_pair(seq, seed=seed) for seed in range(1000)}
    assert all(j - i >= 2 for i, j in pairs)
    # 8 frames have 21 pairs with a gap of at least 2, all reachable
    assert len(pairs) == 21


def test_sample_stereo_pair_is_deterministic():
    seq = path_sequence(n_frames=30)
    assert sample_stereo_pair(seq, seed=7) == sample_stereo_pair(seq, seed=7)


def test_sample_stereo_pair_larger_gap():
    seq = path_sequence(n_frames=6)
    for seed in range(50):
        i, j = sample_stereo_pair(seq, min_gap=3, seed=seed)
        assert j - i > 3


def test_sample_stereo_pair_too_short():
    """Test that two frames cannot give a non-consecutive pair."""
    with raises(SequenceTooShortError):
        sample_stereo_pair(path_sequence(n_frames=2))
    with raises(SequenceTooShortError):
        sample_stereo_pair(path_sequence(n_frames=4), min_gap=3)


def test_enumerate_training_pairs():
    assert enumerate_training_pairs(path_sequence(n_frames=4), 10) == [
        (0, 2),
        (0, 3),
        (1, 3),
    ]
    assert enumerate_training_pairs(path_sequence(n_frames=3), 1) == [(0, 2)]


def test_enumerate_training_pairs_truncation_is_spread():
    pairs = enumerate_training_pairs(path_sequence(n_frames=20), 10)
    assert len(pairs) == 10
    assert len(set(pairs)) == 10
    assert pairs[0] == (0, 2)
    assert pairs[-1] == (17, 19)
    assert all(j - i >= 2 for i, j in pairs)


def test_sample_frame_set():
    seq = path_sequence(n_frames=12)
    for seed in range(50):
        frames = sample_frame_set(seq, 4, min_gap=1, seed=seed)
        assert len(frames) == 4
        assert all(b - a >= 2 for a, b in zip(frames, frames[1:]))
        assert 0 <= frames[0] and frames[-1] < 12


def test_sample_frame_set_tight():
    """Test that a sequence of exactly the needed length gives every other frame."""
    seq = path_sequence(n_frames=5)
    assert sample_frame_set(seq, 3, min_gap=1, seed=3) == (0, 2, 4)
    with raises(SequenceTooShortError):
        sample_frame_set(path_sequence(n_frames=4), 3)


def test_item_seed_is_stable():
    assert item_seed(0, "apple-001") == item_seed(0, "apple-001")
    assert item_seed(0, "apple-001") != item_seed(0, "apple-002")
    assert item_seed(0, "apple-001") != item_seed(1, "apple-001")


def test_build_manifest_split():
    sequences = [path_sequence(f"item-{k}") for k in range(10)]
    train, test = build_manifest(sequences, train_fraction=0.8, max_pairs=3)
    train_ids = {s.item_id for s in train}
    test_ids = {s.item_id for s in test}
    assert len(train_ids) == 8
    assert len(test_ids) == 2
    assert not train_ids & test_ids
    assert len(train) == 8 * 3
    assert len(test) == 2
    assert [s.item_id for s in test] == sorted(test_ids)


def test_build_manifest_is_deterministic():
    sequences = [path_sequence(f"item-{k}") for k in range(10)]
    first = build_manifest(sequences, seed=3)
    second = build_manifest(list(reversed(sequences)), seed=3)
    for a, b in zip(first, second):
        assert [(s.item_id, s.frame_indices) for s in a] == [
            (s.item_id, s.frame_indices) for s in b
        ]


def test_build_manifest_split_ids():
    sequences = [path_sequence(f"item-{k}") for k in range(4)]
    train, test = build_manifest(
        sequences, split_ids=(["item-0", "item-1"], ["item-3"])
    )
    assert {s.item_id for s in train} == {"item-0", "item-1"}
    assert [s.item_id for s in test] == ["item-3"]

    with raises(DataError):
        build_manifest(sequences, split_ids=(["item-0"], ["item-0"]))
    with raises(DataError):
        build_manifest(sequences, split_ids=(["item-9"], []))


def test_build_manifest_rejects_bad_input():
    with raises(DataError):
        build_manifest([])
    with raises(DataError):
        build_manifest([path_sequence("a"), path_sequence("a")])


def test_build_manifest_split_too_small():
    """Test that a fraction leaving one split empty raises DataError."""
    with raises(DataError, match="empty train or test split"):
        build_manifest([path_sequence("a")], train_fraction=0.8)
    with raises(DataError):
        build_manifest([path_sequence("a"), path_sequence("b")], train_fraction=0.4)
    train, test = build_manifest([path_sequence("a")], train_fraction=1.0)
    assert {s.item_id for s in train} == {"a"}
    assert test == []


def test_build_manifest_more_views():
    sequences = make_sequences(n_per_class=2)
    train, test = build_manifest(sequences, n_images=3, max_pairs=4)
    assert all(len(s.extra_images) == 1 for s in train + test)
    for sample in train + test:
        frames = [frame for frame, _ in sample.views(3)]
        assert all(b - a >= 2 for a, b in zip(frames, frames[1:]))


def test_build_manifest_carries_volume_and_food_code():
    sequences = make_sequences(n_per_class=2)
    train, test = build_manifest(sequences)
    by_id = {seq.item_id: seq for seq in sequences}
    for sample in train + test:
        assert sample.volume_gt == by_id[sample.item_id].volume_ml
        assert sample.food_code == f"FC-{sample.class_label}"


def test_mesh_volume_unit_cube():
    assert mesh_volume_ml(UNIT_CUBE) == approx(1.0, abs=1e-12)
    # Units of 10 cm
    assert mesh_volume_ml(UNIT_CUBE, unit_scale_to_cm=10.0) == approx(1000.0)


def test_mesh_volume_does_not_depend_on_position_or_orientation():
    shifted = TriangleMesh(UNIT_CUBE_VERTICES + [5.0, -3.0, 100.0], UNIT_CUBE_FACES)
    assert mesh_volume_ml(shifted) == approx(1.0)
    inward = TriangleMesh(UNIT_CUBE_VERTICES, UNIT_CUBE_FACES[:, ::-1])
    assert mesh_volume_ml(inward) == approx(1.0)


def test_mesh_volume_does_not_depend_on_face_order():
    sphere = trimesh.creation.icosphere(subdivisions=3, radius=2.5)
    expected = mesh_volume_ml(TriangleMesh(sphere.vertices, sphere.faces))
    rng = np.random.default_rng(0)
    for _ in range(5):
        faces = sphere.faces[rng.permutation(len(sphere.faces))]
        # Cyclic rotation keeps each face's orientation
        faces = np.roll(faces, rng.integers(0, 3), axis=1)
        volume = mesh_volume_ml(TriangleMesh(sphere.vertices, faces))
        assert volume == approx(expected, rel=1e-9)


def test_mesh_volume_icosphere():
    sphere = trimesh.creation.icosphere(subdivisions=4, radius=1.0)
    mesh = TriangleMesh(sphere.vertices, sphere.faces)
    assert mesh_volume_ml(mesh) == approx(4.0 / 3.0 * np.pi, rel=5e-3)


def test_mesh_volume_open_mesh():
    """Test that a cube missing a face raises OpenMeshError."""
    open_cube = TriangleMesh(UNIT_CUBE_VERTICES, UNIT_CUBE_FACES[2:])
    with raises(OpenMeshError) as info:
        mesh_volume_ml(open_cube)
    assert "boundary" in str(info)


def test_mesh_volume_inconsistent_orientation():
    faces = UNIT_CUBE_FACES.copy()
    faces[0] = faces[0, ::-1]
    with raises(OpenMeshError):
        mesh_volume_ml(TriangleMesh(UNIT_CUBE_VERTICES, faces))


def test_mesh_volume_empty_mesh():
    with raises(EmptyMeshError):
        mesh_volume_ml(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))))


def test_load_obj(tmp_path):
    path = tmp_path / "cube.obj"
    path.write_text(cube_obj_text())
    mesh = load_obj(path)
    assert len(mesh.faces) == 12
    assert mesh_volume_ml(mesh) == approx(1.0)


def test_sequence_volume_from_mesh(tmp_path):
    path = tmp_path / "cube.obj"
    path.write_text(cube_obj_text())
    seq = FrameSequence("cube", "box", ("a.png", "b.png", "c.png"), mesh=str(path))
    assert sequence_volume_ml(seq, unit_scale_to_cm=2.0) == approx(8.0)

    with raises(DataError):
        sequence_volume_ml(FrameSequence("x", "box", ("a.png", "b.png")))
