from dataclasses import replace

import numpy as np
from fixtures import make_predictions, make_sample
from pytest import raises

from stereovol.exceptions import (
    DataError,
    DegenerateFramePairError,
    NonPositiveVolumeError,
    UnknownClassError,
)
from stereovol.models import (
    ClassVocabulary,
    EmbeddingVector,
    FrameSequence,
    PredictionRecord,
    PredictionSet,
    StereoFeature,
    TrainConfig,
    TriangleMesh,
    validate_sample,
)

VALID_SAMPLE = make_sample()


def test_stereo_sample_valid_creation():
    """Test that a valid StereoSample can be created without errors."""
    sample = VALID_SAMPLE
    assert sample.item_id == "apple-000"
    assert sample.frame_indices == (0, 2)
    assert sample.volume_gt == 250.0
    assert sample.extra_images == ()


def test_stereo_sample_lists_become_tuples():
    sample = replace(VALID_SAMPLE, frame_indices=[1, 4])
    assert sample.frame_indices == (1, 4)


def test_stereo_sample_non_positive_volume():
    """Test that zero and negative volumes raise NonPositiveVolumeError."""
    with raises(NonPositiveVolumeError) as info:
        replace(VALID_SAMPLE, volume_gt=0.0)
    assert "apple-000" in str(info)

    with raises(NonPositiveVolumeError):
        replace(VALID_SAMPLE, volume_gt=-3.0)


def test_stereo_sample_same_frame_twice():
    """Test that pairing a frame with itself raises DegenerateFramePairError."""
    with raises(DegenerateFramePairError):
        replace(VALID_SAMPLE, frame_indices=(3, 3))

    with raises(DegenerateFramePairError):
        replace(
            VALID_SAMPLE,
            extra_images=(VALID_SAMPLE.left_image,),
            extra_frame_indices=(2,),
        )


def test_stereo_sample_invalid_identity():
    with raises(DataError):
        replace(VALID_SAMPLE, item_id="")
    with raises(DataError):
        replace(VALID_SAMPLE, class_label="")
    with raises(DataError):
        replace(VALID_SAMPLE, frame_indices=(-1, 2))


def test_stereo_sample_extra_views_must_align():
    with raises(DataError) as info:
        replace(VALID_SAMPLE, extra_images=(VALID_SAMPLE.left_image,))
    assert "extra" in str(info)


def test_stereo_sample_views():
    sample = replace(
        VALID_SAMPLE,
        extra_images=("a.png", "b.png"),
        extra_frame_indices=(4, 6),
    )
    assert [frame for frame, _ in sample.views(1)] == [0]
    assert [frame for frame, _ in sample.views(4)] == [0, 2, 4, 6]
    with raises(DataError):
        sample.views(5)


def test_class_vocabulary():
    vocab = ClassVocabulary.from_labels(["egg", "apple", "egg", "cake"])
    assert vocab.names == ("apple", "cake", "egg")
    assert len(vocab) == 3
    assert vocab.index("cake") == 1
    assert vocab.name(2) == "egg"
    assert "apple" in vocab
    assert "pear" not in vocab
    with raises(UnknownClassError):
        vocab.index("pear")


def test_class_vocabulary_invalid():
    with raises(DataError):
        ClassVocabulary(())
    with raises(DataError):
        ClassVocabulary(("apple", "apple"))


def test_validate_sample():
    vocab = ClassVocabulary(("apple", "egg"))
    assert validate_sample(VALID_SAMPLE, vocab) is VALID_SAMPLE
    with raises(UnknownClassError):
        validate_sample(replace(VALID_SAMPLE, class_label="cake"), vocab)


def test_embedding_vector():
    embedding = EmbeddingVector.of([1.0, 2.0, 3.0])
    assert embedding.dim == 3
    with raises(ValueError):
        embedding.values[0] = 5.0
    with raises(DataError):
        EmbeddingVector(np.zeros(3), 4)
    with raises(ValueError) as info:
        EmbeddingVector.of([1.0, np.nan])
    assert "non-finite" in str(info)


def test_stereo_feature_keeps_view_order():
    left = EmbeddingVector.of([1.0, 2.0])
    right = EmbeddingVector.of([3.0, 4.0])
    assert list(StereoFeature.from_views(left, right).values) == [1, 2, 3, 4]
    assert list(StereoFeature.from_views(right, left).values) == [3, 4, 1, 2]
    assert StereoFeature.from_views(left, right).dim == 4


def test_train_config_defaults():
    config = TrainConfig()
    assert config.epochs == 100
    assert config.batch_size == 64
    assert config.learning_rate == 0.001
    assert config.lambda_mse == 1.0
    assert config.mu_ce == 0.5
    assert config.projection_dim == 512
    assert config.template_id == 5


def test_train_config_invalid():
    """Test that out-of-range settings raise ValueError naming the setting."""
    for field, value in [
        ("epochs", 0),
        ("batch_size", 0),
        ("learning_rate", -0.1),
        ("mu_ce", -1.0),
        ("fusion_inputs", "audio"),
        ("template_id", 6),
        ("teacher_forcing", 1.5),
        ("min_gap", 0),
    ]:
        with raises(ValueError) as info:
            replace(TrainConfig(), **{field: value})
        assert field in str(info)

    with raises(ValueError):
        TrainConfig(lambda_mse=0.0, mu_ce=0.0)


def test_train_config_zero_learning_rate_allowed():
    assert TrainConfig(learning_rate=0.0).learning_rate == 0.0


def test_frame_sequence_invalid():
    with raises(DataError):
        FrameSequence("item", "apple", ("a.png",))
    with raises(NonPositiveVolumeError):
        FrameSequence("item", "apple", ("a.png", "b.png"), volume_ml=0.0)


def test_triangle_mesh_face_indices():
    with raises(DataError):
        TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))


def test_prediction_set():
    preds = make_predictions([90.0, 210.0], [100.0, 200.0])
    assert len(preds) == 2
    assert list(preds.estimates) == [90.0, 210.0]
    assert list(preds.ground_truth) == [100.0, 200.0]


def test_prediction_set_invalid():
    record = PredictionRecord("a", "apple", 1.0, 2.0)
    with raises(DataError):
        PredictionSet((record, record))
    with raises(NonPositiveVolumeError):
        PredictionSet((replace(record, volume_gt=0.0),))


def test_prediction_record_clip():
    record = PredictionRecord("a", "apple", -12.5, 100.0)
    clipped = record.clip()
    assert clipped.volume_est == 0.0
    assert clipped.volume_raw == -12.5
    assert clipped.clipped
    assert clipped.clip() == clipped
    assert clipped.clip(5.0).volume_raw == -12.5

    positive = PredictionRecord("b", "apple", 80.0, 100.0)
    assert positive.clip() is positive
    assert not positive.clipped
    assert positive.volume_raw is None


def test_prediction_set_counts_clipped_records():
    preds = make_predictions([-1.0, 50.0, -3.0], [10.0, 20.0, 30.0])
    assert preds.n_clipped == 0
    clipped = replace(preds, records=tuple(r.clip() for r in preds.records))
    assert clipped.n_clipped == 2
    assert list(clipped.estimates) == [0.0, 50.0, 0.0]
