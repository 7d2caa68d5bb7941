"""
File formats for manifests, vocabularies and prediction sets.

Manifests, sequence lists and prediction sets are JSON lines, one record per
line. Vocabularies are plain text, one class name per line.
"""

import json
import os
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np

from stereovol.exceptions import DataError
from stereovol.models import (
    ClassVocabulary,
    FrameSequence,
    PredictionRecord,
    PredictionSet,
    StereoSample,
)


def _resolve(ref, data_root):
    if data_root is None or os.path.isabs(ref):
        return ref
    return str(Path(data_root) / ref)


def _path_ref(sample_id, ref):
    if isinstance(ref, np.ndarray):
        raise DataError(
            f"Item '{sample_id}' holds an in-memory image, only paths can be written"
        )
    return str(ref)


def read_json_lines(path) -> List[dict]:
    with open(path, encoding="utf-8") as file:
        return [json.loads(line) for line in file if line.strip()]


def write_json_lines(path, records: Iterable[dict]):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        for record in records:
            file.write(json.dumps(record, sort_keys=True) + "\n")


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        json.dump(obj, file, indent=2, sort_keys=True)
        file.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as file:
        return json.load(file)


def sample_to_record(sample: StereoSample) -> dict:
    record = {
        "item_id": sample.item_id,
        "class_label": sample.class_label,
        "left_image": _path_ref(sample.item_id, sample.left_image),
        "right_image": _path_ref(sample.item_id, sample.right_image),
        "volume_ml": sample.volume_gt,
        "frame_left": sample.frame_indices[0],
        "frame_right": sample.frame_indices[1],
    }
    if sample.extra_images:
        record["extra_images"] = [
            _path_ref(sample.item_id, ref) for ref in sample.extra_images
        ]
        record["extra_frames"] = list(sample.extra_frame_indices)
    if sample.food_code is not None:
        record["food_code"] = sample.food_code
    return record


def sample_from_record(record: dict, data_root=None) -> StereoSample:
    try:
        return StereoSample(
            item_id=record["item_id"],
            class_label=record["class_label"],
            left_image=_resolve(record["left_image"], data_root),
            right_image=_resolve(record["right_image"], data_root),
            volume_gt=float(record["volume_ml"]),
            frame_indices=(int(record["frame_left"]), int(record["frame_right"])),
            extra_images=tuple(
                _resolve(ref, data_root) for ref in record.get("extra_images", [])
            ),
            extra_frame_indices=tuple(record.get("extra_frames", [])),
            food_code=record.get("food_code"),
        )
    except KeyError as err:
        raise DataError(f"Manifest record is missing the field {err}") from err


def read_manifest(path, data_root: Optional[str] = None) -> List[StereoSample]:
    return [sample_from_record(record, data_root) for record in read_json_lines(path)]


def write_manifest(path, samples: Iterable[StereoSample]):
    write_json_lines(path, (sample_to_record(sample) for sample in samples))


def read_sequences(path, data_root: Optional[str] = None) -> List[FrameSequence]:
    """Read frame sequences, one JSON object per line.

    Each record holds ``item_id``, ``class_label``, ``frames`` (list of image
    paths in capture order) and optionally ``mesh``, ``volume_ml`` and
    ``food_code``.
    """
    sequences = []
    for record in read_json_lines(path):
        mesh = record.get("mesh")
        sequences.append(
            FrameSequence(
                item_id=record["item_id"],
                class_label=record["class_label"],
                frames=tuple(_resolve(ref, data_root) for ref in record["frames"]),
                mesh=None if mesh is None else _resolve(mesh, data_root),
                volume_ml=record.get("volume_ml"),
                food_code=record.get("food_code"),
            )
        )
    return sequences


def read_vocabulary(path) -> ClassVocabulary:
    with open(path, encoding="utf-8") as file:
        return ClassVocabulary(tuple(line.strip() for line in file if line.strip()))


def write_vocabulary(path, vocab: ClassVocabulary):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        file.write("".join(f"{name}\n" for name in vocab.names))


def read_predictions(path, method="ours") -> PredictionSet:
    records = [PredictionRecord(**record) for record in read_json_lines(path)]
    return PredictionSet(tuple(records), method=method)


def write_predictions(path, predictions: PredictionSet):
    write_json_lines(path, (asdict(record) for record in predictions.records))
