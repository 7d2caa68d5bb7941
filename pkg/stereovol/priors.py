"""
Class-conditional volume priors and the prompts that carry them.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from stereovol.encoders import TextEncoderBackend, encode_text
from stereovol.exceptions import (
    DataError,
    EmptyClassError,
    NonPositiveVolumeError,
    UnknownClassError,
)
from stereovol.models import TEMPLATE_IDS, ClassVocabulary, StereoSample
from stereovol.serialization import read_json, write_json
from stereovol.utils import format_volume, verify_range, verify_set

logger = logging.getLogger(__name__)

PRIOR_SOURCES = ["train", "external"]

CLASS_PLACEHOLDER = "{class}"
VOLUME_PLACEHOLDER = "{volume}"


@dataclass(frozen=True)
class VolumePriorTable:
    """Mean volume (mL) of each class.

    ``source`` is "train" for tables computed from a training split and
    "external" for tables supplied from elsewhere.
    """

    entries: Dict[str, float]
    source: str = "train"

    def __post_init__(self):
        verify_set("source", self.source, PRIOR_SOURCES)
        entries = {str(k): float(v) for k, v in self.entries.items()}
        for label, volume in entries.items():
            if not volume > 0:
                raise NonPositiveVolumeError(
                    f"Prior of class '{label}' is {volume} mL, must be > 0"
                )
        object.__setattr__(self, "entries", entries)

    def __contains__(self, label):
        return label in self.entries

    def __getitem__(self, label):
        return prior_for_prediction(self, label)

    def covers(self, vocab: ClassVocabulary):
        missing = [name for name in vocab.names if name not in self.entries]
        if missing:
            raise UnknownClassError(f"The prior table has no entry for {missing}")

    def to_dict(self):
        return {"source": self.source, "entries": dict(sorted(self.entries.items()))}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(entries=data["entries"], source=data.get("source", "external"))
        except (KeyError, TypeError, AttributeError) as err:
            raise DataError(f"Malformed prior table: {err}") from err

    def save(self, path):
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(path))


def build_prior_table(
    train: Sequence[StereoSample], vocab: ClassVocabulary
) -> VolumePriorTable:
    """Mean training volume of each vocabulary class.

    Every item counts once, however many frame pairs it contributes to the
    training split.
    """
    item_volumes: Dict[str, Dict[str, float]] = defaultdict(dict)
    for sample in train:
        if sample.class_label not in vocab:
            raise UnknownClassError(
                f"Training item '{sample.item_id}' has class '{sample.class_label}' "
                "which is not in the vocabulary"
            )
        item_volumes[sample.class_label][sample.item_id] = sample.volume_gt

    entries = {}
    for name in vocab.names:
        volumes = item_volumes.get(name)
        if not volumes:
            raise EmptyClassError(f"Class '{name}' has no training samples")
        entries[name] = float(np.mean([volumes[k] for k in sorted(volumes)]))

    logger.info("Built volume priors for %d classes", len(entries))
    return VolumePriorTable(entries=entries, source="train")


def prior_for_prediction(table: VolumePriorTable, predicted_class: str) -> float:
    """Prior of a predicted class, exactly as stored."""
    try:
        return table.entries[predicted_class]
    except KeyError as err:
        raise UnknownClassError(
            f"Class '{predicted_class}' has no volume prior"
        ) from err


@dataclass(frozen=True)
class PromptTemplate:
    """Sentence with one ``{class}`` and one ``{volume}`` placeholder."""

    template_id: int
    pattern: str

    def __post_init__(self):
        for placeholder in (CLASS_PLACEHOLDER, VOLUME_PLACEHOLDER):
            count = self.pattern.count(placeholder)
            if count != 1:
                raise ValueError(
                    f"Template {self.template_id} contains '{placeholder}' "
                    f"{count} times, exactly once is required"
                )


PROMPT_TEMPLATES = {
    0: PromptTemplate(
        0,
        "These are stereo image pairs of {class} whose approximate volume is "
        "{volume} mL.",
    ),
    1: PromptTemplate(1, "Detected object: {class} estimated volume: {volume} mL"),
    2: PromptTemplate(
        2, "Object identified as {class} with volume approximately {volume} mL"
    ),
    3: PromptTemplate(3, "Classification: {class} | Volume estimate: {volume} mL"),
    4: PromptTemplate(
        4, "This appears to be a {class} measuring roughly {volume} mL in volume"
    ),
    5: PromptTemplate(
        5, "The object is {class} and the approximate volume is {volume} mL"
    ),
}

DEFAULT_TEMPLATE_ID = 5


def get_template(template_id: int) -> PromptTemplate:
    verify_set("template_id", template_id, TEMPLATE_IDS)
    return PROMPT_TEMPLATES[template_id]


def render_prompt(
    template: PromptTemplate, class_label: str, mean_volume_ml: float, decimals=1
) -> str:
    """Substitute a class name and a formatted volume into a template

    Arguments:
    ----------

        template: PromptTemplate
            Pattern to fill.

        class_label: str
            Class name, inserted as is.

        mean_volume_ml: float
            Volume prior in mL, must be > 0.

        decimals: int
            Digits after the decimal point of the rendered volume.

    Returns:
    --------

        str
            The rendered prompt.
    """
    if not mean_volume_ml > 0:
        raise NonPositiveVolumeError(
            f"Cannot render a prompt with volume {mean_volume_ml} mL"
        )
    verify_range("decimals", decimals, 0, 6)
    # Both placeholders are located on the pattern, never on substituted text
    head, tail = template.pattern.split(CLASS_PLACEHOLDER)
    volume = format_volume(mean_volume_ml, decimals)
    return (
        head.replace(VOLUME_PLACEHOLDER, volume)
        + class_label
        + tail.replace(VOLUME_PLACEHOLDER, volume)
    )


class PromptFeaturizer:
    """Text embedding of the prompt for each class index.

    Priors are fixed for a run, so there is one prompt per class and each
    embedding is computed once.
    """

    def __init__(
        self,
        text_encoder: TextEncoderBackend,
        table: VolumePriorTable,
        vocab: ClassVocabulary,
        template: PromptTemplate,
        decimals: int = 1,
    ):
        table.covers(vocab)
        self.text_encoder = text_encoder
        self.table = table
        self.vocab = vocab
        self.template = template
        self.decimals = decimals
        self._embeddings: Dict[int, np.ndarray] = {}

    @property
    def output_dim(self):
        return self.text_encoder.output_dim

    def prompt(self, class_index: int) -> str:
        name = self.vocab.name(class_index)
        return render_prompt(
            self.template, name, prior_for_prediction(self.table, name), self.decimals
        )

    def prompts(self, class_indices) -> List[str]:
        return [self.prompt(int(index)) for index in class_indices]

    def embedding(self, class_index: int) -> np.ndarray:
        class_index = int(class_index)
        if class_index not in self._embeddings:
            self._embeddings[class_index] = encode_text(
                self.text_encoder, self.prompt(class_index)
            ).values
        return self._embeddings[class_index]

    def features(self, class_indices) -> np.ndarray:
        """Stacked prompt embeddings, shape (N, D_text)."""
        return np.stack([self.embedding(index) for index in class_indices])
