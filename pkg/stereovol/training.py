"""
End-to-end training of the fusion model, checkpoints and inference.
"""

import hashlib
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from stereovol.encoders import (
    ImageEmbeddingCache,
    ImageEncoderBackend,
    TextEncoderBackend,
)
from stereovol.exceptions import (
    CheckpointMismatchError,
    DataEmptyError,
    DataError,
    NonFiniteLossError,
    ShapeMismatchError,
)
from stereovol.fusion import (
    FusionModel,
    ModelDims,
    TrainingBatch,
    batch_losses,
    build_model,
    forward,
    gradient,
)
from stereovol.models import (
    ClassVocabulary,
    EmbeddingVector,
    PredictionRecord,
    PredictionSet,
    StereoSample,
    TrainConfig,
    validate_sample,
)
from stereovol.priors import PromptFeaturizer, VolumePriorTable, get_template
from stereovol.serialization import write_json
from stereovol.utils import digest

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
FINAL_CHECKPOINT = "final.pt"
BEST_CHECKPOINT = "best.pt"
RUN_MANIFEST = "run_manifest.json"


@dataclass
class AdamState:
    """Step count and moment estimates of every parameter."""

    step: int
    exp_avg: Dict[str, torch.Tensor]
    exp_avg_sq: Dict[str, torch.Tensor]

    @classmethod
    def zeros_like(cls, params: Dict[str, torch.Tensor]):
        return cls(
            step=0,
            exp_avg={k: torch.zeros_like(v) for k, v in params.items()},
            exp_avg_sq={k: torch.zeros_like(v) for k, v in params.items()},
        )


def _check_shapes(params, grads, state):
    if set(params) != set(grads) or set(params) != set(state.exp_avg):
        raise ShapeMismatchError(
            "Parameters, gradients and optimizer state name different tensors"
        )
    for name, value in params.items():
        shapes = {
            tuple(value.shape),
            tuple(grads[name].shape),
            tuple(state.exp_avg[name].shape),
            tuple(state.exp_avg_sq[name].shape),
        }
        if len(shapes) != 1:
            raise ShapeMismatchError(f"Shapes of '{name}' do not match: {shapes}")


def adam_step(
    params: Dict[str, torch.Tensor],
    grads: Dict[str, torch.Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[Dict[str, torch.Tensor], AdamState]:
    """One bias-corrected Adam update, without weight decay

    Arguments:
    ----------

        params: dict
            Parameter name -> tensor. Not modified.

        grads: dict
            Parameter name -> gradient of the same shape.

        state: AdamState
            Moments after the previous step. Not modified.

        lr, beta1, beta2, eps: float
            Step size, moment decay rates and denominator offset.

    Returns:
    --------

        Tuple(dict, AdamState)
            Updated parameters and optimizer state.
    """
    _check_shapes(params, grads, state)
    step = state.step + 1
    bias_correction1 = 1.0 - beta1**step
    bias_correction2 = 1.0 - beta2**step

    new_params, exp_avg, exp_avg_sq = {}, {}, {}
    for name, param in params.items():
        g = grads[name]
        m = beta1 * state.exp_avg[name] + (1.0 - beta1) * g
        v = beta2 * state.exp_avg_sq[name] + (1.0 - beta2) * g * g
        m_hat = m / bias_correction1
        v_hat = v / bias_correction2
        new_params[name] = param - lr * m_hat / (torch.sqrt(v_hat) + eps)
        exp_avg[name] = m
        exp_avg_sq[name] = v
    return new_params, AdamState(step, exp_avg, exp_avg_sq)


@dataclass
class Checkpoint:
    """A trained model with everything needed to run it on new images."""

    model: FusionModel
    config: TrainConfig
    vocab: ClassVocabulary
    prior_table: VolumePriorTable
    image_encoder: dict
    text_encoder: dict

    def featurizer(self, text_encoder: TextEncoderBackend) -> PromptFeaturizer:
        return PromptFeaturizer(
            text_encoder,
            self.prior_table,
            self.vocab,
            get_template(self.config.template_id),
            self.config.volume_decimals,
        )


def checkpoint_digest(model: FusionModel) -> str:
    """SHA-256 over the names and raw bytes of all model tensors."""
    sha = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        sha.update(name.encode("utf-8"))
        sha.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return sha.hexdigest()


def save_checkpoint(path, checkpoint: Checkpoint):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "state_dict": checkpoint.model.state_dict(),
            "dims": asdict(checkpoint.model.dims),
            "class_names": list(checkpoint.vocab.names),
            "config": asdict(checkpoint.config),
            "prior_table": checkpoint.prior_table.to_dict(),
            "image_encoder": checkpoint.image_encoder,
            "text_encoder": checkpoint.text_encoder,
        },
        path,
    )
    logger.info("Saved checkpoint %s", path)


def load_checkpoint(
    path,
    image_encoder: Optional[ImageEncoderBackend] = None,
    text_encoder: Optional[TextEncoderBackend] = None,
) -> Checkpoint:
    """Load a checkpoint, checking it against the encoders it will run with."""
    data = torch.load(path, map_location="cpu", weights_only=True)
    if data.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointMismatchError(
            f"Unsupported checkpoint format {data.get('format_version')} in {path}"
        )
    dims = ModelDims(**data["dims"])
    if image_encoder is not None and image_encoder.output_dim != dims.image_dim:
        raise CheckpointMismatchError(
            f"Checkpoint expects {dims.image_dim}-d image embeddings, encoder "
            f"'{image_encoder.name}' produces {image_encoder.output_dim}"
        )
    if text_encoder is not None and text_encoder.output_dim != dims.text_dim:
        raise CheckpointMismatchError(
            f"Checkpoint expects {dims.text_dim}-d text embeddings, encoder "
            f"'{text_encoder.name}' produces {text_encoder.output_dim}"
        )

    config = TrainConfig(**data["config"])
    model = build_model(dims, config, data["class_names"])
    try:
        model.load_state_dict(data["state_dict"], strict=True)
    except RuntimeError as err:
        raise CheckpointMismatchError(f"Checkpoint {path} does not fit: {err}") from err
    return Checkpoint(
        model=model,
        config=config,
        vocab=ClassVocabulary(tuple(data["class_names"])),
        prior_table=VolumePriorTable.from_dict(data["prior_table"]),
        image_encoder=data["image_encoder"],
        text_encoder=data["text_encoder"],
    )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mse: float
    ce: float
    total: float
    validation_total: Optional[float] = None


@dataclass
class RunManifest:
    """Settings, inputs and loss history of one training run."""

    config: dict
    image_encoder: dict
    text_encoder: dict
    template_id: int
    volume_decimals: int
    preprocessing: str
    dataset_digests: Dict[str, str]
    seed: int
    epochs: List[EpochRecord] = field(default_factory=list)
    checkpoints: Dict[str, str] = field(default_factory=dict)
    best_epoch: Optional[int] = None

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        write_json(path, self.to_dict())


def samples_digest(samples: Sequence[StereoSample]) -> str:
    """Digest of the identity, class, frames and volume of every sample."""
    return digest(
        [
            [s.item_id, s.class_label, list(s.frame_indices), s.volume_gt]
            + list(s.extra_frame_indices)
            for s in samples
        ]
    )


class _DeterministicAlgorithms:
    def __init__(self, enabled):
        self.enabled = enabled

    def __enter__(self):
        self._previous = torch.are_deterministic_algorithms_enabled()
        if self.enabled:
            torch.use_deterministic_algorithms(True)

    def __exit__(self, *exc):
        torch.use_deterministic_algorithms(self._previous)


def _prompt_classes(model, f_stereo, labels, teacher_forcing, rng):
    with torch.no_grad():
        predicted = torch.argmax(model.classify(f_stereo), dim=1).numpy()
    if teacher_forcing > 0:
        use_truth = rng.random(len(predicted)) < teacher_forcing
        predicted = np.where(use_truth, labels, predicted)
    return predicted


def _evaluation_loss(model, config, featurizer, f_stereo, labels, volumes):
    stereo = torch.as_tensor(f_stereo)
    classes = _prompt_classes(model, stereo, labels, 0.0, None)
    batch = TrainingBatch.of(f_stereo, featurizer.features(classes), volumes, labels)
    with torch.no_grad():
        _, _, total = batch_losses(model, batch, config.lambda_mse, config.mu_ce)
    return float(total)


def _load_params(model, params):
    with torch.no_grad():
        for name, parameter in model.named_parameters():
            parameter.copy_(params[name])


def _prepare(samples, vocab, table):
    if len(samples) == 0:
        raise DataEmptyError("No training samples")
    vocab = vocab or ClassVocabulary.from_labels(s.class_label for s in samples)
    for sample in samples:
        validate_sample(sample, vocab)
    table.covers(vocab)
    labels = np.array([vocab.index(s.class_label) for s in samples], dtype=np.int64)
    volumes = np.array([s.volume_gt for s in samples], dtype=np.float64)
    return vocab, labels, volumes


def train(
    config: TrainConfig,
    samples: Sequence[StereoSample],
    image_encoder: ImageEncoderBackend,
    text_encoder: TextEncoderBackend,
    prior_table: VolumePriorTable,
    vocab: Optional[ClassVocabulary] = None,
    out_dir=None,
    validation: Optional[Sequence[StereoSample]] = None,
) -> Tuple[Checkpoint, RunManifest]:
    """Train a fusion model with Adam on the combined loss

    Arguments:
    ----------

        config: TrainConfig
            Optimization, architecture and prompt settings.

        samples: list
            Training samples, typically several frame pairs per item.

        image_encoder, text_encoder:
            Frozen encoder backends.

        prior_table: VolumePriorTable
            Volume prior of every vocabulary class.

        vocab: ClassVocabulary
            Class order of the classification head. Defaults to the sorted
            labels of ``samples``.

        out_dir: str
            Directory receiving the final and best checkpoints and the run
            manifest. Nothing is written when omitted.

        validation: list
            Optional held-out samples. When given, the best checkpoint is the
            one with the lowest validation loss instead of training loss.

    Returns:
    --------

        Tuple(Checkpoint, RunManifest)
            The model after the last epoch and the record of the run.
    """
    vocab, labels, volumes = _prepare(samples, vocab, prior_table)
    if config.mu_ce > 0 and len(vocab) < 2:
        raise DataError("Classification needs at least 2 classes, set mu_ce to 0")

    cache = ImageEmbeddingCache(image_encoder)
    f_stereo = cache.embed_all(samples, config.n_images)
    featurizer = PromptFeaturizer(
        text_encoder,
        prior_table,
        vocab,
        get_template(config.template_id),
        config.volume_decimals,
    )
    dims = ModelDims(
        image_encoder.output_dim, text_encoder.output_dim, len(vocab), config.n_images
    )
    model = build_model(dims, config, vocab.names)
    if config.standardize_targets:
        std = float(np.std(volumes))
        model.set_target_scaling(float(np.mean(volumes)), std if std > 0 else 1.0)

    val_data = None
    if validation:
        for sample in validation:
            validate_sample(sample, vocab)
        val_data = (
            cache.embed_all(validation, config.n_images),
            np.array([vocab.index(s.class_label) for s in validation]),
            np.array([s.volume_gt for s in validation], dtype=np.float64),
        )

    checkpoint = Checkpoint(
        model=model,
        config=config,
        vocab=vocab,
        prior_table=prior_table,
        image_encoder=image_encoder.settings(),
        text_encoder=text_encoder.settings(),
    )
    manifest = RunManifest(
        config=asdict(config),
        image_encoder=image_encoder.settings(),
        text_encoder=text_encoder.settings(),
        template_id=config.template_id,
        volume_decimals=config.volume_decimals,
        preprocessing=image_encoder.preprocessing,
        dataset_digests={"train": samples_digest(samples)},
        seed=config.seed,
    )
    if validation:
        manifest.dataset_digests["validation"] = samples_digest(validation)

    rng = np.random.default_rng(config.seed)
    params = {k: v.detach().clone() for k, v in model.named_parameters()}
    state = AdamState.zeros_like(params)
    best_loss, best_state = float("inf"), None
    n = len(samples)

    with _DeterministicAlgorithms(config.deterministic):
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            sums = np.zeros(3)
            for batch_index, start in enumerate(range(0, n, config.batch_size)):
                idx = order[start : start + config.batch_size]
                stereo = torch.as_tensor(f_stereo[idx])
                classes = _prompt_classes(
                    model, stereo, labels[idx], config.teacher_forcing, rng
                )
                batch = TrainingBatch.of(
                    f_stereo[idx],
                    featurizer.features(classes),
                    volumes[idx],
                    labels[idx],
                )
                grads, losses = gradient(model, batch, config.lambda_mse, config.mu_ce)
                if not np.isfinite(losses.total):
                    items = sorted(samples[i].item_id for i in idx)
                    raise NonFiniteLossError(
                        f"Loss became {losses.total} in epoch {epoch}, batch "
                        f"{batch_index} (items {items})",
                        epoch=epoch,
                        batch=batch_index,
                    )
                params, state = adam_step(
                    params,
                    grads,
                    state,
                    config.learning_rate,
                    config.adam_beta1,
                    config.adam_beta2,
                    config.adam_eps,
                )
                _load_params(model, params)
                sums += len(idx) * np.array([losses.mse, losses.ce, losses.total])

            mse, ce, total = sums / n
            validation_total = None
            if val_data is not None:
                validation_total = _evaluation_loss(
                    model, config, featurizer, *val_data
                )
            record = EpochRecord(
                epoch, float(mse), float(ce), float(total), validation_total
            )
            manifest.epochs.append(record)
            logger.info(
                "Epoch %d/%d: mse=%.6g ce=%.6g loss=%.6g",
                epoch + 1,
                config.epochs,
                mse,
                ce,
                total,
            )
            score = total if validation_total is None else validation_total
            if not np.isfinite(score):
                warnings.warn(
                    f"Epoch {epoch} has a non-finite selection loss ({score}), it "
                    "can only be chosen as the best epoch if no other is finite",
                    stacklevel=2,
                )
            # The first epoch is kept until a finite score replaces it
            if best_state is None or score < best_loss:
                best_loss = score if np.isfinite(score) else float("inf")
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
                manifest.best_epoch = epoch

    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(out_dir / FINAL_CHECKPOINT, checkpoint)
        best_model = build_model(dims, config, vocab.names)
        best_model.load_state_dict(best_state)
        save_checkpoint(
            out_dir / BEST_CHECKPOINT,
            Checkpoint(
                best_model,
                config,
                vocab,
                prior_table,
                checkpoint.image_encoder,
                checkpoint.text_encoder,
            ),
        )
        manifest.checkpoints = {
            "final": str(out_dir / FINAL_CHECKPOINT),
            "best": str(out_dir / BEST_CHECKPOINT),
        }
        manifest.save(out_dir / RUN_MANIFEST)
    return checkpoint, manifest


def predict_samples(
    checkpoint: Checkpoint,
    samples: Sequence[StereoSample],
    image_encoder: ImageEncoderBackend,
    text_encoder: TextEncoderBackend,
    method: str = "ours",
) -> PredictionSet:
    """One prediction per sample from its recorded frames.

    Ground-truth classes outside the checkpoint vocabulary are allowed, the
    forward pass only depends on the predicted class.
    """
    dims = checkpoint.model.dims
    if image_encoder.output_dim != dims.image_dim:
        raise CheckpointMismatchError(
            f"Checkpoint expects {dims.image_dim}-d image embeddings, encoder "
            f"'{image_encoder.name}' produces {image_encoder.output_dim}"
        )
    if text_encoder.output_dim != dims.text_dim:
        raise CheckpointMismatchError(
            f"Checkpoint expects {dims.text_dim}-d text embeddings, encoder "
            f"'{text_encoder.name}' produces {text_encoder.output_dim}"
        )
    featurizer = checkpoint.featurizer(text_encoder)
    cache = ImageEmbeddingCache(image_encoder)
    records = []
    for sample in samples:
        views = cache.embed(sample, dims.n_images).reshape(dims.n_images, -1)
        embeddings = [EmbeddingVector(v, dims.image_dim) for v in views]
        if len(embeddings) == 1:
            # Single-view models ignore the right view
            embeddings.append(embeddings[0])
        trace = forward(
            checkpoint.model, embeddings[0], embeddings[1], featurizer, embeddings[2:]
        )
        records.append(
            PredictionRecord(
                item_id=sample.item_id,
                class_label=sample.class_label,
                volume_est=trace.volume_est,
                volume_gt=sample.volume_gt,
                predicted_class=trace.predicted_class,
                prompt=trace.prompt,
                food_code=sample.food_code,
            ).clip()
        )
    logger.info("Predicted volumes of %d items", len(records))
    return PredictionSet(tuple(records), method=method)
