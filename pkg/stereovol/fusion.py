"""
The trainable fusion network and its losses.

Stereo features (the concatenated view embeddings) feed a classification head.
The predicted class selects a volume prior, the prior is rendered into a
prompt, and the prompt embedding is concatenated with the stereo features,
projected to a shared space and regressed to a volume in mL.

The argmax -> prompt -> text embedding path is not differentiable. The text
features enter the projection as constants, so the classification head only
learns from the cross-entropy term and the projection and regression heads
only from the squared error term.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from stereovol.exceptions import (
    DimMismatchError,
    EmptyBatchError,
    IndexOutOfRangeError,
    LengthMismatchError,
)
from stereovol.models import EmbeddingVector, StereoFeature, TrainConfig
from stereovol.priors import PromptFeaturizer
from stereovol.utils import verify_range

logger = logging.getLogger(__name__)

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelDims:
    """Input and output sizes of a fusion model."""

    image_dim: int  # D, per view
    text_dim: int
    n_classes: int
    n_images: int = 2

    def __post_init__(self):
        verify_range("image_dim", self.image_dim, 1, float("inf"))
        verify_range("text_dim", self.text_dim, 1, float("inf"))
        verify_range("n_classes", self.n_classes, 1, float("inf"))
        verify_range("n_images", self.n_images, 1, float("inf"))

    @property
    def stereo_dim(self):
        return self.n_images * self.image_dim

    @property
    def combined_dim(self):
        return self.stereo_dim + self.text_dim


class FusionModel(nn.Module):
    """Classification head, cross-modal projection and regression head.

    ``fusion_inputs`` masks a branch of the fused representation by replacing
    it with zeros of the same size: "stereo" drops the text features, "text"
    drops the stereo features. The classification head always sees the stereo
    features, so the prompt is chosen the same way in every variant.
    """

    def __init__(
        self,
        dims: ModelDims,
        class_names: Sequence[str],
        projection_dim: int = 512,
        classifier_hidden: int = 0,
        regressor_hidden: Optional[int] = None,
        fusion_inputs: str = "stereo+text",
    ):
        super().__init__()
        if len(class_names) != dims.n_classes:
            raise LengthMismatchError(
                f"{len(class_names)} class names for {dims.n_classes} classes"
            )
        self.dims = dims
        self.class_names = tuple(class_names)
        self.fusion_inputs = fusion_inputs
        regressor_hidden = regressor_hidden or max(1, projection_dim // 2)

        if classifier_hidden:
            self.classifier = nn.Sequential(
                nn.Linear(dims.stereo_dim, classifier_hidden),
                nn.ReLU(),
                nn.Linear(classifier_hidden, dims.n_classes),
            )
        else:
            self.classifier = nn.Linear(dims.stereo_dim, dims.n_classes)
        self.projection = nn.Sequential(
            nn.Linear(dims.combined_dim, projection_dim), nn.ReLU()
        )
        self.regressor = nn.Sequential(
            nn.Linear(projection_dim, regressor_hidden),
            nn.ReLU(),
            nn.Linear(regressor_hidden, 1),
        )
        # Regressor output h maps to h * target_std + target_mean mL
        self.register_buffer("target_mean", torch.zeros((), dtype=DTYPE))
        self.register_buffer("target_std", torch.ones((), dtype=DTYPE))

    def set_target_scaling(self, mean: float, std: float):
        self.target_mean.fill_(float(mean))
        self.target_std.fill_(float(std))

    def classify(self, f_stereo: torch.Tensor) -> torch.Tensor:
        """Class logits, shape (N, C)."""
        return self.classifier(f_stereo)

    def combine(self, f_stereo: torch.Tensor, f_text: torch.Tensor) -> torch.Tensor:
        if self.fusion_inputs == "stereo":
            f_text = torch.zeros_like(f_text)
        elif self.fusion_inputs == "text":
            f_stereo = torch.zeros_like(f_stereo)
        return torch.cat([f_stereo, f_text], dim=-1)

    def regress(self, f_combine: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Fused features (N, K) and volumes in mL (N,)."""
        f_fused = self.projection(f_combine)
        h = self.regressor(f_fused).squeeze(-1)
        return f_fused, h * self.target_std + self.target_mean

    def forward(self, f_stereo: torch.Tensor, f_text: torch.Tensor):
        """Class logits and volumes for stereo features and text features."""
        _, volumes = self.regress(self.combine(f_stereo, f_text))
        return self.classify(f_stereo), volumes


def build_model(
    dims: ModelDims, config: TrainConfig, class_names: Sequence[str]
) -> FusionModel:
    """Fusion model with seeded fan-in scaled uniform initialization."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = FusionModel(
            dims,
            class_names,
            projection_dim=config.projection_dim,
            classifier_hidden=config.classifier_hidden,
            regressor_hidden=config.regressor_hidden,
            fusion_inputs=config.fusion_inputs,
        )
    return model.to(DTYPE)


def as_tensor(values) -> torch.Tensor:
    return torch.tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE)


@dataclass(frozen=True)
class ForwardTrace:
    """Every intermediate value of one forward pass."""

    f_left: np.ndarray
    f_right: np.ndarray
    f_stereo: np.ndarray
    class_logits: np.ndarray
    predicted_class: str
    prompt: str
    f_text: np.ndarray
    f_combine: np.ndarray
    f_fused: np.ndarray
    volume_est: float


def _check_dim(name, embedding: EmbeddingVector, expected):
    if embedding.dim != expected:
        raise DimMismatchError(
            f"{name} has dimension {embedding.dim}, the model expects {expected}"
        )


def forward(
    model: FusionModel,
    f_left: EmbeddingVector,
    f_right: EmbeddingVector,
    featurizer: PromptFeaturizer,
    extra_views: Sequence[EmbeddingVector] = (),
) -> ForwardTrace:
    """Run the full pipeline on the embeddings of one stereo pair

    Arguments:
    ----------

        model: FusionModel
            Trained or freshly initialized model.

        f_left, f_right: EmbeddingVector
            Embeddings of the left and right image.

        featurizer: PromptFeaturizer
            Prior table, template and text encoder used to turn the predicted
            class into text features.

        extra_views: list
            Embeddings of further views, for models trained with more than two
            images.

    Returns:
    --------

        ForwardTrace
            The predicted class, its prompt and the volume estimate together
            with all intermediate features.
    """
    views = [f_left, f_right, *extra_views][: model.dims.n_images]
    if len(views) != model.dims.n_images:
        raise DimMismatchError(
            f"The model expects {model.dims.n_images} views, got {len(views)}"
        )
    for k, view in enumerate(views):
        _check_dim(f"View {k}", view, model.dims.image_dim)
    if featurizer.output_dim != model.dims.text_dim:
        raise DimMismatchError(
            f"Text features have dimension {featurizer.output_dim}, the model "
            f"expects {model.dims.text_dim}"
        )

    f_stereo = StereoFeature.from_views(*views).values
    with torch.no_grad():
        stereo = as_tensor(f_stereo).unsqueeze(0)
        logits = model.classify(stereo)[0]
        predicted = int(torch.argmax(logits))
        f_text = featurizer.embedding(predicted)
        f_combine = model.combine(stereo, as_tensor(f_text).unsqueeze(0))
        f_fused, volume = model.regress(f_combine)

    return ForwardTrace(
        f_left=f_left.values,
        f_right=f_right.values,
        f_stereo=f_stereo,
        class_logits=logits.numpy(),
        predicted_class=model.class_names[predicted],
        prompt=featurizer.prompt(predicted),
        f_text=f_text,
        f_combine=f_combine[0].numpy(),
        f_fused=f_fused[0].numpy(),
        volume_est=float(volume[0]),
    )


def mse_loss(estimates, ground_truth) -> torch.Tensor:
    """Mean squared error between estimated and true volumes."""
    estimates = torch.as_tensor(estimates, dtype=DTYPE)
    ground_truth = torch.as_tensor(ground_truth, dtype=DTYPE)
    if estimates.shape != ground_truth.shape:
        raise LengthMismatchError(
            f"{tuple(estimates.shape)} estimates for {tuple(ground_truth.shape)} "
            "ground-truth values"
        )
    if estimates.numel() == 0:
        raise EmptyBatchError("The squared error of an empty batch is undefined")
    return torch.mean((ground_truth - estimates) ** 2)


def ce_loss(logits, targets) -> torch.Tensor:
    """Mean negative log-likelihood of the target classes under softmax."""
    logits = torch.as_tensor(logits, dtype=DTYPE)
    targets = torch.as_tensor(targets, dtype=torch.long)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise LengthMismatchError(
            f"Logits of shape {tuple(logits.shape)} for {targets.shape[0]} targets"
        )
    if logits.shape[0] == 0:
        raise EmptyBatchError("The cross-entropy of an empty batch is undefined")
    if logits.shape[1] < 2:
        raise IndexOutOfRangeError(
            f"Cross-entropy needs at least 2 classes, got {logits.shape[1]}"
        )
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise IndexOutOfRangeError(
            f"Targets must be in [0, {logits.shape[1]}), got "
            f"[{int(targets.min())}, {int(targets.max())}]"
        )
    return F.cross_entropy(logits, targets)


def combined_loss(mse, ce, lambda_mse: float, mu_ce: float):
    """Weighted sum lambda_mse * mse + mu_ce * ce."""
    verify_range("lambda_mse", lambda_mse, 0.0, float("inf"))
    verify_range("mu_ce", mu_ce, 0.0, float("inf"))
    return lambda_mse * mse + mu_ce * ce


@dataclass(frozen=True)
class TrainingBatch:
    """Inputs and targets of one optimization step.

    ``f_text`` holds the prompt embeddings already selected for each sample.
    """

    f_stereo: torch.Tensor  # (N, n_images * D)
    f_text: torch.Tensor  # (N, D_text)
    volumes: torch.Tensor  # (N,) mL
    labels: torch.Tensor  # (N,) class indices

    @classmethod
    def of(cls, f_stereo, f_text, volumes, labels):
        return cls(
            f_stereo=as_tensor(f_stereo),
            f_text=as_tensor(f_text),
            volumes=as_tensor(volumes),
            labels=torch.as_tensor(np.asarray(labels), dtype=torch.long),
        )

    def __len__(self):
        return int(self.volumes.shape[0])


@dataclass(frozen=True)
class LossRecord:
    mse: float
    ce: float
    total: float


def batch_losses(model: FusionModel, batch: TrainingBatch, lambda_mse, mu_ce):
    """Squared error, cross-entropy and combined loss tensors of a batch."""
    if len(batch) == 0:
        raise EmptyBatchError("Cannot compute losses of an empty batch")
    logits, volumes = model(batch.f_stereo, batch.f_text)
    mse = mse_loss(volumes, batch.volumes)
    ce = ce_loss(logits, batch.labels) if mu_ce > 0 else logits.sum() * 0.0
    return mse, ce, combined_loss(mse, ce, lambda_mse, mu_ce)


def gradient(
    model: FusionModel, batch: TrainingBatch, lambda_mse: float, mu_ce: float
) -> Tuple[Dict[str, torch.Tensor], LossRecord]:
    """Gradients of the combined loss with respect to every model parameter

    Returns:
    --------

        Tuple(dict, LossRecord)
            Parameter name -> gradient tensor of the same shape (zeros for
            parameters the loss does not depend on), and the batch losses.
    """
    model.zero_grad(set_to_none=True)
    mse, ce, total = batch_losses(model, batch, lambda_mse, mu_ce)
    total.backward()
    grads = {
        name: (
            torch.zeros_like(parameter)
            if parameter.grad is None
            else parameter.grad.detach().clone()
        )
        for name, parameter in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)
    return grads, LossRecord(float(mse), float(ce), float(total))
