"""
Metrics, baselines, ablations and error-distribution report data.
"""

import logging
import re
import warnings
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import gaussian_kde, norm
from sklearn.metrics import (
    mean_absolute_error,
    mean_absolute_percentage_error,
    r2_score,
)
from torch import nn

from stereovol.encoders import ImageEncoderBackend, TextEncoderBackend
from stereovol.exceptions import (
    DataEmptyError,
    DataError,
    TooFewItemsError,
    ZeroGroundTruthError,
)
from stereovol.fusion import FusionModel
from stereovol.models import (
    REPORT_FLOOR_ML,
    TEMPLATE_IDS,
    ClassVocabulary,
    MetricsReport,
    PredictionRecord,
    PredictionSet,
    StereoSample,
    TrainConfig,
)
from stereovol.priors import VolumePriorTable, build_prior_table, prior_for_prediction
from stereovol.serialization import read_json, write_json
from stereovol.training import predict_samples, train

logger = logging.getLogger(__name__)

# Name, report attribute, True if lower is better
METRIC_COLUMNS = [
    ("MAE (mL)", "mae_ml", True),
    ("MAPE (%)", "mape_percent", True),
    ("r", "pearson_r", False),
    ("R2", "r_squared", False),
    ("cos", "cosine_similarity", False),
]

N_IMAGES_SWEEP = [1, 2, 5, 10, 20, 50]
KDE_MIN_POINTS = 512
KDE_MAX_POINTS = 16384


def _cosine(a, b):
    denominator = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if denominator == 0:
        return 0.0
    return float(np.clip(np.dot(a, b) / denominator, -1.0, 1.0))


def pearson_r(estimates, ground_truth) -> float:
    """Pearson correlation, 0 when either vector has zero variance."""
    x = np.asarray(estimates, dtype=np.float64)
    y = np.asarray(ground_truth, dtype=np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    return _cosine(x - x.mean(), y - y.mean())


def _clip_for_report(preds: PredictionSet) -> PredictionSet:
    records = tuple(record.clip() for record in preds.records)
    newly_clipped = sum(
        new.clipped and not old.clipped for new, old in zip(records, preds.records)
    )
    if newly_clipped:
        message = (
            f"{newly_clipped} of {len(preds)} '{preds.method}' estimates were below "
            f"{REPORT_FLOOR_ML} mL and were clipped before scoring"
        )
        logger.warning(message)
        warnings.warn(message, stacklevel=3)
    return replace(preds, records=records)


def _check_accuracy_classes(preds: PredictionSet, vocab: ClassVocabulary):
    missing = sorted(
        {r.class_label for r in preds.records if r.class_label not in vocab}
    )
    if missing:
        message = (
            f"Ground-truth classes {missing} are not in the vocabulary, their "
            "items count as misclassified"
        )
        logger.warning(message)
        warnings.warn(message, stacklevel=3)


def compute_metrics(
    preds: PredictionSet, vocab: Optional[ClassVocabulary] = None
) -> MetricsReport:
    """Regression metrics of a prediction set

    Arguments:
    ----------

        preds: PredictionSet
            At least two predictions with positive ground-truth volumes.
            Estimates below 0 mL are clipped to 0 mL and flagged.

        vocab: ClassVocabulary
            Classes the predicting model knows. Ground-truth classes outside
            it are reported with a warning.

    Returns:
    --------

        MetricsReport
            MAE in mL, MAPE in percent, Pearson r, R2 and cosine similarity
            between estimates and ground truth, and the number of clipped
            estimates. The classification accuracy is included when every
            record has a predicted class.
    """
    if len(preds) < 2:
        raise TooFewItemsError(
            f"Metrics need at least 2 predictions, got {len(preds)}"
        )
    preds = _clip_for_report(preds)
    estimates, ground_truth = preds.estimates, preds.ground_truth
    if np.any(ground_truth <= 0):
        raise ZeroGroundTruthError("MAPE is undefined for ground truth <= 0")

    accuracy = None
    if all(record.predicted_class is not None for record in preds.records):
        if vocab is not None:
            _check_accuracy_classes(preds, vocab)
        accuracy = float(
            np.mean(
                [
                    record.predicted_class == record.class_label
                    for record in preds.records
                ]
            )
        )

    return MetricsReport(
        mae_ml=float(mean_absolute_error(ground_truth, estimates)),
        mape_percent=float(
            100.0 * mean_absolute_percentage_error(ground_truth, estimates)
        ),
        pearson_r=pearson_r(estimates, ground_truth),
        r_squared=float(r2_score(ground_truth, estimates)),
        cosine_similarity=_cosine(estimates, ground_truth),
        n_items=len(preds),
        classification_accuracy=accuracy,
        method=preds.method,
        n_clipped=preds.n_clipped,
    )


def _constant_predictions(samples, volumes, method):
    return PredictionSet(
        tuple(
            PredictionRecord(
                item_id=sample.item_id,
                class_label=sample.class_label,
                volume_est=float(volume),
                volume_gt=sample.volume_gt,
                food_code=sample.food_code,
            )
            for sample, volume in zip(samples, volumes)
        ),
        method=method,
    )


def baseline_dataset_mean(
    train_volumes: Sequence[float], test: Sequence[StereoSample]
) -> PredictionSet:
    """Predict the mean training volume for every test item."""
    if len(train_volumes) == 0:
        raise DataEmptyError("The dataset-mean baseline needs training volumes")
    mean = float(np.mean(np.asarray(train_volumes, dtype=np.float64)))
    return _constant_predictions(test, [mean] * len(test), "dataset_mean")


def baseline_category_mean(
    table: VolumePriorTable, test: Sequence[StereoSample]
) -> PredictionSet:
    """Predict the prior of each item's ground-truth class."""
    volumes = [prior_for_prediction(table, sample.class_label) for sample in test]
    return _constant_predictions(test, volumes, "category_mean")


def item_volumes(samples: Sequence[StereoSample]) -> List[float]:
    """One volume per distinct item, in item id order."""
    by_item = {sample.item_id: sample.volume_gt for sample in samples}
    return [by_item[k] for k in sorted(by_item)]


def parse_variant(variant: str) -> Dict[str, object]:
    """TrainConfig overrides of an ablation variant.

    Variants are "full", "stereo_only", "text_only", "prompt_template_<k>"
    and "n_images_<k>".
    """
    if variant == "full":
        return {"fusion_inputs": "stereo+text"}
    if variant == "stereo_only":
        return {"fusion_inputs": "stereo"}
    if variant == "text_only":
        return {"fusion_inputs": "text"}
    match = re.fullmatch(r"prompt_template_(\d+)", variant)
    if match and int(match.group(1)) in TEMPLATE_IDS:
        return {"template_id": int(match.group(1))}
    match = re.fullmatch(r"n_images_(\d+)", variant)
    if match and int(match.group(1)) >= 1:
        return {"n_images": int(match.group(1))}
    raise DataError(
        f"Unknown ablation variant '{variant}', expected full, stereo_only, "
        f"text_only, prompt_template_<{TEMPLATE_IDS[0]}-{TEMPLATE_IDS[-1]}> or "
        "n_images_<k>"
    )


def run_ablation(
    variant: str,
    train_samples: Sequence[StereoSample],
    test_samples: Sequence[StereoSample],
    image_encoder: ImageEncoderBackend,
    text_encoder: TextEncoderBackend,
    config: TrainConfig = TrainConfig(),
    prior_table: Optional[VolumePriorTable] = None,
    vocab: Optional[ClassVocabulary] = None,
) -> MetricsReport:
    """Train and evaluate one ablation variant

    Arguments:
    ----------

        variant: str
            See ``parse_variant``. Masked branches are replaced by zeros of
            the same size, so every variant has the same architecture.

        train_samples, test_samples: list
            Samples of the shared split. ``n_images_<k>`` variants need
            samples with at least k views.

        image_encoder, text_encoder:
            Frozen encoder backends.

        config: TrainConfig
            Base settings, overridden by the variant.

        prior_table: VolumePriorTable
            Defaults to the training-split class means.

        vocab: ClassVocabulary
            Defaults to the sorted training labels.

    Returns:
    --------

        MetricsReport
            Test metrics, named after the variant, with the model's
            GFLOPs in ``extra``.
    """
    variant_config = replace(config, **parse_variant(variant))
    vocab = vocab or ClassVocabulary.from_labels(s.class_label for s in train_samples)
    if prior_table is None:
        prior_table = build_prior_table(train_samples, vocab)
    checkpoint, _ = train(
        variant_config, train_samples, image_encoder, text_encoder, prior_table, vocab
    )
    preds = predict_samples(
        checkpoint, test_samples, image_encoder, text_encoder, method=variant
    )
    report = compute_metrics(preds, vocab)
    extra = {"gflops": estimate_gflops(checkpoint.model, image_encoder)}
    logger.info(
        "Ablation %s: MAE %.2f mL, MAPE %.2f%%",
        variant,
        report.mae_ml,
        report.mape_percent,
    )
    return replace(report, extra=extra)


@dataclass(frozen=True)
class ErrorDistribution:
    """Plot data of the error distribution of a prediction set."""

    cdf: np.ndarray  # (m, 2): absolute error mL, cumulative fraction
    kde: np.ndarray  # (g, 2): signed percentage error, density
    bandwidth: float
    best_fit: Tuple[float, float]  # slope, intercept of estimate vs truth


def empirical_cdf(values) -> np.ndarray:
    """Distinct sorted values and the fraction of values <= each."""
    values = np.asarray(values, dtype=np.float64)
    points, counts = np.unique(values, return_counts=True)
    return np.column_stack([points, np.cumsum(counts) / len(values)])


def percentage_error_kde(pct_errors) -> Tuple[np.ndarray, float]:
    """Gaussian KDE with Silverman's bandwidth, evaluated on a grid.

    The grid extends four bandwidths past the data on each side. When all
    errors are equal the density is a unit normal centred on them.
    """
    pct_errors = np.asarray(pct_errors, dtype=np.float64)
    if np.ptp(pct_errors) == 0:
        bandwidth = 1.0
        center = pct_errors[0]
        grid = np.linspace(center - 4.0, center + 4.0, KDE_MIN_POINTS)
        return np.column_stack([grid, norm.pdf(grid, loc=center)]), bandwidth

    kde = gaussian_kde(pct_errors, bw_method="silverman")
    bandwidth = float(np.sqrt(kde.covariance[0, 0]))
    lower = pct_errors.min() - 4.0 * bandwidth
    upper = pct_errors.max() + 4.0 * bandwidth
    n_points = np.ceil(8.0 * (upper - lower) / bandwidth)
    n_points = int(np.clip(n_points, KDE_MIN_POINTS, KDE_MAX_POINTS))
    grid = np.linspace(lower, upper, n_points)
    return np.column_stack([grid, kde(grid)]), bandwidth


def best_fit_line(estimates, ground_truth) -> Tuple[float, float]:
    """Least-squares line estimate = slope * truth + intercept."""
    estimates = np.asarray(estimates, dtype=np.float64)
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    if np.ptp(ground_truth) == 0:
        return 0.0, float(np.mean(estimates))
    slope, intercept = np.polyfit(ground_truth, estimates, 1)
    return float(slope), float(intercept)


def error_distribution_series(preds: PredictionSet) -> ErrorDistribution:
    """CDF of absolute errors and KDE of signed percentage errors."""
    if len(preds) < 2:
        raise TooFewItemsError(
            f"Error distributions need at least 2 predictions, got {len(preds)}"
        )
    preds = replace(preds, records=tuple(record.clip() for record in preds.records))
    errors = preds.estimates - preds.ground_truth
    kde, bandwidth = percentage_error_kde(100.0 * errors / preds.ground_truth)
    return ErrorDistribution(
        cdf=empirical_cdf(np.abs(errors)),
        kde=kde,
        bandwidth=bandwidth,
        best_fit=best_fit_line(preds.estimates, preds.ground_truth),
    )


def write_error_distribution(out_dir, series: ErrorDistribution):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savetxt(
        out_dir / "cdf.csv",
        series.cdf,
        delimiter=",",
        header="abs_error_ml,cumulative_fraction",
        comments="",
    )
    np.savetxt(
        out_dir / "kde.csv",
        series.kde,
        delimiter=",",
        header="percent_error,density",
        comments="",
    )
    write_json(
        out_dir / "best_fit.json",
        {
            "slope": series.best_fit[0],
            "intercept": series.best_fit[1],
            "kde_bandwidth": series.bandwidth,
        },
    )


def fusion_head_flops(model: FusionModel) -> int:
    """Floating point operations of one forward pass of the trainable heads.

    Each affine layer costs 2 * inputs * outputs; biases and activations are
    not counted.
    """
    return sum(
        2 * module.in_features * module.out_features
        for module in model.modules()
        if isinstance(module, nn.Linear)
    )


def estimate_gflops(
    model: FusionModel, image_encoder: Optional[ImageEncoderBackend] = None
) -> float:
    """GFLOPs per item: the fusion heads plus one encoder pass per view."""
    flops = fusion_head_flops(model)
    if image_encoder is not None:
        flops += model.dims.n_images * image_encoder.flops_per_image
    return flops / 1e9


def metrics_to_dict(report: MetricsReport) -> dict:
    return asdict(report)


def metrics_from_dict(data: dict) -> MetricsReport:
    try:
        return MetricsReport(**data)
    except TypeError as err:
        raise DataError(f"Malformed metrics record: {err}") from err


def write_metrics(path, report: MetricsReport):
    write_json(path, metrics_to_dict(report))


def read_metrics(path) -> MetricsReport:
    return metrics_from_dict(read_json(path))


def relative_improvement(ours: float, best_other: float) -> float:
    """Percent change of our value relative to the best other method."""
    if best_other == 0:
        return float("nan")
    return (ours - best_other) / abs(best_other) * 100.0


def _best_other(reports, attribute, lower_is_better):
    values = [getattr(report, attribute) for report in reports]
    return min(values) if lower_is_better else max(values)


def comparison_table(
    reports: Sequence[MetricsReport], ours: Optional[str] = None
) -> str:
    """Pipe-separated table of methods and metrics

    Arguments:
    ----------

        reports: list
            One MetricsReport per method.

        ours: str
            Method compared against the best other method in a final row.
            Defaults to the report named "ours", or else the first report.

    Returns:
    --------

        str
            One header row with direction markers (down: lower is better,
            up: higher is better), one row per method and, with more than one
            method, the relative change of ``ours`` against the best other
            value in each column.
    """
    if len(reports) == 0:
        raise DataEmptyError("Nothing to compare")
    names = [report.method for report in reports]
    if ours is None:
        ours = "ours" if "ours" in names else names[0]
    ours_index = names.index(ours)
    others = [r for k, r in enumerate(reports) if k != ours_index]

    header = ["Method"] + [
        f"{label} {'↓' if lower else '↑'}" for label, _, lower in METRIC_COLUMNS
    ]
    rows = [header]
    for report in reports:
        rows.append(
            [report.method]
            + [f"{getattr(report, attr):.2f}" for _, attr, _ in METRIC_COLUMNS]
        )
    if others:
        improvement = ["Improvement"]
        for _, attr, lower in METRIC_COLUMNS:
            change = relative_improvement(
                getattr(reports[ours_index], attr),
                _best_other(others, attr, lower),
            )
            improvement.append(f"({change:+.1f}%)")
        rows.append(improvement)

    widths = [max(len(row[k]) for row in rows) for k in range(len(header))]
    lines = [
        "| " + " | ".join(cell.ljust(w) for cell, w in zip(row, widths)) + " |"
        for row in rows
    ]
    lines.insert(1, "|" + "|".join("-" * (w + 2) for w in widths) + "|")
    return "\n".join(lines) + "\n"
