"""
Nutrient estimates from volume estimates.

A nutrient database maps each food code to the nutrient content of a
reference volume of that food. Nutrients of an item are the reference values
scaled linearly by the estimated volume, which assumes that density and
composition are constant within a food code.
"""

import logging
import warnings
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence

import numpy as np
from sklearn.metrics import mean_absolute_error

from stereovol.exceptions import (
    DataError,
    EmptyBatchError,
    LengthMismatchError,
    NonPositiveVolumeError,
)
from stereovol.models import PredictionSet
from stereovol.serialization import read_json, write_json
from stereovol.utils import verify_positive

logger = logging.getLogger(__name__)

NUTRIENTS = ["energy_kcal", "protein_g", "carbohydrate_g", "fat_g"]

# Smallest volume (mL) used when scaling a non-positive estimate
DEFAULT_VOLUME_FLOOR_ML = 1.0


@dataclass(frozen=True)
class NutrientAmounts:
    energy_kcal: float
    protein_g: float
    carbohydrate_g: float
    fat_g: float

    def as_array(self):
        return np.array([getattr(self, name) for name in NUTRIENTS])


@dataclass(frozen=True)
class NutrientProfile:
    """Nutrients contained in ``reference_volume_ml`` of one food."""

    food_code: str
    energy_kcal: float
    protein_g: float
    carbohydrate_g: float
    fat_g: float
    reference_volume_ml: float = 100.0

    def __post_init__(self):
        if not self.food_code:
            raise DataError("food_code must be a non-empty string")
        for name in NUTRIENTS:
            if not getattr(self, name) >= 0:
                raise DataError(
                    f"Food '{self.food_code}' has {name}={getattr(self, name)}, "
                    "must be >= 0"
                )
        verify_positive("reference_volume_ml", self.reference_volume_ml)


def scale_nutrients(profile: NutrientProfile, volume_ml: float) -> NutrientAmounts:
    """Nutrients of ``volume_ml`` of a food, linear in the volume."""
    if not volume_ml > 0:
        raise NonPositiveVolumeError(
            f"Cannot scale nutrients to a volume of {volume_ml} mL"
        )
    ratio = volume_ml / profile.reference_volume_ml
    return NutrientAmounts(
        **{name: getattr(profile, name) * ratio for name in NUTRIENTS}
    )


def nutrient_mae(
    estimates: Sequence[NutrientAmounts], ground_truth: Sequence[NutrientAmounts]
) -> Dict[str, float]:
    """Mean absolute error of each nutrient over matched items."""
    if len(estimates) != len(ground_truth):
        raise LengthMismatchError(
            f"{len(estimates)} estimates for {len(ground_truth)} ground-truth items"
        )
    if len(estimates) == 0:
        raise EmptyBatchError("Nutrient errors need at least one item")
    estimated = np.stack([amounts.as_array() for amounts in estimates])
    true = np.stack([amounts.as_array() for amounts in ground_truth])
    return {
        name: float(mean_absolute_error(true[:, k], estimated[:, k]))
        for k, name in enumerate(NUTRIENTS)
    }


def load_nutrient_database(path) -> Dict[str, NutrientProfile]:
    """Read a database stored as {food_code: {nutrient: value, ...}}."""
    data = read_json(path)
    if not isinstance(data, dict):
        raise DataError(f"Nutrient database {path} must be a JSON object")
    try:
        return {
            code: NutrientProfile(food_code=code, **values)
            for code, values in data.items()
        }
    except TypeError as err:
        raise DataError(f"Malformed nutrient database {path}: {err}") from err


def save_nutrient_database(path, database: Dict[str, NutrientProfile]):
    records = {}
    for code, profile in sorted(database.items()):
        record = asdict(profile)
        del record["food_code"]
        records[code] = record
    write_json(path, records)


@dataclass(frozen=True)
class NutrientEstimate:
    """Estimated and ground-truth nutrients of one item."""

    item_id: str
    food_code: str
    volume_est: float
    volume_gt: float
    clipped: bool
    estimated: NutrientAmounts
    ground_truth: NutrientAmounts


def estimate_nutrients(
    preds: PredictionSet,
    database: Dict[str, NutrientProfile],
    volume_floor_ml: float = DEFAULT_VOLUME_FLOOR_ML,
) -> List[NutrientEstimate]:
    """Nutrients of every prediction from its food code

    Arguments:
    ----------

        preds: PredictionSet
            Predictions whose records carry a food code.

        database: dict
            Food code -> NutrientProfile.

        volume_floor_ml: float
            Estimates below this volume are raised to it and flagged.

    Returns:
    --------

        list
            One NutrientEstimate per prediction. Ground-truth nutrients are
            the profile scaled by the ground-truth volume.
    """
    verify_positive("volume_floor_ml", volume_floor_ml)
    results, n_clipped = [], 0
    for record in preds.records:
        if record.food_code is None:
            raise DataError(f"Item '{record.item_id}' has no food code")
        if record.food_code not in database:
            raise DataError(
                f"Food code '{record.food_code}' of item '{record.item_id}' is "
                "not in the nutrient database"
            )
        profile = database[record.food_code]
        clipped = record.volume_est < volume_floor_ml
        n_clipped += clipped
        volume = max(record.volume_est, volume_floor_ml)
        results.append(
            NutrientEstimate(
                item_id=record.item_id,
                food_code=record.food_code,
                volume_est=volume,
                volume_gt=record.volume_gt,
                clipped=clipped,
                estimated=scale_nutrients(profile, volume),
                ground_truth=scale_nutrients(profile, record.volume_gt),
            )
        )
    if n_clipped:
        warnings.warn(
            f"{n_clipped} volume estimates were below {volume_floor_ml} mL and "
            "were clipped before scaling nutrients",
            stacklevel=2,
        )
    return results


def nutrition_report(estimates: Sequence[NutrientEstimate]) -> Dict[str, float]:
    """Volume MAE (mL) next to the MAE of every nutrient."""
    if len(estimates) == 0:
        raise EmptyBatchError("Nutrient errors need at least one item")
    volume_mae = mean_absolute_error(
        [e.volume_gt for e in estimates], [e.volume_est for e in estimates]
    )
    report = {"volume_ml": float(volume_mae)}
    report.update(
        nutrient_mae(
            [e.estimated for e in estimates], [e.ground_truth for e in estimates]
        )
    )
    report["n_items"] = len(estimates)
    report["n_clipped"] = sum(e.clipped for e in estimates)
    logger.info("Nutrient errors over %d items: %s", len(estimates), report)
    return report
