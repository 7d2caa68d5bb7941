"""
Utilities
"""

import hashlib
import json

import numpy as np


def verify_range(name, value, lower_limit, upper_limit):
    """Verify that an argument has a value within a specified range."""
    if value < lower_limit or value > upper_limit:
        raise ValueError(
            f"The value of {value} for the argument '{name}' is not within the "
            f"range [{lower_limit},{upper_limit}]."
        )


def verify_positive(name, value):
    """Verify that an argument is strictly positive."""
    if not value > 0:
        raise ValueError(f"The value of {value} for the argument '{name}' must be > 0.")


def verify_set(name, value, set_):
    """Verify that an argument has a value within a specified set."""
    if value not in set_:
        raise ValueError(
            f"The value of '{value}' for the argument '{name}' is not in the set {set_}."
        )


def verify_finite(name, values):
    """Verify that all entries of an array are finite."""
    if not np.all(np.isfinite(values)):
        raise ValueError(f"The argument '{name}' contains non-finite values.")


def _type_name(type_):
    if isinstance(type_, tuple):
        return " or ".join(t.__name__ for t in type_)
    return type_.__name__


def verify_key_value_type(dict_name, key, dict_, type_):
    """Verify that the value of a key is the correct type"""
    if not isinstance(dict_[key], type_) or isinstance(dict_[key], bool) != (
        type_ is bool
    ):
        raise ValueError(
            f"The value '{dict_[key]}' for the key '{key}', in the variable "
            f"'{dict_name}', should be of type '{_type_name(type_)}'"
        )


def verify_key_value_set(dict_name, key, dict_, set_):
    """Verify that a key has a value within a specified set."""
    if dict_[key] not in set_:
        raise ValueError(
            f"The value '{dict_[key]}' for the key '{key}', in the variable "
            f"'{dict_name}', is not in the set {set_}."
        )


def format_volume(volume_ml, decimals):
    """Render a volume with a fixed number of decimals (no unit)."""
    return f"{volume_ml:.{decimals}f}"


def digest(records):
    """SHA-256 of a JSON-serializable object, independent of key order."""
    payload = json.dumps(records, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
