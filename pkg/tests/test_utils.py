import pytest

from stereovol.utils import (
    digest,
    format_volume,
    verify_key_value_set,
    verify_key_value_type,
    verify_positive,
    verify_range,
)


def test_format_volume():
    assert format_volume(203.44, 1) == "203.4"
    assert format_volume(203.45, 0) == "203"
    assert format_volume(5, 2) == "5.00"


def test_verify_range():
    verify_range("x", 1.0, 0.0, 1.0)
    with pytest.raises(ValueError) as info:
        verify_range("x", 1.5, 0.0, 1.0)
    assert "'x'" in str(info)


def test_verify_positive():
    verify_positive("x", 1e-9)
    with pytest.raises(ValueError):
        verify_positive("x", 0.0)
    with pytest.raises(ValueError):
        verify_positive("x", float("nan"))


def test_verify_key_value_type_rejects_bool_for_numbers():
    verify_key_value_type("config", "epochs", {"epochs": 3}, int)
    verify_key_value_type("config", "flag", {"flag": True}, bool)
    verify_key_value_type("config", "lr", {"lr": 1}, (int, float))
    with pytest.raises(ValueError) as info:
        verify_key_value_type("config", "epochs", {"epochs": True}, int)
    assert "int" in str(info)
    with pytest.raises(ValueError) as info:
        verify_key_value_type("config", "lr", {"lr": "fast"}, (int, float))
    assert "int or float" in str(info)


def test_verify_key_value_set():
    verify_key_value_set("config", "level", {"level": "INFO"}, ["INFO"])
    with pytest.raises(ValueError):
        verify_key_value_set("config", "level", {"level": "LOUD"}, ["INFO"])


def test_digest_ignores_key_order():
    assert digest({"a": 1, "b": [1, 2]}) == digest({"b": [1, 2], "a": 1})
    assert digest({"a": 1}) != digest({"a": 2})
