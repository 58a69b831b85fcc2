import math

import pytest

from utils import (ClipError, DitPaintError, NumericsError, RollingMean, ShapeError, ValidationError,
                   check_same_shape, format_shape, parse_size, string_to_list)


class _Shaped:
    def __init__(self, *shape):
        self.shape = shape


def test_error_hierarchy():
    assert issubclass(ShapeError, ValidationError)
    assert issubclass(ValidationError, ValueError)
    assert issubclass(NumericsError, ArithmeticError)
    assert issubclass(ClipError, DitPaintError)
    assert NumericsError("bad", 7).index == 7
    assert ClipError("bad", 2).clip_index == 2


def test_check_same_shape_names_shapes():
    check_same_shape("op", _Shaped(2, 3), _Shaped(2, 3))
    with pytest.raises(ShapeError, match="2x3 vs 3x2"):
        check_same_shape("op", _Shaped(2, 3), _Shaped(3, 2))


def test_format_shape():
    assert format_shape((8, 8, 17, 8)) == "8x8x17x8"


@pytest.mark.parametrize("text, expected", [("64x64", (64, 64)), ("432X240", (432, 240)), (" 16 x 32 ", (16, 32))])
def test_parse_size(text, expected):
    assert parse_size(text) == expected


@pytest.mark.parametrize("text", ["64", "0x16", "axb", "16x16x16", ""])
def test_parse_size_rejects(text):
    with pytest.raises(ValidationError):
        parse_size(text)


def test_string_to_list():
    assert string_to_list("a, b,,c") == ["a", "b", "c"]
    assert string_to_list("a\nb\n") == ["a", "b"]


def test_rolling_mean_window():
    mean = RollingMean(3)
    assert math.isnan(mean.get())
    for v in (1, 2, 3, 4):
        mean.set(v)
    assert mean.full()
    assert mean.get() == pytest.approx(3.0)
    assert mean.count == 4
    assert str(mean) == "3.00000"
    with pytest.raises(ValueError):
        RollingMean(0)
