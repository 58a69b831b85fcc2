import re
from collections import deque
from logging import getLogger
from typing import Iterable

logger = getLogger(__name__)


class DitPaintError(Exception):
    pass

class ValidationError(DitPaintError, ValueError):
    """Bad arguments, malformed files or config, violated preconditions. CLI exit code 1."""
    pass

class ShapeError(ValidationError):
    pass

class NumericsError(DitPaintError, ArithmeticError):
    """
    A non-finite value showed up where every value must be finite.

    Attributes:
        index (int | None): the step or iteration at which it was detected.
    """
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index

class ClipError(DitPaintError):
    """Raised when the velocity model fails inside one multidiffusion clip; the cause is chained."""
    def __init__(self, message: str, clip_index: int):
        super().__init__(message)
        self.clip_index = clip_index


def format_shape(shape: Iterable[int]) -> str:
    return "x".join(str(int(d)) for d in shape)

def check_same_shape(what: str, *tensors) -> None:
    """
    Raises ShapeError naming every shape when the given tensors disagree.

    Args:
        what (str): name of the operation, used in the message.
        *tensors: anything with a `.shape`.
    """
    shapes = [tuple(t.shape) for t in tensors]
    if any(s != shapes[0] for s in shapes[1:]):
        raise ShapeError(f"{what}: shape mismatch " + " vs ".join(format_shape(s) for s in shapes))


_size_pattern = re.compile(r"^\s*(\d+)\s*[xX]\s*(\d+)\s*$")

def parse_size(text: str) -> tuple[int, int]:
    """
    Parses "AxB" into (A, B). The caller decides which side is height.

    Raises:
        ValidationError: if the text is not two positive integers joined by x.
    """
    match = _size_pattern.match(text)
    if not match:
        raise ValidationError(f"expected a size like 64x64, got {text!r}")
    a, b = int(match.group(1)), int(match.group(2))
    if a <= 0 or b <= 0:
        raise ValidationError(f"size must be positive, got {text!r}")
    return a, b

def string_to_list(string: str) -> list[str]:
    # accepts comma or newline separated values, keeps order, drops blanks
    separator = "\n" if "\n" in string[:40] else ","
    return [item.strip() for item in string.split(separator) if item.strip()]


class RollingMean:
    def __init__(self, window: int):
        """
        Mean over the last `window` values pushed.

        :param window: number of values kept. Must be > 0.
        """
        if window <= 0:
            raise ValueError("Window must be greater than 0.")
        self.window = window
        self.values = deque(maxlen=window)
        self.count = 0

    def set(self, value: float):
        """Pushes a value, evicting the oldest once the window is full."""
        self.values.append(float(value))
        self.count += 1

    def get(self) -> float:
        """
        Returns the mean of the values currently in the window, or nan when empty.
        """
        if not self.values:
            return float("nan")
        return sum(self.values) / len(self.values)

    def full(self) -> bool:
        return len(self.values) == self.window

    def __str__(self):
        return f"{self.get():.5f}" # make it easy to use in templates

    def __repr__(self):
        return f"RollingMean(window={self.window}, count={self.count})"

