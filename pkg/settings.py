from logging import getLogger
from os import getenv

import torch

from singleton import Singleton
from utils import ValidationError, string_to_list

logger = getLogger(__name__)

DEFAULT_EXTENSIONS = "extensions.gen_data,extensions.train,extensions.inpaint,extensions.evaluate,extensions.selftest"


def _int_env(name: str, default: int, minimum: int = 0) -> int:
    raw = getenv(name, str(default))
    try:
        value = int(raw)
    except ValueError:
        raise ValidationError(f"{name} must be an integer, got {raw!r}") from None
    if value < minimum:
        raise ValidationError(f"{name} must be >= {minimum}, got {value}")
    return value


@Singleton
class Settings:
    """Process-wide settings read from the environment once the .env layers are loaded."""

    def __init__(self):
        self.log_level = getenv("LOG_LEVEL", "INFO").upper()
        self.log_file = getenv("LOG_FILE", "ditpaint.log")
        self.extensions = string_to_list(getenv("DITPAINT_EXTENSIONS", DEFAULT_EXTENSIONS))
        self.threads = _int_env("DITPAINT_THREADS", 0)
        self.keep_checkpoints = _int_env("DITPAINT_KEEP_CHECKPOINTS", 3, minimum=1)

    def apply(self):
        if self.threads:
            torch.set_num_threads(self.threads)
            logger.debug(f"torch intra-op threads set to {self.threads}")

    def __repr__(self):
        return (f"Settings(log_level={self.log_level}, log_file={self.log_file}, threads={self.threads}, "
                f"keep_checkpoints={self.keep_checkpoints}, extensions={self.extensions})")
