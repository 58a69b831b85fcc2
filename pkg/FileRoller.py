from os import remove
from typing import Union
from pathlib import Path
import logging

logger = logging.getLogger(__name__)

class FileRoller:
    """
    Keeps numbered generations of a file next to its base path: for `run/ckpt.dtpc`
    the newest is `run/ckpt.0.dtpc`, the one before `run/ckpt.1.dtpc`, and so on.

    Attributes:
        path (Path): The base file path to roll.
        max_count (int): The maximum number of generations to keep. If None, no limit is applied.
    """

    def __init__(self, path: Union[str, Path], max_count: int = None):
        """
        Args:
            path (Union[str, Path]): The base file path to roll.
            max_count (int, optional): The maximum number of generations to keep. Defaults to None.
        """
        if max_count is not None and max_count < 1:
            raise ValueError(f"max_count must be >= 1, got {max_count}")
        self.path = Path(path) if isinstance(path, str) else path
        self.max_count = max_count

    def generation(self, index: int) -> Path:
        return self.path.with_name(f"{self.path.stem}.{index}{self.path.suffix}")

    def indexes(self) -> list[int]:
        """Generation numbers present on disk, newest first."""
        found = []
        for p in self.path.parent.glob(f"{self.path.stem}.*{self.path.suffix}"):
            index = p.name[len(self.path.stem) + 1:len(p.name) - len(self.path.suffix)]
            if index.isdigit():
                found.append(int(index))
        return sorted(found)

    def roll(self) -> Path:
        """
        Shifts every generation up by one and returns the free path of generation 0.

        If max_count is specified, the oldest generation is deleted first.
        """
        if self.max_count is not None:
            last_file = self.generation(self.max_count - 1)
            if last_file.exists():
                logger.debug(f"Dropping {last_file}")
                remove(last_file)
            top = self.max_count - 1
        else:
            top = max(self.indexes(), default=-1)

        for i in range(top, -1, -1):
            current_file = self.generation(i)
            if current_file.exists():
                logger.debug(f"Rolling {current_file} to {self.generation(i + 1)}")
                current_file.rename(self.generation(i + 1))
        return self.generation(0)

