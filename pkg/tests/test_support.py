import logging

import pytest

import coloredformatter
from coloredformatter import AnsiColor, ColoredFormatter, reset_stats, stats
from FileRoller import FileRoller
from singleton import Singleton
from templates import format_run_stats, selftest_line


def test_file_roller_keeps_the_newest(tmp_path):
    roller = FileRoller(tmp_path / "ckpt.dtpc", max_count=2)
    for i in range(4):
        roller.roll().write_text(str(i))
    assert roller.indexes() == [0, 1]
    assert roller.generation(0).read_text() == "3"
    assert roller.generation(1).read_text() == "2"
    assert not (tmp_path / "ckpt.dtpc").exists()


def test_file_roller_without_limit(tmp_path):
    roller = FileRoller(str(tmp_path / "ckpt.dtpc"))
    for i in range(3):
        roller.roll().write_text(str(i))
    assert roller.indexes() == [0, 1, 2]
    assert roller.generation(2).read_text() == "0"
    with pytest.raises(ValueError):
        FileRoller(tmp_path / "x.dtpc", max_count=0)


def test_colored_formatter_counts_levels():
    reset_stats()
    formatter = ColoredFormatter("%(levelname)s %(message)s")
    record = logging.LogRecord("t", logging.WARNING, __file__, 1, "careful", None, None)
    line = formatter.format(record)
    assert line.startswith(AnsiColor.YLW_CLR.value) and line.endswith(AnsiColor.RESET.value)
    assert "WARNING careful" in line
    assert record.levelname == "WARNING"
    assert stats["total_WARNING"] == 1 and stats["total_total"] == 1
    reset_stats()
    assert coloredformatter.stats["total_WARNING"] == 0


def test_singleton_and_reset():
    @Singleton
    class Counter:
        built = 0
        def __init__(self):
            Counter.built += 1

    assert Counter() is Counter()
    first = Counter()
    Counter.reset()
    assert Counter() is not first
    assert Counter.__name__ == "Counter"
    with pytest.raises(TypeError):
        Singleton(lambda: None)


def test_run_stats_template():
    text = format_run_stats()
    assert "Memory:" in text and "Warnings:" in text
    assert selftest_line.format(status="PASS", name="n", detail="d") == "[PASS] n: d"


def test_singleton_retries_a_failed_constructor():
    attempts = []

    @Singleton
    class Flaky:
        def __init__(self):
            attempts.append(1)
            if len(attempts) == 1:
                raise ValueError("first try fails")
            self.value = 42

    with pytest.raises(ValueError):
        Flaky()
    assert Flaky().value == 42
    assert Flaky() is Flaky()
    assert len(attempts) == 2
