import sys

import pytest

from bevkd.config import ExperimentConfig


def tiny_config(**over) -> ExperimentConfig:
    """A configuration small enough to train every stage in seconds."""
    base = {
        "grid.cells": 16, "data.n_train": 24, "data.n_val": 12,
        "teacher.epochs": 2, "labelenc.epochs": 2, "student.epochs": 2,
        "teacher.batch_size": 8, "labelenc.batch_size": 8, "student.batch_size": 8,
        "model.teacher_channels": 8, "model.hidden": 8, "model.column_channels": 8,
        "model.label_dim": 8, "model.depth_bins": 8,
        "partition.image": 4, "partition.lidar": 4, "partition.label": 4,
    }
    base.update(over)
    return ExperimentConfig().replace(**base).validate()


@pytest.fixture
def tiny():
    return tiny_config()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
