"""
Exception hierarchy for the WAFFLE lab.

The command-line entry point maps these onto exit codes:
ConfigError -> 2, CellFailures -> 3, anything else -> 1.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_CELL_FAILURES = 3


class LabError(Exception):
    pass


class ConfigError(LabError):
    pass


class DatasetError(ConfigError):
    pass


class PartitionError(ConfigError):
    pass


class TamperError(LabError):
    pass


class LayoutMismatchError(LabError):
    pass


class ShapeMismatchError(LabError):
    pass


class SeedExhaustedError(LabError):
    pass


class ThresholdError(LabError):
    pass


class DivergenceError(LabError):
    def __init__(self, step: int, loss: float, where: str = "training"):
        super().__init__(f"Non-finite loss {loss} at step {step} during {where}")
        self.step = step
        self.loss = loss
        self.where = where


class CellFailures(LabError):
    def __init__(self, failed: dict):
        super().__init__(f"{len(failed)} grid cell(s) failed: {', '.join(sorted(failed))}")
        self.failed = failed
