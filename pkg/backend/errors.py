from typing import Optional


class MolDiffError(Exception):
    """Base error. `category` is the machine-readable tag the CLI reports."""

    category = "internal"
    exit_code = 1


class ShapeError(MolDiffError):
    category = "shape"
    exit_code = 3


class NonFiniteError(MolDiffError):
    category = "non_finite"
    exit_code = 3


class SmilesError(MolDiffError):
    category = "parse"
    exit_code = 4

    def __init__(self, reason: str, message: str, position: Optional[int] = None):
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"{reason}: {message}{where}")
        self.reason = reason
        self.position = position


class GraphError(MolDiffError):
    category = "graph"
    exit_code = 4


class DatasetError(MolDiffError):
    category = "dataset"
    exit_code = 5


class CheckpointError(MolDiffError):
    category = "checkpoint"
    exit_code = 6


class StageOrderError(MolDiffError):
    category = "stage_order"
    exit_code = 7

    def __init__(self, missing_stage: str, message: str):
        super().__init__(message)
        self.missing_stage = missing_stage


class ConfigError(MolDiffError):
    category = "config"
    exit_code = 8


class EvaluationError(MolDiffError):
    category = "evaluation"
    exit_code = 9
