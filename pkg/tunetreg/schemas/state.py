from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import numpy as np
from pydantic import field_validator, model_validator

from tunetreg.global_variables import (
    REFERENCE_DICE_TABLE,
    REFERENCE_STRUCTURES,
)

from .base import ArraySchema, BaseSchema
from .config import LossConfig, RunConfig, TrainConfig, TUNetConfig


# ----------------------------------------------------------------------------
# TRAINING STATE
# ----------------------------------------------------------------------------
class LossRecord(BaseSchema):
    step: int
    total: float
    cc: float
    smooth: float


class Checkpoint(ArraySchema):
    network_config: TUNetConfig
    train_config: TrainConfig
    loss_config: LossConfig
    # Parameter name -> array, in the module's state_dict order
    state: Dict[str, np.ndarray]
    # "<param name>/<buffer>" -> array; empty for untrained checkpoints
    optimizer_state: Dict[str, np.ndarray] = {}
    step: int = 0
    loss_trace: List[LossRecord] = []

    def to_dict(self) -> Dict[str, Any]:
        return {
            "network_config": self.network_config.model_dump_json(),
            "train_config": self.train_config.model_dump_json(),
            "loss_config": self.loss_config.model_dump_json(),
            "state": self.state,
            "optimizer_state": self.optimizer_state,
            "step": self.step,
            "loss_trace": [
                record.model_dump_json() for record in self.loss_trace
            ],
        }

    @classmethod
    def from_dict(cls, input_dict: Dict[str, Any]) -> "Checkpoint":
        return cls(
            network_config=TUNetConfig.model_validate_json(
                input_dict["network_config"]
            ),
            train_config=TrainConfig.model_validate_json(
                input_dict["train_config"]
            ),
            loss_config=LossConfig.model_validate_json(
                input_dict["loss_config"]
            ),
            state=input_dict["state"],
            optimizer_state=input_dict["optimizer_state"],
            step=input_dict["step"],
            loss_trace=[
                LossRecord.model_validate_json(record)
                for record in input_dict["loss_trace"]
            ],
        )


class ValidationResult(BaseSchema):
    mean_loss: float
    # None when no validation pair carries segmentations
    mean_dice: Optional[float] = None


# ----------------------------------------------------------------------------
# EVALUATION STATE
# ----------------------------------------------------------------------------
class ReferenceTable(BaseSchema):
    """Published Dice values, carried for context and never recomputed."""

    structures: List[str] = REFERENCE_STRUCTURES
    rows: Dict[str, List[float]] = REFERENCE_DICE_TABLE


class RegistrationReport(BaseSchema):
    per_label_dice: Dict[int, float]
    mean_dice: float
    baseline_dice: Dict[int, float]
    baseline_mean_dice: float
    # Labels absent from both maps, scored 1.0 by convention
    empty_labels: List[int] = []
    loss_components: Optional[LossRecord] = None
    runtime_s: float = 0.0
    config_hash: str = ""
    checkpoint_id: str = ""
    reference_table: ReferenceTable = ReferenceTable()

    @field_validator("per_label_dice", "baseline_dice")
    def check_dice_range(cls, v: Dict[int, float]) -> Dict[int, float]:
        for label, dice in v.items():
            if not 0.0 <= dice <= 1.0:
                raise ValueError(f"Dice of label {label} outside [0, 1].")
        return v

    @model_validator(mode="after")
    def check_mean(self) -> "RegistrationReport":
        if self.per_label_dice:
            mean = float(np.mean(list(self.per_label_dice.values())))
            if not np.isclose(mean, self.mean_dice, rtol=0, atol=1e-9):
                raise ValueError("mean_dice must be the per-label mean.")
        return self


# ----------------------------------------------------------------------------
# CLI STATE
# ----------------------------------------------------------------------------
class RunManifest(BaseSchema):
    command: Literal["train", "register", "evaluate", "synth", "gradcheck"]
    config_path: Optional[Path] = None
    config: RunConfig
    config_hash: str
    outputs: Dict[str, Path] = {}


class GradcheckResult(BaseSchema):
    name: str
    max_relative_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_relative_error <= self.tolerance)
