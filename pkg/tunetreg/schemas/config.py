import math
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import Field, field_validator, model_validator

from tunetreg.custom_typing import ShapeType
from tunetreg.errors import IndivisibleShape

from .base import BaseSchema


class ShapeLimits:
    DIVISOR: int = 8
    MAX_ROTATION_DEG: float = 30.0


def _check_divisible_shape(shape: ShapeType) -> ShapeType:
    if any(s < ShapeLimits.DIVISOR for s in shape):
        raise ValueError(
            f"Shape dims must be >= {ShapeLimits.DIVISOR}, got {shape}."
        )
    if any(s % ShapeLimits.DIVISOR != 0 for s in shape):
        raise ValueError(
            f"Shape dims must be divisible by {ShapeLimits.DIVISOR}, "
            f"got {shape}."
        )
    return shape


# ----------------------------------------------------------------------------
# DATA CONFIGS
# ----------------------------------------------------------------------------
class SyntheticSpec(BaseSchema):
    shape: ShapeType = (32, 32, 32)
    num_blobs: int = Field(default=4, ge=1)
    # Blob radii as fractions of the smallest dim
    blob_radius_range: Tuple[float, float] = (0.12, 0.25)
    # Blob centers as fractions of each dim
    blob_center_range: Tuple[float, float] = (0.3, 0.7)
    # Outer fraction of each blob radius relabelled as a separate shell
    shell_fraction: float = Field(default=0.0, ge=0, lt=1)
    field_smoothness: float = Field(default=4.0, gt=0)
    max_displacement: float = Field(default=3.0, ge=0)
    seed: int = 0

    @field_validator("shape")
    def check_shape(cls, v: ShapeType) -> ShapeType:
        return _check_divisible_shape(v)

    @field_validator("blob_radius_range", "blob_center_range")
    def check_fraction_range(
        cls, v: Tuple[float, float]
    ) -> Tuple[float, float]:
        low, high = v
        if not 0 < low <= high <= 1:
            raise ValueError(f"Expected 0 < low <= high <= 1, got {v}.")
        return v


# ----------------------------------------------------------------------------
# MODEL CONFIGS
# ----------------------------------------------------------------------------
class TransformerBlockConfig(BaseSchema):
    channels: int = Field(ge=1)
    patch_size: int = Field(default=4, ge=1)
    num_heads: int = Field(default=4, ge=1)
    path_mode: Literal["down", "up"] = "down"

    @model_validator(mode="after")
    def check_heads(self) -> "TransformerBlockConfig":
        token_length = self.patch_size**3 * self.channels
        if token_length % self.num_heads != 0:
            raise ValueError(
                f"Token length {token_length} (P^3 * C) is not divisible "
                f"by {self.num_heads} heads."
            )
        return self

    @property
    def head_dim(self) -> int:
        return (self.patch_size**3 * self.channels) // self.num_heads


class TUNetConfig(BaseSchema):
    in_channels: int = 2
    levels: int = 3
    # Input level + one entry per pooled level
    level_widths: List[int] = [16, 32, 32, 32]
    # Levels hosting one encoder (down) and one decoder (up) block
    transformer_levels: List[int] = [1, 2]
    block_patch_sizes: List[int] = [4, 4]
    block_heads: List[int] = [4, 4]

    @field_validator("in_channels")
    def check_in_channels(cls, v: int) -> int:
        if v != 2:
            raise ValueError("Input is the (moving, fixed) pair: 2 channels.")
        return v

    @field_validator("level_widths")
    def check_widths(cls, v: List[int]) -> List[int]:
        if any(w < 1 for w in v):
            raise ValueError(f"Level widths must be positive, got {v}.")
        return v

    @model_validator(mode="after")
    def check_levels(self) -> "TUNetConfig":
        if self.levels != 3:
            raise ValueError("The encoder has exactly 3 pooling stages.")
        if len(self.level_widths) != self.levels + 1:
            raise ValueError(
                f"Expected {self.levels + 1} level widths, "
                f"got {len(self.level_widths)}."
            )
        n_blocks = len(self.transformer_levels)
        if not (
            len(self.block_patch_sizes) == n_blocks
            and len(self.block_heads) == n_blocks
        ):
            raise ValueError(
                "transformer_levels, block_patch_sizes and block_heads "
                "must have the same length."
            )
        if len(set(self.transformer_levels)) != n_blocks:
            raise ValueError("transformer_levels must be unique.")
        for level in self.transformer_levels:
            # Down output feeds level + 1, up output feeds level - 1
            if not 1 <= level <= self.levels - 1:
                raise ValueError(
                    f"Transformer level {level} outside [1, "
                    f"{self.levels - 1}]."
                )
        for level in self.transformer_levels:
            self.block_config(level, "down")
        return self

    def block_config(
        self, level: int, path_mode: Literal["down", "up"]
    ) -> Optional[TransformerBlockConfig]:
        if level not in self.transformer_levels:
            return None
        i = self.transformer_levels.index(level)
        return TransformerBlockConfig(
            channels=self.level_widths[level],
            patch_size=self.block_patch_sizes[i],
            num_heads=self.block_heads[i],
            path_mode=path_mode,
        )

    def shape_multiple(self) -> int:
        """Smallest n such that any input whose dims are multiples of n
        passes check_input_shape."""
        multiples = [2**self.levels] + [
            2**level * patch
            for level, patch in zip(
                self.transformer_levels, self.block_patch_sizes
            )
        ]
        return math.lcm(*multiples)

    def check_input_shape(self, shape: ShapeType) -> None:
        """Raise IndivisibleShape unless every level and every block's
        patch size divides the feature map at its level."""
        factor = 2**self.levels
        if any(s % factor != 0 or s < factor for s in shape):
            raise IndivisibleShape(
                f"Input shape {shape} must be divisible by {factor}."
            )
        for level, patch in zip(
            self.transformer_levels, self.block_patch_sizes
        ):
            level_shape = [s // 2**level for s in shape]
            if any(s % patch != 0 for s in level_shape):
                raise IndivisibleShape(
                    f"Level {level} features {tuple(level_shape)} are not "
                    f"divisible by patch size {patch}."
                )


# ----------------------------------------------------------------------------
# LOSS CONFIG
# ----------------------------------------------------------------------------
class LossConfig(BaseSchema):
    smoothness_weight: float = Field(default=0.1, ge=0, alias="lambda")
    cc_window: Tuple[int, int, int] = (9, 9, 9)
    epsilon: float = Field(default=1e-5, gt=0)
    # Regularise grad(phi) = I + grad(u) instead of grad(u)
    penalize_deformation: bool = False
    jacobian_norm: Literal["fro", "l1"] = "fro"

    @field_validator("cc_window", mode="before")
    def expand_window(cls, v: int | Tuple[int, int, int]) -> Tuple[int, ...]:
        if isinstance(v, int):
            return (v, v, v)
        return tuple(v)

    @field_validator("cc_window")
    def check_window(cls, v: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if any(w < 1 or w % 2 == 0 for w in v):
            raise ValueError(f"CC window must be odd and >= 1, got {v}.")
        return v


# ----------------------------------------------------------------------------
# TRAINING CONFIG
# ----------------------------------------------------------------------------
class TrainConfig(BaseSchema):
    epochs: int = Field(default=30, ge=1)
    # None means one step per training pair
    steps_per_epoch: Optional[int] = Field(default=None, ge=1)
    learning_rate: float = Field(default=1e-4, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    batch_size: int = Field(default=1, ge=1)
    patch_shape: ShapeType = (128, 128, 64)
    # None means stride == patch_shape
    patch_stride: Optional[ShapeType] = None
    max_rotation_deg: float = Field(default=10.0, ge=0)
    seed: int = 0
    checkpoint_dir: Path = Path("checkpoints")
    # None means one checkpoint per epoch
    checkpoint_interval: Optional[int] = Field(default=None, ge=1)
    val_interval: int = Field(default=1, ge=1)
    log_interval: int = Field(default=10, ge=1)
    num_workers: int = Field(default=0, ge=0)
    prefetch_factor: int = Field(default=2, ge=1)
    deterministic: bool = True
    resume_from: Optional[Path] = None
    # Whole-volume validation when None, patch-stitched otherwise
    inference_patch_shape: Optional[ShapeType] = None

    @field_validator("patch_shape")
    def check_patch_shape(cls, v: ShapeType) -> ShapeType:
        return _check_divisible_shape(v)

    @field_validator("inference_patch_shape")
    def check_inference_shape(
        cls, v: Optional[ShapeType]
    ) -> Optional[ShapeType]:
        return None if v is None else _check_divisible_shape(v)

    @field_validator("patch_stride")
    def check_stride(cls, v: Optional[ShapeType]) -> Optional[ShapeType]:
        if v is not None and any(s < 1 for s in v):
            raise ValueError(f"Patch stride must be positive, got {v}.")
        return v

    @field_validator("max_rotation_deg")
    def check_rotation(cls, v: float) -> float:
        if v > ShapeLimits.MAX_ROTATION_DEG:
            raise ValueError("Rotation augmentation is limited to 30 deg.")
        return v


# ----------------------------------------------------------------------------
# EVALUATION AND GRADIENT CHECK CONFIGS
# ----------------------------------------------------------------------------
class EvaluationConfig(BaseSchema):
    # None means every non-background label present in the fixed map
    labels: Optional[List[int]] = None
    inference_patch_shape: Optional[ShapeType] = None


class GradcheckConfig(BaseSchema):
    seed: int = 0
    eps: float = Field(default=1e-6, gt=0)
    # Gradients below this magnitude are compared in absolute terms
    error_floor: float = Field(default=1e-6, gt=0)
    samples_per_group: int = Field(default=6, ge=1)
    tolerance: Optional[float] = Field(default=None, gt=0)
    # Test hook: flip the analytic gradient sign of the named check
    inject_sign_flip: Optional[str] = None


# ----------------------------------------------------------------------------
# PREPROCESSING CONFIG
# ----------------------------------------------------------------------------
class PreprocessConfig(BaseSchema):
    # None pads each dim up to the network's shape multiple
    target_shape: Optional[ShapeType] = None
    normalize: bool = True

    @field_validator("target_shape")
    def check_target_shape(
        cls, v: Optional[ShapeType]
    ) -> Optional[ShapeType]:
        if v is not None and any(s < 1 for s in v):
            raise ValueError(f"Target dims must be >= 1, got {v}.")
        return v


# ----------------------------------------------------------------------------
# RUN CONFIG
# ----------------------------------------------------------------------------
class RunConfig(BaseSchema):
    seed: int = 0
    out_dir: Path = Path("runs")
    data_dir: Optional[Path] = None
    num_pairs: int = Field(default=10, ge=1)
    num_val_pairs: int = Field(default=2, ge=0)
    synthetic: SyntheticSpec = SyntheticSpec()
    model: TUNetConfig = TUNetConfig()
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    gradcheck: GradcheckConfig = GradcheckConfig()

    def with_root_seed(self) -> "RunConfig":
        """Propagate the root seed to every seeded sub-config."""
        return self.model_copy(
            update={
                "synthetic": self.synthetic.model_copy(
                    update={"seed": self.seed}
                ),
                "train": self.train.model_copy(update={"seed": self.seed}),
                "gradcheck": self.gradcheck.model_copy(
                    update={"seed": self.seed}
                ),
            }
        )

    @classmethod
    def from_file(cls, filepath: Optional[Path]) -> "RunConfig":
        if filepath is None:
            return cls()
        with open(filepath, "r", encoding="utf-8") as f:
            return cls.model_validate_json(f.read())
