from typing import Optional, Set, Tuple

import numpy as np
import torch
from pydantic import field_validator, model_validator

from tunetreg.custom_typing import ShapeType, SpacingType

from .base import ArraySchema, BaseSchema


# ----------------------------------------------------------------------------
# VOLUMES AND LABEL MAPS
# ----------------------------------------------------------------------------
class Volume(ArraySchema):
    """3D scalar intensity grid (H, W, D) with voxel spacing in mm."""

    data: np.ndarray
    spacing: SpacingType = (1.0, 1.0, 1.0)

    @field_validator("data")
    def check_data(cls, v: np.ndarray) -> np.ndarray:
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"Volume must be a 3D grid, got {v.shape}.")
        if not np.issubdtype(v.dtype, np.floating):
            v = v.astype(np.float32)
        if not np.isfinite(v).all():
            raise ValueError("Volume contains NaN or Inf values.")
        return v

    @field_validator("spacing")
    def check_spacing(cls, v: SpacingType) -> SpacingType:
        if any(s <= 0 for s in v):
            raise ValueError(f"Spacing must be positive, got {v}.")
        return v

    @property
    def shape(self) -> ShapeType:
        return tuple(self.data.shape)  # type: ignore

    @property
    def intensity_range(self) -> Tuple[float, float]:
        return (float(self.data.min()), float(self.data.max()))

    def to_tensor(self) -> torch.Tensor:
        """Returns a (1, 1, H, W, D) float32 tensor."""
        return torch.from_numpy(
            np.ascontiguousarray(self.data, dtype=np.float32)
        )[None, None]

    @classmethod
    def from_tensor(
        cls, tensor: torch.Tensor, spacing: SpacingType = (1.0, 1.0, 1.0)
    ) -> "Volume":
        data = tensor.detach().cpu().reshape(tensor.shape[-3:]).numpy()
        return cls(data=data.astype(np.float32), spacing=spacing)


class SegmentationMap(ArraySchema):
    """Integer label grid; label 0 is background."""

    labels: np.ndarray
    spacing: SpacingType = (1.0, 1.0, 1.0)

    @field_validator("labels")
    def check_labels(cls, v: np.ndarray) -> np.ndarray:
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"Label map must be a 3D grid, got {v.shape}.")
        if not np.issubdtype(v.dtype, np.integer):
            raise ValueError(f"Label map must be integer, got {v.dtype}.")
        if v.size and v.min() < 0:
            raise ValueError("Labels must be non-negative.")
        return v

    @property
    def shape(self) -> ShapeType:
        return tuple(self.labels.shape)  # type: ignore

    @property
    def label_set(self) -> Set[int]:
        return {int(label) for label in np.unique(self.labels)}

    def to_tensor(self) -> torch.Tensor:
        """Returns a (1, 1, H, W, D) int64 tensor."""
        return torch.from_numpy(self.labels.astype(np.int64))[None, None]

    @classmethod
    def from_tensor(
        cls, tensor: torch.Tensor, spacing: SpacingType = (1.0, 1.0, 1.0)
    ) -> "SegmentationMap":
        labels = tensor.detach().cpu().reshape(tensor.shape[-3:]).numpy()
        return cls(labels=labels.astype(np.int32), spacing=spacing)


class VolumePair(ArraySchema):
    moving: Volume
    fixed: Volume
    moving_seg: Optional[SegmentationMap] = None
    fixed_seg: Optional[SegmentationMap] = None

    @model_validator(mode="after")
    def check_shapes(self) -> "VolumePair":
        shape = self.fixed.shape
        others = [self.moving, self.moving_seg, self.fixed_seg]
        for other in others:
            if other is not None and other.shape != shape:
                raise ValueError(
                    f"Pair members disagree on shape: {other.shape} != "
                    f"{shape}."
                )
        return self

    @property
    def shape(self) -> ShapeType:
        return self.fixed.shape

    @property
    def has_segmentations(self) -> bool:
        return self.moving_seg is not None and self.fixed_seg is not None


class PatchPair(BaseSchema):
    origin: ShapeType
    pair: VolumePair


# ----------------------------------------------------------------------------
# DEFORMATIONS
# ----------------------------------------------------------------------------
class DisplacementField(ArraySchema):
    """Per-voxel displacement u of shape (3, H, W, D) in voxel units; the
    deformation is phi(p) = p + u(p)."""

    u: np.ndarray

    @field_validator("u")
    def check_u(cls, v: np.ndarray) -> np.ndarray:
        if v.ndim != 4 or v.shape[0] != 3:
            raise ValueError(f"Field must be (3, H, W, D), got {v.shape}.")
        if not np.isfinite(v).all():
            raise ValueError("Field contains NaN or Inf values.")
        return v.astype(np.float32, copy=False)

    @property
    def shape(self) -> ShapeType:
        return tuple(self.u.shape[1:])  # type: ignore

    def to_tensor(self) -> torch.Tensor:
        """Returns a (1, 3, H, W, D) float32 tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.u))[None]

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor) -> "DisplacementField":
        u = tensor.detach().cpu().reshape((3, *tensor.shape[-3:])).numpy()
        return cls(u=u.astype(np.float32))

    @classmethod
    def zeros(cls, shape: ShapeType) -> "DisplacementField":
        return cls(u=np.zeros((3, *shape), dtype=np.float32))
