import itertools
from typing import List, Optional, Sequence

import numpy as np

from tunetreg.custom_typing import ShapeType
from tunetreg.errors import IndivisibleShape, PatchTooLarge, ShapeMismatch
from tunetreg.schemas.config import ShapeLimits
from tunetreg.schemas.volumes import (
    DisplacementField,
    PatchPair,
    SegmentationMap,
    Volume,
    VolumePair,
)


def patch_origins(
    shape: ShapeType, patch_shape: ShapeType, stride: ShapeType
) -> List[ShapeType]:
    """Row-major patch origins tiling `shape`; the last origin on each axis
    is clamped so the patch ends on the volume boundary."""
    axes = []
    for n, p, s in zip(shape, patch_shape, stride):
        origins = list(range(0, n - p + 1, s))
        if origins[-1] + p < n:
            origins.append(n - p)
        axes.append(origins)
    return [tuple(o) for o in itertools.product(*axes)]  # type: ignore


def _crop(
    array: np.ndarray, origin: Sequence[int], size: Sequence[int]
) -> np.ndarray:
    index = tuple(slice(o, o + s) for o, s in zip(origin, size))
    return array[(slice(None),) * (array.ndim - 3) + index]


def crop_pair(
    pair: VolumePair, origin: ShapeType, patch_shape: ShapeType
) -> VolumePair:
    def crop_volume(volume: Volume) -> Volume:
        return Volume(
            data=_crop(volume.data, origin, patch_shape).copy(),
            spacing=volume.spacing,
        )

    def crop_seg(
        segmentation: Optional[SegmentationMap],
    ) -> Optional[SegmentationMap]:
        if segmentation is None:
            return None
        return SegmentationMap(
            labels=_crop(segmentation.labels, origin, patch_shape).copy(),
            spacing=segmentation.spacing,
        )

    return VolumePair(
        moving=crop_volume(pair.moving),
        fixed=crop_volume(pair.fixed),
        moving_seg=crop_seg(pair.moving_seg),
        fixed_seg=crop_seg(pair.fixed_seg),
    )


def extract_patch_grid(
    pair: VolumePair, patch_shape: ShapeType, stride: ShapeType
) -> List[PatchPair]:
    """Tile the pair into patches of `patch_shape`.

    Args:
        pair (VolumePair): pair to tile.
        patch_shape (ShapeType): dims divisible by ShapeLimits.DIVISOR, at
            most the volume.
        stride (ShapeType): step between consecutive origins per axis.

    Returns:
        List[PatchPair]: row-major patches covering every voxel.
    """
    divisor = ShapeLimits.DIVISOR
    if any(p % divisor != 0 or p < divisor for p in patch_shape):
        raise IndivisibleShape(
            f"Patch dims must be divisible by {divisor}, got {patch_shape}."
        )
    if any(p > n for p, n in zip(patch_shape, pair.shape)):
        raise PatchTooLarge(
            f"Patch {patch_shape} exceeds volume {pair.shape}."
        )
    if any(s < 1 for s in stride):
        raise ValueError(f"Stride must be positive, got {stride}.")
    return [
        PatchPair(origin=origin, pair=crop_pair(pair, origin, patch_shape))
        for origin in patch_origins(pair.shape, patch_shape, stride)
    ]


def _crossfade_weights(patch_shape: ShapeType) -> np.ndarray:
    # Linear ramp, highest at the patch center and positive everywhere
    ramps = [
        np.minimum(np.arange(p) + 1, p - np.arange(p)).astype(np.float64)
        for p in patch_shape
    ]
    return np.einsum("i,j,k->ijk", *ramps)


def stitch_patch_fields(
    fields: Sequence[DisplacementField],
    origins: Sequence[ShapeType],
    shape: ShapeType,
) -> DisplacementField:
    """Merge per-patch fields into a whole-volume field, cross-fading
    linearly where patches overlap."""
    if len(fields) != len(origins) or not fields:
        raise ShapeMismatch("Need one origin per patch field.")
    accumulated = np.zeros((3, *shape), dtype=np.float64)
    total_weight = np.zeros(shape, dtype=np.float64)
    for field, origin in zip(fields, origins):
        weights = _crossfade_weights(field.shape)
        index = tuple(
            slice(o, o + p) for o, p in zip(origin, field.shape)
        )
        accumulated[(slice(None),) + index] += weights * field.u
        total_weight[index] += weights
    if (total_weight == 0).any():
        raise ShapeMismatch("Patch fields do not cover the whole volume.")
    return DisplacementField(
        u=(accumulated / total_weight).astype(np.float32)
    )
