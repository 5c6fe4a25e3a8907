from typing import List, Optional, Tuple, TypeVar

import numpy as np

from tunetreg.custom_typing import ShapeType
from tunetreg.schemas.config import PreprocessConfig
from tunetreg.schemas.volumes import SegmentationMap, Volume, VolumePair

GridT = TypeVar("GridT", Volume, SegmentationMap)


def _center_crop_or_pad(array: np.ndarray, target: ShapeType) -> np.ndarray:
    slices: List[slice] = []
    padding: List[Tuple[int, int]] = []
    for n, t in zip(array.shape, target):
        if n >= t:
            start = (n - t) // 2
            slices.append(slice(start, start + t))
            padding.append((0, 0))
        else:
            before = (t - n) // 2
            slices.append(slice(0, n))
            padding.append((before, t - n - before))
    return np.pad(array[tuple(slices)], padding, mode="constant")


def crop_or_pad(grid: GridT, target_shape: ShapeType) -> GridT:
    """Center-crop axes larger than the target and symmetrically zero-pad
    smaller ones.

    Args:
        grid (Volume | SegmentationMap): grid to resize.
        target_shape (ShapeType): output shape, every dim >= 1.

    Returns:
        Volume | SegmentationMap: same type as the input, target_shape.
    """
    if any(t < 1 for t in target_shape):
        raise ValueError(f"Target dims must be >= 1, got {target_shape}.")
    if isinstance(grid, SegmentationMap):
        return SegmentationMap(
            labels=_center_crop_or_pad(grid.labels, target_shape),
            spacing=grid.spacing,
        )
    return Volume(
        data=_center_crop_or_pad(grid.data, target_shape),
        spacing=grid.spacing,
    )


def minmax_normalize(volume: Volume) -> Volume:
    """Map intensities linearly onto [0, 1]; a constant volume maps to
    zeros."""
    low, high = volume.intensity_range
    if high == low:
        data = np.zeros_like(volume.data)
    else:
        data = (volume.data - low) / (high - low)
    return Volume(data=data.astype(volume.data.dtype), spacing=volume.spacing)


def padded_shape(shape: ShapeType, multiple: int) -> ShapeType:
    """Round every dim up to the next multiple."""
    return tuple(-(-s // multiple) * multiple for s in shape)  # type: ignore


def preprocess_target(
    shape: ShapeType, config: PreprocessConfig, multiple: int
) -> ShapeType:
    if config.target_shape is not None:
        return config.target_shape
    return padded_shape(shape, multiple)


def _resize(
    grid: Optional[SegmentationMap], target: ShapeType
) -> Optional[SegmentationMap]:
    return None if grid is None else crop_or_pad(grid, target)


def preprocess_pair(
    pair: VolumePair, config: PreprocessConfig, multiple: int
) -> VolumePair:
    """Bring a pair to the network's input shape and, when enabled, map
    both images onto [0, 1]. Segmentations are cropped or padded with
    background but keep their labels.

    Args:
        pair (VolumePair): pair as loaded from disk.
        config (PreprocessConfig): target shape and normalisation flag.
        multiple (int): shape multiple of the network, used when no
            target shape is configured.

    Returns:
        VolumePair: preprocessed pair.
    """
    target = preprocess_target(pair.shape, config, multiple)
    moving = crop_or_pad(pair.moving, target)
    fixed = crop_or_pad(pair.fixed, target)
    if config.normalize:
        moving, fixed = minmax_normalize(moving), minmax_normalize(fixed)
    return VolumePair(
        moving=moving,
        fixed=fixed,
        moving_seg=_resize(pair.moving_seg, target),
        fixed_seg=_resize(pair.fixed_seg, target),
    )
