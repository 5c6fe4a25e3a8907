from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import affine_transform
from scipy.spatial.transform import Rotation

from tunetreg.schemas.config import ShapeLimits
from tunetreg.schemas.volumes import SegmentationMap, Volume, VolumePair


def _rotate(array: np.ndarray, matrix: np.ndarray, order: int) -> np.ndarray:
    # affine_transform maps output coordinates onto input coordinates
    center = (np.array(array.shape, dtype=np.float64) - 1) / 2
    offset = center - matrix @ center
    return affine_transform(
        array, matrix, offset=offset, order=order, mode="nearest"
    )


def _rotate_volume(volume: Volume, matrix: np.ndarray) -> Volume:
    data = _rotate(volume.data, matrix, order=1)
    return Volume(data=data.astype(volume.data.dtype), spacing=volume.spacing)


def _rotate_segmentation(
    segmentation: Optional[SegmentationMap], matrix: np.ndarray
) -> Optional[SegmentationMap]:
    if segmentation is None:
        return None
    labels = _rotate(segmentation.labels, matrix, order=0)
    return SegmentationMap(labels=labels, spacing=segmentation.spacing)


def rotate_pair(pair: VolumePair, angles_deg: Sequence[float]) -> VolumePair:
    """Rotate both members of the pair about the volume center.

    Args:
        pair (VolumePair): pair to rotate jointly.
        angles_deg (Sequence[float]): rotation about axes 0, 1 and 2.

    Returns:
        VolumePair: rotated pair; trilinear for images, nearest for labels.
    """
    if not any(angles_deg):
        return pair.model_copy(deep=True)
    matrix = Rotation.from_euler("xyz", angles_deg, degrees=True).as_matrix()
    # Snap float noise so axis-aligned rotations stay exact permutations
    matrix = np.round(matrix, decimals=12)
    return VolumePair(
        moving=_rotate_volume(pair.moving, matrix),
        fixed=_rotate_volume(pair.fixed, matrix),
        moving_seg=_rotate_segmentation(pair.moving_seg, matrix),
        fixed_seg=_rotate_segmentation(pair.fixed_seg, matrix),
    )


def random_rotation(
    pair: VolumePair, max_angle_deg: float, seed: int
) -> VolumePair:
    """Apply one random rigid rotation, angles uniform in
    [-max_angle_deg, max_angle_deg] per axis, jointly to the pair."""
    if not 0 <= max_angle_deg <= ShapeLimits.MAX_ROTATION_DEG:
        raise ValueError(
            f"max_angle_deg must be in [0, 30], got {max_angle_deg}."
        )
    rng = np.random.default_rng(seed)
    angles = rng.uniform(-max_angle_deg, max_angle_deg, size=3)
    return rotate_pair(pair, angles.tolist())
