import itertools
from typing import Optional, Sequence

import torch

from tunetreg.errors import ShapeMismatch
from tunetreg.schemas.volumes import (
    DisplacementField,
    SegmentationMap,
    Volume,
)


def identity_grid(
    shape: Sequence[int],
    dtype: torch.dtype = torch.float32,
    device: Optional[torch.device] = None,
) -> torch.Tensor:
    """Sampling grid of phi = identity, shape (3, H, W, D).

    Args:
        shape (Sequence[int]): spatial shape (H, W, D).

    Returns:
        torch.Tensor: positions[:, i, j, k] == (i, j, k).
    """
    vectors = [torch.arange(s, dtype=dtype, device=device) for s in shape]
    return torch.stack(torch.meshgrid(vectors, indexing="ij"), dim=0)


def _check_shapes(image: torch.Tensor, field: torch.Tensor) -> None:
    if image.dim() != 5 or field.dim() != 5 or field.shape[1] != 3:
        raise ShapeMismatch(
            f"Expected (B, C, H, W, D) image and (B, 3, H, W, D) field, "
            f"got {tuple(image.shape)} and {tuple(field.shape)}."
        )
    if image.shape[0] != field.shape[0] or image.shape[2:] != field.shape[2:]:
        raise ShapeMismatch(
            f"Image {tuple(image.shape)} and field {tuple(field.shape)} "
            f"do not conform."
        )


def _clamped_positions(field: torch.Tensor) -> torch.Tensor:
    """Absolute sample positions phi(p) = p + u(p), clamped to the
    lattice."""
    shape = field.shape[2:]
    grid = identity_grid(shape, dtype=field.dtype, device=field.device)
    positions = grid[None] + field
    return torch.stack(
        [positions[:, d].clamp(0, n - 1) for d, n in enumerate(shape)],
        dim=1,
    )


def _gather(
    flat: torch.Tensor, index: Sequence[torch.Tensor], shape: Sequence[int]
) -> torch.Tensor:
    B, C = flat.shape[:2]
    linear = (index[0] * shape[1] + index[1]) * shape[2] + index[2]
    linear = linear.reshape(B, 1, -1).expand(B, C, -1)
    return torch.gather(flat, 2, linear).reshape(B, C, *shape)


def warp_trilinear(image: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Resample `image` at phi(p) by blending the 8 lattice neighbours of
    each sample position with weights prod_d (1 - |phi_d(p) - q_d|).

    Positions outside the lattice are clamped to the boundary. The result
    is differentiable with respect to both the image and the field.

    Args:
        image (torch.Tensor): (B, C, H, W, D) intensities.
        field (torch.Tensor): (B, 3, H, W, D) displacement in voxels.

    Returns:
        torch.Tensor: (B, C, H, W, D) warped image.
    """
    _check_shapes(image, field)
    B, C = image.shape[:2]
    shape = list(image.shape[2:])

    positions = _clamped_positions(field.to(image.dtype))
    lower_f = positions.detach().floor()
    frac = positions - lower_f
    lower = lower_f.long()
    max_index = torch.tensor(
        [n - 1 for n in shape], device=image.device
    ).reshape(1, 3, 1, 1, 1)
    upper = torch.minimum(lower + 1, max_index)

    flat = image.reshape(B, C, -1)
    output = torch.zeros_like(image)
    for corner in itertools.product((0, 1), repeat=3):
        index = [
            upper[:, d] if c else lower[:, d] for d, c in enumerate(corner)
        ]
        weight = torch.ones_like(frac[:, 0])
        for d, c in enumerate(corner):
            weight = weight * (frac[:, d] if c else 1 - frac[:, d])
        output = output + weight[:, None] * _gather(flat, index, shape)
    return output


def warp_nearest(labels: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Label at p is labels(round(phi(p))), ties rounded half away from
    zero, positions clamped to the lattice."""
    _check_shapes(labels, field)
    shape = list(labels.shape[2:])
    positions = _clamped_positions(field.detach().to(torch.float64))
    # Clamped positions are non-negative: floor(x + 0.5) rounds half up
    nearest = torch.floor(positions + 0.5).long()
    index = [nearest[:, d] for d in range(3)]
    flat = labels.reshape(*labels.shape[:2], -1)
    return _gather(flat, index, shape)


# ----------------------------------------------------------------------------
# VOLUME LEVEL
# ----------------------------------------------------------------------------
def warp_volume(volume: Volume, field: DisplacementField) -> Volume:
    if volume.shape != field.shape:
        raise ShapeMismatch(
            f"Volume {volume.shape} and field {field.shape} differ."
        )
    with torch.no_grad():
        warped = warp_trilinear(volume.to_tensor(), field.to_tensor())
    return Volume.from_tensor(warped, spacing=volume.spacing)


def warp_segmentation(
    segmentation: SegmentationMap, field: DisplacementField
) -> SegmentationMap:
    if segmentation.shape != field.shape:
        raise ShapeMismatch(
            f"Label map {segmentation.shape} and field {field.shape} differ."
        )
    warped = warp_nearest(segmentation.to_tensor(), field.to_tensor())
    return SegmentationMap(
        labels=warped.reshape(segmentation.shape)
        .numpy()
        .astype(segmentation.labels.dtype),
        spacing=segmentation.spacing,
    )
