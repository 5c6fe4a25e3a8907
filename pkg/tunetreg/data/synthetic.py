import logging as log
from typing import List, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from tunetreg.data.preprocessing import minmax_normalize
from tunetreg.network.transform import warp_segmentation, warp_volume
from tunetreg.schemas.config import SyntheticSpec
from tunetreg.schemas.volumes import (
    DisplacementField,
    SegmentationMap,
    Volume,
    VolumePair,
)

BLOB_INTENSITY_RANGE = (0.3, 1.0)
TEXTURE_SIGMA = 2.0
TEXTURE_AMPLITUDE = 0.1
EDGE_SIGMA = 1.0


def _make_phantom(
    spec: SyntheticSpec, rng: np.random.Generator
) -> Tuple[Volume, SegmentationMap]:
    """Labeled ellipsoid blobs on a textured background.

    Blob k carries label k. With a nonzero shell fraction, the outer part
    of blob k is relabelled num_blobs + k with its own intensity. Later
    blobs overwrite earlier ones where they overlap.
    """
    shape = np.array(spec.shape)
    grid = np.stack(
        np.meshgrid(*[np.arange(s) for s in spec.shape], indexing="ij")
    ).astype(np.float64)

    labels = np.zeros(spec.shape, dtype=np.int32)
    intensity = np.zeros(spec.shape, dtype=np.float64)
    core_radius_sq = (1.0 - spec.shell_fraction) ** 2
    for label in range(1, spec.num_blobs + 1):
        center = rng.uniform(*spec.blob_center_range, size=3) * (shape - 1)
        radii = rng.uniform(*spec.blob_radius_range, size=3) * shape.min()
        distance = sum(
            ((grid[d] - center[d]) / radii[d]) ** 2 for d in range(3)
        )
        mask = distance <= 1.0
        labels[mask] = label
        intensity[mask] = rng.uniform(*BLOB_INTENSITY_RANGE)
        if spec.shell_fraction > 0:
            shell = mask & (distance > core_radius_sq)
            labels[shell] = spec.num_blobs + label
            intensity[shell] = rng.uniform(*BLOB_INTENSITY_RANGE)

    texture = gaussian_filter(
        rng.standard_normal(spec.shape), sigma=TEXTURE_SIGMA
    )
    texture *= TEXTURE_AMPLITUDE / max(float(np.abs(texture).max()), 1e-12)
    intensity = gaussian_filter(intensity, sigma=EDGE_SIGMA) + texture
    volume = minmax_normalize(Volume(data=intensity.astype(np.float32)))
    return volume, SegmentationMap(labels=labels)


def _make_field(
    spec: SyntheticSpec, rng: np.random.Generator
) -> DisplacementField:
    """Gaussian-smoothed white noise per component, scaled so that the
    largest displacement norm equals max_displacement."""
    u = np.stack(
        [
            gaussian_filter(
                rng.standard_normal(spec.shape),
                sigma=spec.field_smoothness,
                mode="reflect",
            )
            for _ in range(3)
        ]
    )
    max_norm = float(np.sqrt((u**2).sum(axis=0)).max())
    if spec.max_displacement == 0 or max_norm == 0:
        u = np.zeros_like(u)
    else:
        u *= spec.max_displacement / max_norm
    return DisplacementField(u=u.astype(np.float32))


def _warp_pair(
    fixed: Volume, fixed_seg: SegmentationMap, field: DisplacementField
) -> VolumePair:
    return VolumePair(
        moving=warp_volume(fixed, field),
        fixed=fixed,
        moving_seg=warp_segmentation(fixed_seg, field),
        fixed_seg=fixed_seg,
    )


def generate_synthetic_pair(
    spec: SyntheticSpec,
) -> Tuple[VolumePair, DisplacementField]:
    """Generate a phantom pair with a known deformation.

    The fixed image is a labeled blob phantom and the moving image is the
    fixed image warped by the returned ground-truth field (trilinear for
    intensities, nearest for labels). Output is a pure function of spec.

    Args:
        spec (SyntheticSpec): generator parameters.

    Returns:
        Tuple[VolumePair, DisplacementField]: the pair and the field.
    """
    rng = np.random.default_rng(spec.seed)
    fixed, fixed_seg = _make_phantom(spec, rng)
    field = _make_field(spec, rng)
    log.debug(
        f"Synthetic pair | seed {spec.seed} | shape {spec.shape} | "
        f"max |u| {float(np.sqrt((field.u**2).sum(axis=0)).max()):.3f}"
    )
    return _warp_pair(fixed, fixed_seg, field), field


def generate_synthetic_dataset(
    spec: SyntheticSpec, num_pairs: int
) -> List[Tuple[VolumePair, DisplacementField]]:
    """Atlas-style dataset: every pair shares the phantom generated from
    spec.seed as its fixed image, and each moving image is warped by an
    independent field. Pair 0 equals generate_synthetic_pair(spec)."""
    if num_pairs < 1:
        raise ValueError(f"num_pairs must be >= 1, got {num_pairs}.")
    rng = np.random.default_rng(spec.seed)
    fixed, fixed_seg = _make_phantom(spec, rng)
    dataset = []
    for i in range(num_pairs):
        field_rng = rng if i == 0 else np.random.default_rng([spec.seed, i])
        field = _make_field(spec, field_rng)
        dataset.append((_warp_pair(fixed, fixed_seg, field), field))
    return dataset
