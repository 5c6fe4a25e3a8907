import logging as log
import os
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError
from nibabel.spatialimages import HeaderDataError

from tunetreg.errors import (
    EmptyDataset,
    IOFailure,
    MalformedHeader,
    MissingFile,
    ShapeMismatch,
    UnsupportedDims,
)
from tunetreg.global_variables import (
    DATA_ROOT_ENV,
    FIELD_FILENAME,
    FIXED_FILENAME,
    FIXED_SEG_FILENAME,
    MOVING_FILENAME,
    MOVING_SEG_FILENAME,
)
from tunetreg.schemas.volumes import (
    DisplacementField,
    SegmentationMap,
    Volume,
    VolumePair,
)

NiftiContent = Union[Volume, SegmentationMap, DisplacementField]


def _read_image(path: Path) -> Tuple[np.ndarray, Tuple[float, ...]]:
    if not path.is_file():
        raise MissingFile(f"No such NIfTI file: {path}")
    try:
        img = nib.load(str(path))
        # dataobj keeps the on-disk dtype, get_fdata would upcast
        data = np.array(img.dataobj)
        zooms = tuple(float(z) for z in img.header.get_zooms())
    except (ImageFileError, HeaderDataError, EOFError, OSError) as e:
        raise MalformedHeader(f"Cannot read NIfTI file {path}: {e}") from e
    except ValueError as e:
        raise MalformedHeader(f"Malformed header in {path}: {e}") from e
    return data, zooms


def load_nifti(
    path: Path,
) -> Tuple[Optional[Volume], Optional[SegmentationMap]]:
    """Load a single 3D NIfTI image (.nii / .nii.gz).

    Integer-typed files are label maps and come back as a SegmentationMap,
    everything else as an intensity Volume.

    Args:
        path (Path): file to read.

    Returns:
        Tuple[Optional[Volume], Optional[SegmentationMap]]: exactly one of
        the two is set.
    """
    path = Path(path)
    data, zooms = _read_image(path)
    if data.ndim != 3:
        raise UnsupportedDims(
            f"{path} has {data.ndim} dims, expected a 3D image."
        )
    spacing = (zooms[0], zooms[1], zooms[2])
    log.debug(f"Loaded {path} | shape {data.shape} | dtype {data.dtype}")

    if np.issubdtype(data.dtype, np.integer):
        return None, SegmentationMap(labels=data, spacing=spacing)
    return Volume(data=data, spacing=spacing), None


def load_volume(path: Path) -> Volume:
    volume, segmentation = load_nifti(path)
    if volume is None and segmentation is not None:
        volume = Volume(
            data=segmentation.labels.astype(np.float32),
            spacing=segmentation.spacing,
        )
    assert volume is not None
    return volume


def load_segmentation(path: Path) -> SegmentationMap:
    _, segmentation = load_nifti(path)
    if segmentation is None:
        raise MalformedHeader(f"{path} is not an integer label map.")
    return segmentation


def load_field(path: Path) -> DisplacementField:
    """Load a displacement field stored as (H, W, D, 3) voxel units."""
    path = Path(path)
    data, _ = _read_image(path)
    if data.ndim != 4 or data.shape[-1] != 3:
        raise UnsupportedDims(
            f"{path} has shape {data.shape}, expected (H, W, D, 3)."
        )
    return DisplacementField(u=np.moveaxis(data, -1, 0))


def save_nifti(content: NiftiContent, path: Path) -> None:
    """Save a volume, label map or displacement field as NIfTI-1.

    Data is written with its in-memory dtype and spacing as the header
    zooms, so loading it back is bit-identical. Fields are stored as 4D
    images with a trailing component axis of size 3.
    """
    path = Path(path)
    if isinstance(content, DisplacementField):
        data = np.ascontiguousarray(np.moveaxis(content.u, 0, -1))
        spacing: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    elif isinstance(content, SegmentationMap):
        # NIfTI-1 has no portable int64 label type
        data = content.labels
        if data.dtype == np.int64:
            data = data.astype(np.int32)
        spacing = content.spacing
    else:
        data = content.data
        spacing = content.spacing

    affine = np.diag([*spacing[:3], 1.0])
    img = nib.Nifti1Image(data, affine)
    img.header.set_zooms(spacing)
    try:
        nib.save(img, str(path))
    except OSError as e:
        raise IOFailure(f"Failed to write {path}: {e}") from e
    log.debug(f"Saved {path} | shape {data.shape}")


# ----------------------------------------------------------------------------
# PAIR DIRECTORIES
# ----------------------------------------------------------------------------
def resolve_data_path(path: Path) -> Path:
    """Relative paths are taken under $TUNETREG_DATA_ROOT when it is set."""
    path = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def save_pair(
    pair: VolumePair,
    directory: Path,
    field: Optional[DisplacementField] = None,
) -> None:
    """Write one pair directory: moving, fixed, optional label maps and
    optional ground-truth field."""
    directory = Path(directory)
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as e:
        raise IOFailure(f"Cannot create {directory}: {e}") from e
    save_nifti(pair.moving, directory / MOVING_FILENAME)
    save_nifti(pair.fixed, directory / FIXED_FILENAME)
    if pair.moving_seg is not None:
        save_nifti(pair.moving_seg, directory / MOVING_SEG_FILENAME)
    if pair.fixed_seg is not None:
        save_nifti(pair.fixed_seg, directory / FIXED_SEG_FILENAME)
    if field is not None:
        save_nifti(field, directory / FIELD_FILENAME)


def load_pair(directory: Path) -> VolumePair:
    directory = Path(directory)
    moving = load_volume(directory / MOVING_FILENAME)
    fixed = load_volume(directory / FIXED_FILENAME)
    if moving.shape != fixed.shape:
        raise ShapeMismatch(
            f"{directory}: moving {moving.shape} and fixed {fixed.shape} "
            f"differ."
        )
    segmentations = []
    for filename in (MOVING_SEG_FILENAME, FIXED_SEG_FILENAME):
        path = directory / filename
        segmentation = load_segmentation(path) if path.is_file() else None
        if segmentation is not None and segmentation.shape != fixed.shape:
            raise ShapeMismatch(
                f"{path} has shape {segmentation.shape}, expected "
                f"{fixed.shape}."
            )
        segmentations.append(segmentation)
    return VolumePair(
        moving=moving,
        fixed=fixed,
        moving_seg=segmentations[0],
        fixed_seg=segmentations[1],
    )


def load_dataset(root: Path) -> Dict[str, VolumePair]:
    """Every sub-directory of `root` holding a moving and a fixed image,
    keyed by directory name in sorted order."""
    root = resolve_data_path(root)
    if not root.is_dir():
        raise MissingFile(f"No such dataset directory: {root}")
    pairs = {
        child.name: load_pair(child)
        for child in sorted(root.iterdir())
        if (child / MOVING_FILENAME).is_file()
        and (child / FIXED_FILENAME).is_file()
    }
    if not pairs:
        raise EmptyDataset(f"No pair directories under {root}.")
    log.info(f"Loaded {len(pairs)} pairs from {root}")
    return pairs
