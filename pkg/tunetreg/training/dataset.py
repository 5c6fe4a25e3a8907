import logging as log
from typing import Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import Dataset

from tunetreg.custom_typing import ShapeType
from tunetreg.data.augmentation import random_rotation
from tunetreg.data.patches import crop_pair, patch_origins
from tunetreg.errors import EmptyDataset, ShapeMismatch
from tunetreg.schemas.config import TrainConfig
from tunetreg.schemas.volumes import VolumePair


def check_pairs(pairs: Sequence[VolumePair]) -> ShapeType:
    """Shared shape of `pairs`."""
    if not pairs:
        raise EmptyDataset("Need at least one volume pair.")
    shapes = {pair.shape for pair in pairs}
    if len(shapes) != 1:
        raise ShapeMismatch(f"Pairs do not share a shape: {sorted(shapes)}.")
    return shapes.pop()


def effective_patch_shape(
    patch_shape: ShapeType, volume_shape: ShapeType
) -> ShapeType:
    clipped = tuple(min(p, n) for p, n in zip(patch_shape, volume_shape))
    if clipped != tuple(patch_shape):
        log.info(f"Patch {patch_shape} clipped to volume {volume_shape}")
    return clipped  # type: ignore


class RegistrationPatchDataset(Dataset):  # type: ignore
    """Step-indexed training samples.

    Sample `i` draws a pair, a rigid rotation and a tiled patch from a
    generator seeded with (seed, offset + i), so the sequence does not
    depend on how many loader workers produce it.
    """

    def __init__(
        self,
        pairs: Sequence[VolumePair],
        config: TrainConfig,
        num_samples: int,
        offset: int = 0,
    ) -> None:
        shape = check_pairs(pairs)
        self.pairs = list(pairs)
        self.config = config
        self.num_samples = num_samples
        self.offset = offset
        self.patch_shape = effective_patch_shape(config.patch_shape, shape)
        stride = config.patch_stride or self.patch_shape
        self.origins = patch_origins(shape, self.patch_shape, stride)

    def __len__(self) -> int:
        return self.num_samples

    def sample(self, index: int) -> VolumePair:
        rng = np.random.default_rng([self.config.seed, self.offset + index])
        pair = self.pairs[int(rng.integers(len(self.pairs)))]
        rotation_seed = int(rng.integers(2**31))
        origin = self.origins[int(rng.integers(len(self.origins)))]
        rotated = random_rotation(
            pair, self.config.max_rotation_deg, seed=rotation_seed
        )
        return crop_pair(rotated, origin, self.patch_shape)

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        patch = self.sample(index)
        return patch.moving.to_tensor()[0], patch.fixed.to_tensor()[0]
