import logging as log
from typing import Optional

from tunetreg.custom_typing import ShapeType
from tunetreg.data.patches import extract_patch_grid, stitch_patch_fields
from tunetreg.network.tunet import TUNet, predict_field
from tunetreg.schemas.volumes import DisplacementField, VolumePair


def infer_field(
    model: TUNet,
    pair: VolumePair,
    patch_shape: Optional[ShapeType] = None,
) -> DisplacementField:
    """Whole-volume field for `pair`.

    With no `patch_shape` (or one covering the volume) the model runs once
    on the full volume. Otherwise patches overlapping by half a patch are
    predicted independently and cross-faded.
    """
    if patch_shape is None or tuple(patch_shape) == pair.shape:
        return predict_field(model, pair.moving, pair.fixed)
    stride = tuple(max(p // 2, 1) for p in patch_shape)
    patches = extract_patch_grid(pair, patch_shape, stride)  # type: ignore
    log.debug(
        f"Patch inference | {len(patches)} patches of {patch_shape} | "
        f"volume {pair.shape}"
    )
    fields = [
        predict_field(model, patch.pair.moving, patch.pair.fixed)
        for patch in patches
    ]
    return stitch_patch_fields(
        fields, [patch.origin for patch in patches], pair.shape
    )
