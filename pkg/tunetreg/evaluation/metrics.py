from typing import Dict, Iterable, List, Optional

import numpy as np

from tunetreg.custom_typing import DiceMapType
from tunetreg.errors import ShapeMismatch
from tunetreg.schemas.volumes import SegmentationMap

# Dice of a label absent from both maps
EMPTY_LABEL_DICE = 1.0


def _check_shapes(r: SegmentationMap, f: SegmentationMap) -> None:
    if r.shape != f.shape:
        raise ShapeMismatch(
            f"Label maps {r.shape} and {f.shape} do not conform."
        )


def dice_per_label(
    r: SegmentationMap, f: SegmentationMap, labels: Iterable[int]
) -> DiceMapType:
    """Binary Dice 2 |R n F| / (|R| + |F|) for every label.

    A label absent from both maps scores 1.0 (see `empty_labels`); a
    label present in exactly one map scores 0.0.

    Args:
        r (SegmentationMap): registered (or moving) labels.
        f (SegmentationMap): fixed labels.
        labels (Iterable[int]): labels to score.

    Returns:
        DiceMapType: label -> Dice, sorted by label.
    """
    _check_shapes(r, f)
    scores: DiceMapType = {}
    for label in sorted(set(labels)):
        r_mask = r.labels == label
        f_mask = f.labels == label
        total = int(r_mask.sum()) + int(f_mask.sum())
        if total == 0:
            scores[label] = EMPTY_LABEL_DICE
            continue
        overlap = int(np.logical_and(r_mask, f_mask).sum())
        scores[label] = 2.0 * overlap / total
    return scores


def empty_labels(
    r: SegmentationMap, f: SegmentationMap, labels: Iterable[int]
) -> List[int]:
    """Labels present in neither map."""
    _check_shapes(r, f)
    present = r.label_set | f.label_set
    return sorted(label for label in set(labels) if label not in present)


def foreground_labels(
    segmentation: SegmentationMap, labels: Optional[Iterable[int]] = None
) -> List[int]:
    """`labels` if given, else every non-background label of the map."""
    if labels is not None:
        return sorted(set(labels))
    return sorted(label for label in segmentation.label_set if label != 0)


def mean_dice(scores: DiceMapType) -> float:
    if not scores:
        return float("nan")
    return float(np.mean(list(scores.values())))
