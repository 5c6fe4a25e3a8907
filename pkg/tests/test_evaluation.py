import itertools
from pathlib import Path
from typing import Callable, Tuple

import numpy as np
import pandas as pd
import plotly.graph_objects as go  # type: ignore
import pytest
from pytest_mock import MockerFixture

from tunetreg.errors import MissingSegmentation, ShapeMismatch
from tunetreg.evaluation.metrics import (
    EMPTY_LABEL_DICE,
    dice_per_label,
    empty_labels,
    foreground_labels,
    mean_dice,
)
from tunetreg.evaluation.report import (
    DIGEST_LENGTH,
    emit_dataset_report,
    emit_report,
    emit_slice_panel,
    evaluate_field,
    evaluate_registration,
    slice_figure,
)
from tunetreg.global_variables import (
    PAIR_KEY,
    REPORT_COLUMNS,
    REPORT_CSV_FILENAME,
    REPORT_FIGURE_FILENAME,
    REPORT_FOOTER_FILENAME,
    SLICES_FILENAME,
)
from tunetreg.schemas.state import Checkpoint, RegistrationReport
from tunetreg.schemas.volumes import (
    DisplacementField,
    SegmentationMap,
    Volume,
    VolumePair,
)


def _seg(labels: np.ndarray) -> SegmentationMap:
    return SegmentationMap(labels=np.asarray(labels, dtype=np.int32))


@pytest.fixture()
def mock_write_image(mocker: MockerFixture):  # type: ignore
    return mocker.patch.object(go.Figure, "write_image")


# ----------------------------------------------------------------------------
# DICE
# ----------------------------------------------------------------------------
def test_dice_cases() -> None:
    r = _seg(np.array([1, 1, 2, 0]).reshape(1, 2, 2))
    f = _seg(np.array([1, 0, 3, 0]).reshape(1, 2, 2))
    scores = dice_per_label(r, f, [1, 2, 3, 4])
    assert scores == {1: 2 / 3, 2: 0.0, 3: 0.0, 4: EMPTY_LABEL_DICE}
    assert empty_labels(r, f, [1, 2, 3, 4]) == [4]
    assert dice_per_label(r, r, [1, 2]) == {1: 1.0, 2: 1.0}
    assert mean_dice(scores) == pytest.approx((2 / 3 + 1) / 4)
    assert np.isnan(mean_dice({}))


def test_dice_matches_voxel_counting_on_all_binary_2x2x2_maps() -> None:
    masks = [
        np.array(bits, dtype=np.int32).reshape(2, 2, 2)
        for bits in itertools.product((0, 1), repeat=8)
    ]
    for a, b in itertools.product(masks, repeat=2):
        size_a, size_b = int(a.sum()), int(b.sum())
        if size_a + size_b:
            expected = 2 * int((a * b).sum()) / (size_a + size_b)
        else:
            expected = EMPTY_LABEL_DICE
        assert dice_per_label(_seg(a), _seg(b), [1])[1] == expected


def test_foreground_labels() -> None:
    seg = _seg(np.array([0, 4, 2, 2]).reshape(1, 2, 2))
    assert foreground_labels(seg) == [2, 4]
    assert foreground_labels(seg, [5, 1, 5]) == [1, 5]


def test_dice_rejects_mismatched_maps() -> None:
    with pytest.raises(ShapeMismatch):
        dice_per_label(
            _seg(np.zeros((2, 2, 2))), _seg(np.zeros((2, 2, 1))), [1]
        )


# ----------------------------------------------------------------------------
# EVALUATION
# ----------------------------------------------------------------------------
def test_ground_truth_field_gives_perfect_dice(
    make_registration_pair: Callable[
        ..., Tuple[VolumePair, DisplacementField]
    ]
) -> None:
    pair, gt = make_registration_pair()
    report = evaluate_field(gt, pair)
    assert report.per_label_dice
    assert all(d == 1.0 for d in report.per_label_dice.values())
    assert report.mean_dice == 1.0
    assert report.baseline_mean_dice < 1.0
    assert report.loss_components is None


def test_zero_field_dice_is_the_baseline(
    make_pair: Callable[..., VolumePair]
) -> None:
    pair = make_pair()
    report = evaluate_field(DisplacementField.zeros(pair.shape), pair)
    assert report.per_label_dice == report.baseline_dice
    assert sorted(report.per_label_dice) == [1, 2, 3]


def test_evaluation_needs_segmentations(
    make_pair: Callable[..., VolumePair],
    make_checkpoint: Callable[..., Checkpoint],
) -> None:
    pair = make_pair()
    bare = VolumePair(moving=pair.moving, fixed=pair.fixed)
    field = DisplacementField.zeros(pair.shape)
    with pytest.raises(MissingSegmentation):
        evaluate_field(field, bare)
    with pytest.raises(MissingSegmentation):
        evaluate_registration(make_checkpoint(), bare)
    background_only = pair.model_copy(
        update={"fixed_seg": _seg(np.zeros(pair.shape))}
    )
    with pytest.raises(MissingSegmentation):
        evaluate_field(field, background_only)


def test_evaluate_registration_with_a_fresh_checkpoint(
    make_pair: Callable[..., VolumePair],
    make_checkpoint: Callable[..., Checkpoint],
) -> None:
    pair = make_pair()
    checkpoint = make_checkpoint()
    report = evaluate_registration(checkpoint, pair, labels=[1, 3])
    assert sorted(report.per_label_dice) == [1, 3]
    assert report.mean_dice == pytest.approx(report.baseline_mean_dice)
    assert len(report.config_hash) == DIGEST_LENGTH
    assert len(report.checkpoint_id) == DIGEST_LENGTH
    assert report.runtime_s >= 0
    assert report.loss_components is not None
    assert report.loss_components.smooth == 0.0

    again = evaluate_registration(checkpoint, pair, labels=[1, 3])
    assert again.config_hash == report.config_hash
    assert again.checkpoint_id == report.checkpoint_id


# ----------------------------------------------------------------------------
# REPORT FILES
# ----------------------------------------------------------------------------
def _report() -> RegistrationReport:
    return RegistrationReport(
        per_label_dice={2: 0.5, 1: 0.75},
        mean_dice=0.625,
        baseline_dice={1: 0.25, 2: 0.5},
        baseline_mean_dice=0.375,
        empty_labels=[],
        config_hash="abc",
        checkpoint_id="def",
    )


def test_emit_report_writes_csv_figure_and_footer(
    tmp_path: Path, mock_write_image
) -> None:
    paths = emit_report(_report(), tmp_path / "report")
    df = pd.read_csv(paths["csv"])
    assert list(df.columns) == REPORT_COLUMNS
    assert df.values.tolist() == [[1, 0.75, 0.25], [2, 0.5, 0.5]]
    assert paths["figure"] == tmp_path / "report" / REPORT_FIGURE_FILENAME
    mock_write_image.assert_called_once_with(
        str(paths["figure"]), format="png"
    )

    footer = paths["footer"].read_text()
    assert "mean Dice: 0.625000" in footer
    assert "baseline mean Dice: 0.375000" in footer
    assert "config hash: abc" in footer
    assert "non-reproduced reference values" in footer
    assert "TUNet" in footer and "0.798" in footer


def test_emit_report_is_deterministic(
    tmp_path: Path, mock_write_image
) -> None:
    first = emit_report(_report(), tmp_path / "a")
    second = emit_report(_report(), tmp_path / "b")
    for key in ("csv", "footer"):
        assert first[key].read_bytes() == second[key].read_bytes()


def test_emit_report_without_labels_writes_nothing(
    tmp_path: Path, mock_write_image
) -> None:
    report = RegistrationReport(
        per_label_dice={},
        mean_dice=float("nan"),
        baseline_dice={},
        baseline_mean_dice=float("nan"),
    )
    with pytest.raises(MissingSegmentation):
        emit_report(report, tmp_path / "report")
    assert not (tmp_path / "report").exists()
    mock_write_image.assert_not_called()


def test_emit_dataset_report(tmp_path: Path, mock_write_image) -> None:
    other = _report().model_copy(
        update={
            "per_label_dice": {1: 1.0, 2: 1.0},
            "mean_dice": 1.0,
            "empty_labels": [2],
        }
    )
    paths = emit_dataset_report(
        {"pair_001": other, "pair_000": _report()}, tmp_path
    )
    df = pd.read_csv(paths["csv"])
    assert list(df.columns) == [PAIR_KEY, *REPORT_COLUMNS]
    assert df[PAIR_KEY].tolist() == ["pair_000"] * 2 + ["pair_001"] * 2
    footer = (tmp_path / REPORT_FOOTER_FILENAME).read_text()
    assert "mean Dice: 0.812500" in footer
    assert "(scored 1.0): 2" in footer
    assert (tmp_path / REPORT_CSV_FILENAME).is_file()
    mock_write_image.assert_called_once()


# ----------------------------------------------------------------------------
# SLICE PANEL
# ----------------------------------------------------------------------------
def test_slice_figure_shows_the_middle_slices(
    make_volume: Callable[..., Volume]
) -> None:
    volumes = [make_volume((6, 5, 4), seed) for seed in range(3)]
    fig = slice_figure(*volumes)
    assert len(fig.data) == 3
    for trace, volume in zip(fig.data, volumes):
        np.testing.assert_array_equal(trace.z, volume.data[3])
    low = min(v.intensity_range[0] for v in volumes)
    assert {trace.zmin for trace in fig.data} == {low}
    titles = [a.text for a in fig.layout.annotations]
    assert titles == ["moving", "fixed", "registered"]

    with pytest.raises(ValueError):
        slice_figure(volumes[0], volumes[1], make_volume((6, 5, 8)))


def test_emit_slice_panel(
    make_volume: Callable[..., Volume], tmp_path: Path, mock_write_image
) -> None:
    volume = make_volume((4, 4, 4))
    path = emit_slice_panel(volume, volume, volume, tmp_path / "out")
    assert path == tmp_path / "out" / SLICES_FILENAME
    mock_write_image.assert_called_once_with(str(path), format="png")
