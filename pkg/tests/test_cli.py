import json
from pathlib import Path
from typing import Any, Callable, Dict, List

import numpy as np
import pandas as pd
import plotly.graph_objects as go  # type: ignore
import pytest
from pytest_mock import MockerFixture

from tunetreg.cli import main, pair_name
from tunetreg.data.io import (
    load_field,
    load_segmentation,
    load_volume,
    save_nifti,
)
from tunetreg.global_variables import (
    BASELINE_FILENAME,
    CHECKPOINT_FILENAME,
    EXIT_FAILURE,
    EXIT_INVALID_CONFIG,
    EXIT_IO,
    EXIT_OK,
    FIELD_FILENAME,
    FIXED_FILENAME,
    GRADCHECK_FILENAME,
    MANIFEST_FILENAME,
    MOVING_FILENAME,
    PAIR_KEY,
    REPORT_CSV_FILENAME,
    SLICES_FILENAME,
    WARPED_FILENAME,
    WARPED_SEG_FILENAME,
)
from tunetreg.network.tunet import build_model, state_arrays
from tunetreg.schemas.config import TUNetConfig
from tunetreg.schemas.state import Checkpoint
from tunetreg.schemas.volumes import SegmentationMap, Volume
from tunetreg.training.checkpoint import load_checkpoint, save_checkpoint

SMALL_MODEL = {
    "level_widths": [4, 8, 8, 8],
    "block_patch_sizes": [2, 2],
    "block_heads": [2, 2],
}


@pytest.fixture()
def write_config(tmp_path: Path) -> Callable[..., Path]:
    def write(**sections: Any) -> Path:
        values: Dict[str, Any] = {
            "num_pairs": 3,
            "num_val_pairs": 1,
            "synthetic": {"shape": [16, 16, 16]},
            "model": SMALL_MODEL,
            "train": {
                "epochs": 1,
                "patch_shape": [16, 16, 16],
                "max_rotation_deg": 0.0,
            },
            "gradcheck": {"samples_per_group": 1},
        }
        values.update(sections)
        filepath = tmp_path / "config.json"
        filepath.write_text(json.dumps(values))
        return filepath

    return write


def _files(directory: Path) -> List[Path]:
    return sorted(p.relative_to(directory) for p in directory.rglob("*.nii"))


# ----------------------------------------------------------------------------
# SYNTH
# ----------------------------------------------------------------------------
def test_synth_is_byte_identical_on_rerun(
    write_config: Callable[..., Path], tmp_path: Path
) -> None:
    config = write_config()
    for name in ("a", "b"):
        out = str(tmp_path / name)
        args = ["synth", "--config", str(config), "--out", out, "--seed", "5"]
        assert main(args) == EXIT_OK

    a, b = tmp_path / "a", tmp_path / "b"
    assert sorted(p.name for p in a.iterdir() if p.is_dir()) == [
        pair_name(i) for i in range(3)
    ]
    assert _files(a) == _files(b)
    for relative in _files(a):
        assert (a / relative).read_bytes() == (b / relative).read_bytes()
    assert (a / BASELINE_FILENAME).read_bytes() == (
        b / BASELINE_FILENAME
    ).read_bytes()

    manifest = json.loads((a / MANIFEST_FILENAME).read_text())
    assert manifest["command"] == "synth"
    assert manifest["config"]["synthetic"]["seed"] == 5


def test_synth_without_displacement(
    write_config: Callable[..., Path], tmp_path: Path
) -> None:
    config = write_config(
        num_pairs=2,
        synthetic={"shape": [16, 16, 16], "max_displacement": 0.0},
    )
    out = tmp_path / "out"
    assert main(["synth", "--config", str(config), "--out", str(out)]) == 0
    pair_dir = out / pair_name(0)
    assert (pair_dir / MOVING_FILENAME).read_bytes() == (
        pair_dir / FIXED_FILENAME
    ).read_bytes()
    assert not load_field(pair_dir / FIELD_FILENAME).u.any()
    baseline = pd.read_csv(out / BASELINE_FILENAME)
    assert (baseline["baseline_dice"] == 1.0).all()


def test_synth_baseline_matches_the_frozen_generator_value(
    write_config: Callable[..., Path],
    tmp_path: Path,
    seed_7_baseline_dice: float,
) -> None:
    config = write_config(num_pairs=1, synthetic={})
    out = tmp_path / "out"
    args = ["synth", "--config", str(config), "--out", str(out)]
    assert main(args + ["--seed", "7"]) == EXIT_OK
    baseline = pd.read_csv(out / BASELINE_FILENAME)
    assert set(baseline[PAIR_KEY]) == {pair_name(0)}
    assert baseline["baseline_dice"].mean() == pytest.approx(
        seed_7_baseline_dice, abs=1e-5
    )


def test_invalid_synthetic_spec_exits_with_config_error(
    write_config: Callable[..., Path], tmp_path: Path
) -> None:
    config = write_config(synthetic={"shape": [30, 32, 32]})
    args = ["synth", "--config", str(config), "--out", str(tmp_path / "o")]
    assert main(args) == EXIT_INVALID_CONFIG
    assert main(args[:1] + ["--config", str(tmp_path / "nope.json")]) == (
        EXIT_IO
    )


# ----------------------------------------------------------------------------
# TRAIN
# ----------------------------------------------------------------------------
def test_train_rejects_zero_epochs(
    write_config: Callable[..., Path], tmp_path: Path
) -> None:
    args = ["train", "--config", str(write_config()), "--epochs", "0"]
    assert main(args + ["--out", str(tmp_path / "out")]) == (
        EXIT_INVALID_CONFIG
    )
    assert not (tmp_path / "out" / "checkpoints").exists()


def test_train_with_zero_learning_rate_keeps_initial_weights(
    write_config: Callable[..., Path], tmp_path: Path
) -> None:
    out = tmp_path / "out"
    args = [
        "train",
        "--config",
        str(write_config()),
        "--out",
        str(out),
        "--learning-rate",
        "0",
        "--num-pairs",
        "2",
        "--seed",
        "2",
    ]
    assert main(args) == EXIT_OK
    checkpoint = load_checkpoint(out / "checkpoints" / CHECKPOINT_FILENAME)
    initial = state_arrays(build_model(TUNetConfig(**SMALL_MODEL), seed=2))
    for name, array in initial.items():
        np.testing.assert_array_equal(checkpoint.state[name], array)
    assert checkpoint.step == 2

    manifest = json.loads((out / MANIFEST_FILENAME).read_text())
    assert manifest["command"] == "train"
    assert set(manifest["outputs"]) == {
        "checkpoint",
        "loss_trace",
        "run_config",
    }


# ----------------------------------------------------------------------------
# REGISTER
# ----------------------------------------------------------------------------
@pytest.fixture()
def checkpoint_file(
    make_checkpoint: Callable[..., Checkpoint], tmp_path: Path
) -> Path:
    filepath = tmp_path / "zero.dill"
    save_checkpoint(make_checkpoint(), filepath)
    return filepath


def test_register_with_a_fresh_checkpoint_is_the_identity(
    checkpoint_file: Path,
    make_volume: Callable[..., Volume],
    tmp_path: Path,
    mocker: MockerFixture,
) -> None:
    write_image = mocker.patch.object(go.Figure, "write_image")
    moving, fixed = make_volume(seed=1), make_volume(seed=2)
    labels = np.arange(16**3, dtype=np.int32).reshape(16, 16, 16) % 4
    save_nifti(moving, tmp_path / "moving.nii")
    save_nifti(fixed, tmp_path / "fixed.nii")
    save_nifti(SegmentationMap(labels=labels), tmp_path / "moving_seg.nii")
    out = tmp_path / "out"
    args = [
        "register",
        "--checkpoint",
        str(checkpoint_file),
        "--moving",
        str(tmp_path / "moving.nii"),
        "--fixed",
        str(tmp_path / "fixed.nii"),
        "--moving-seg",
        str(tmp_path / "moving_seg.nii"),
        "--out",
        str(out),
    ]
    assert main(args) == EXIT_OK
    warped = load_volume(out / WARPED_FILENAME)
    np.testing.assert_allclose(warped.data, moving.data, atol=1e-6)
    assert not load_field(out / FIELD_FILENAME).u.any()
    np.testing.assert_array_equal(
        load_segmentation(out / WARPED_SEG_FILENAME).labels, labels
    )
    write_image.assert_called_once()
    assert write_image.call_args.args[0] == str(out / SLICES_FILENAME)
    manifest = json.loads((out / MANIFEST_FILENAME).read_text())
    assert set(manifest["outputs"]) == {
        "warped",
        "field",
        "warped_seg",
        "slices",
    }


def test_register_pads_inputs_to_the_network_multiple(
    checkpoint_file: Path,
    make_volume: Callable[..., Volume],
    tmp_path: Path,
    mocker: MockerFixture,
) -> None:
    mocker.patch.object(go.Figure, "write_image")
    shape = (12, 16, 20)
    moving = make_volume(shape, seed=1)
    labels = np.ones(shape, dtype=np.int32)
    save_nifti(moving, tmp_path / "moving.nii")
    save_nifti(make_volume(shape, seed=2), tmp_path / "fixed.nii")
    save_nifti(SegmentationMap(labels=labels), tmp_path / "moving_seg.nii")
    out = tmp_path / "out"
    args = [
        "register",
        "--checkpoint",
        str(checkpoint_file),
        "--moving",
        str(tmp_path / "moving.nii"),
        "--fixed",
        str(tmp_path / "fixed.nii"),
        "--moving-seg",
        str(tmp_path / "moving_seg.nii"),
        "--out",
        str(out),
    ]
    assert main(args) == EXIT_OK
    warped = load_volume(out / WARPED_FILENAME)
    assert warped.shape == (16, 16, 24)
    np.testing.assert_allclose(
        warped.data[2:14, :, 2:22], moving.data, atol=1e-6
    )
    assert load_field(out / FIELD_FILENAME).shape == (16, 16, 24)
    warped_seg = load_segmentation(out / WARPED_SEG_FILENAME).labels
    assert warped_seg.sum() == labels.sum()

    # A target shape the network cannot take fails before any output
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"preprocess": {"target_shape": [12] * 3}}))
    rejected = tmp_path / "rejected"
    args[-1] = str(rejected)
    assert main(args + ["--config", str(config)]) == EXIT_FAILURE
    assert not (rejected / WARPED_FILENAME).exists()


def test_register_rejects_mismatched_shapes(
    checkpoint_file: Path,
    make_volume: Callable[..., Volume],
    tmp_path: Path,
) -> None:
    save_nifti(make_volume((16, 16, 16)), tmp_path / "moving.nii")
    save_nifti(make_volume((16, 16, 8)), tmp_path / "fixed.nii")
    out = tmp_path / "out"
    args = [
        "register",
        "--checkpoint",
        str(checkpoint_file),
        "--moving",
        str(tmp_path / "moving.nii"),
        "--fixed",
        str(tmp_path / "fixed.nii"),
        "--out",
        str(out),
    ]
    assert main(args) == EXIT_FAILURE
    assert not (out / WARPED_FILENAME).exists()
    assert not (out / FIELD_FILENAME).exists()
    # The manifest is written before any work starts
    manifest = json.loads((out / MANIFEST_FILENAME).read_text())
    assert set(manifest["outputs"]) == {"warped", "field", "slices"}


# ----------------------------------------------------------------------------
# EVALUATE
# ----------------------------------------------------------------------------
def test_evaluate_writes_a_dataset_report(
    write_config: Callable[..., Path],
    checkpoint_file: Path,
    tmp_path: Path,
    mocker: MockerFixture,
) -> None:
    write_image = mocker.patch.object(go.Figure, "write_image")
    config = str(write_config(num_pairs=2))
    data = tmp_path / "data"
    assert main(["synth", "--config", config, "--out", str(data)]) == 0

    out = tmp_path / "report"
    args = ["evaluate", "--config", config, "--checkpoint"]
    args += [str(checkpoint_file), "--data", str(data), "--out", str(out)]
    assert main(args) == EXIT_OK
    df = pd.read_csv(out / REPORT_CSV_FILENAME)
    assert set(df[PAIR_KEY]) == {pair_name(0), pair_name(1)}
    # A fresh checkpoint predicts zero fields
    assert (df["dice"] == df["baseline_dice"]).all()
    write_image.assert_called_once()

    no_data = ["evaluate", "--checkpoint", str(checkpoint_file)]
    assert main(no_data + ["--out", str(out)]) == EXIT_INVALID_CONFIG


# ----------------------------------------------------------------------------
# GRADCHECK
# ----------------------------------------------------------------------------
def test_gradcheck_sign_flip_fails(
    write_config: Callable[..., Path], tmp_path: Path
) -> None:
    out = tmp_path / "out"
    args = ["gradcheck", "--config", str(write_config()), "--out", str(out)]
    assert main(args + ["--inject-sign-flip", "local_cc"]) == EXIT_FAILURE
    results = pd.read_csv(out / GRADCHECK_FILENAME)
    failed = results.loc[~results["passed"], "name"].tolist()
    assert failed == ["local_cc"]


def test_gradcheck_unreachable_tolerance_fails(
    write_config: Callable[..., Path], tmp_path: Path
) -> None:
    out = tmp_path / "out"
    args = ["gradcheck", "--config", str(write_config()), "--out", str(out)]
    assert main(args + ["--tolerance", "1e-12"]) == EXIT_FAILURE
