import argparse
import logging as log
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd
from pydantic import ValidationError

from tunetreg.data.io import (
    load_dataset,
    load_segmentation,
    load_volume,
    resolve_data_path,
    save_nifti,
    save_pair,
)
from tunetreg.data.preprocessing import (
    crop_or_pad,
    preprocess_pair,
    preprocess_target,
)
from tunetreg.data.synthetic import generate_synthetic_dataset
from tunetreg.errors import (
    DivergedLoss,
    InvalidConfig,
    InvalidSpec,
    IOFailure,
    ShapeMismatch,
    TUNetRegError,
)
from tunetreg.evaluation.metrics import dice_per_label, foreground_labels
from tunetreg.evaluation.report import (
    DIGEST_LENGTH,
    emit_dataset_report,
    emit_slice_panel,
    evaluate_registration,
)
from tunetreg.global_variables import (
    BASELINE_DICE_KEY,
    BASELINE_FILENAME,
    CHECKPOINT_FILENAME,
    EXIT_DIVERGED,
    EXIT_FAILURE,
    EXIT_INVALID_CONFIG,
    EXIT_IO,
    EXIT_OK,
    FIELD_FILENAME,
    GRADCHECK_FILENAME,
    LABEL_KEY,
    LOSS_TRACE_FILENAME,
    MANIFEST_FILENAME,
    PAIR_KEY,
    REPORT_CSV_FILENAME,
    REPORT_FIGURE_FILENAME,
    REPORT_FOOTER_FILENAME,
    RUN_CONFIG_FILENAME,
    SLICES_FILENAME,
    WARPED_FILENAME,
    WARPED_SEG_FILENAME,
)
from tunetreg.gradcheck import CHECK_NAMES, format_results, run_gradcheck
from tunetreg.json_utils import config_digest, dump_json
from tunetreg.network.inference import infer_field
from tunetreg.network.transform import warp_segmentation, warp_volume
from tunetreg.schemas.config import RunConfig
from tunetreg.schemas.state import GradcheckResult, RunManifest
from tunetreg.schemas.volumes import VolumePair
from tunetreg.training.checkpoint import load_checkpoint, model_from_checkpoint
from tunetreg.training.trainer import Trainer


def pair_name(index: int) -> str:
    return f"pair_{index:03d}"


# ----------------------------------------------------------------------------
# CONFIGURATION
# ----------------------------------------------------------------------------
def _overrides(args: argparse.Namespace) -> Dict[str, Dict[str, Any]]:
    """Flag values that were actually given, grouped by config section;
    the empty section name is the root."""
    mapping: Dict[str, Tuple[str, str]] = {
        "seed": ("", "seed"),
        "out": ("", "out_dir"),
        "data": ("", "data_dir"),
        "num_pairs": ("", "num_pairs"),
        "deterministic": ("train", "deterministic"),
        "epochs": ("train", "epochs"),
        "learning_rate": ("train", "learning_rate"),
        "steps_per_epoch": ("train", "steps_per_epoch"),
        "resume_from": ("train", "resume_from"),
        "tolerance": ("gradcheck", "tolerance"),
        "inject_sign_flip": ("gradcheck", "inject_sign_flip"),
    }
    overrides: Dict[str, Dict[str, Any]] = {}
    for flag, (section, key) in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.setdefault(section, {})[key] = value
    return overrides


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """flag > file > default, root seed propagated, and the checkpoint
    directory placed under the run's output directory."""
    try:
        config = RunConfig.from_file(args.config)
        data = config.model_dump()
        for section, values in _overrides(args).items():
            if section:
                data[section].update(values)
            else:
                data.update(values)
        config = RunConfig.model_validate(data).with_root_seed()
    except ValidationError as e:
        if any(error["loc"][:1] == ("synthetic",) for error in e.errors()):
            raise InvalidSpec(f"Invalid synthetic spec: {e}") from e
        raise InvalidConfig(f"Invalid configuration: {e}") from e

    checkpoint_dir = config.train.checkpoint_dir
    if not checkpoint_dir.is_absolute():
        checkpoint_dir = config.out_dir / checkpoint_dir
    return config.model_copy(
        update={
            "train": config.train.model_copy(
                update={"checkpoint_dir": checkpoint_dir}
            )
        }
    )


def declared_outputs(
    command: str, config: RunConfig, args: argparse.Namespace
) -> Dict[str, Path]:
    out_dir = config.out_dir
    if command == "synth":
        return {
            "dataset": out_dir,
            "baseline": out_dir / BASELINE_FILENAME,
        }
    if command == "train":
        checkpoint_dir = config.train.checkpoint_dir
        return {
            "checkpoint": checkpoint_dir / CHECKPOINT_FILENAME,
            "loss_trace": checkpoint_dir / LOSS_TRACE_FILENAME,
            "run_config": checkpoint_dir / RUN_CONFIG_FILENAME,
        }
    if command == "register":
        outputs = {
            "warped": out_dir / WARPED_FILENAME,
            "field": out_dir / FIELD_FILENAME,
        }
        outputs["slices"] = out_dir / SLICES_FILENAME
        if args.moving_seg is not None:
            outputs["warped_seg"] = out_dir / WARPED_SEG_FILENAME
        return outputs
    if command == "evaluate":
        return {
            "csv": out_dir / REPORT_CSV_FILENAME,
            "figure": out_dir / REPORT_FIGURE_FILENAME,
            "footer": out_dir / REPORT_FOOTER_FILENAME,
        }
    return {"results": out_dir / GRADCHECK_FILENAME}


def write_manifest(
    command: str,
    config: RunConfig,
    config_path: Optional[Path],
    outputs: Dict[str, Path],
) -> Path:
    manifest = RunManifest(
        command=command,  # type: ignore
        config_path=config_path,
        config=config,
        config_hash=config_digest(config)[:DIGEST_LENGTH],
        outputs=outputs,
    )
    filepath = config.out_dir / MANIFEST_FILENAME
    try:
        os.makedirs(config.out_dir, exist_ok=True)
        dump_json(manifest, filepath)
    except OSError as e:
        raise IOFailure(f"Could not write manifest {filepath}: {e}") from e
    return filepath


# ----------------------------------------------------------------------------
# COMMANDS
# ----------------------------------------------------------------------------
def cmd_synth(config: RunConfig) -> Path:
    """Write `num_pairs` synthetic pair directories, their ground-truth
    fields and the unregistered Dice per pair and label."""
    out_dir = config.out_dir
    dataset = generate_synthetic_dataset(config.synthetic, config.num_pairs)
    rows = []
    for i, (pair, field) in enumerate(dataset):
        save_pair(pair, out_dir / pair_name(i), field)
        assert pair.moving_seg is not None and pair.fixed_seg is not None
        labels = foreground_labels(pair.fixed_seg)
        scores = dice_per_label(pair.moving_seg, pair.fixed_seg, labels)
        rows.extend(
            {PAIR_KEY: pair_name(i), LABEL_KEY: label, BASELINE_DICE_KEY: d}
            for label, d in scores.items()
        )
    df = pd.DataFrame(rows, columns=[PAIR_KEY, LABEL_KEY, BASELINE_DICE_KEY])
    df.to_csv(out_dir / BASELINE_FILENAME, index=False)
    log.info(f"Wrote {len(dataset)} synthetic pairs to {out_dir}")
    return out_dir


def _training_pairs(
    config: RunConfig,
) -> Tuple[List[VolumePair], List[VolumePair]]:
    if config.data_dir is not None:
        multiple = config.model.shape_multiple()
        pairs = [
            preprocess_pair(pair, config.preprocess, multiple)
            for pair in load_dataset(config.data_dir).values()
        ]
    else:
        generated = generate_synthetic_dataset(
            config.synthetic, config.num_pairs + config.num_val_pairs
        )
        pairs = [pair for pair, _ in generated]
    n_val = config.num_val_pairs
    if n_val == 0 or n_val >= len(pairs):
        if n_val:
            log.warning(
                f"Only {len(pairs)} pairs, training without validation"
            )
        return pairs, []
    return pairs[:-n_val], pairs[-n_val:]


def cmd_train(config: RunConfig) -> Path:
    train_pairs, val_pairs = _training_pairs(config)
    trainer = Trainer(config.model, config.train, config.loss)
    checkpoint = trainer.fit(train_pairs, val_pairs)
    log.info(f"Training finished at step {checkpoint.step}")
    return config.train.checkpoint_dir / CHECKPOINT_FILENAME


def cmd_register(
    config: RunConfig,
    checkpoint_path: Path,
    moving_path: Path,
    fixed_path: Path,
    moving_seg_path: Optional[Path] = None,
) -> Dict[str, Path]:
    """Register moving onto fixed and write the warped image and the field.
    Every input is loaded and checked before anything is written."""
    moving = load_volume(resolve_data_path(moving_path))
    fixed = load_volume(resolve_data_path(fixed_path))
    if moving.shape != fixed.shape:
        raise ShapeMismatch(
            f"Moving {moving.shape} and fixed {fixed.shape} differ."
        )
    moving_seg = None
    if moving_seg_path is not None:
        moving_seg = load_segmentation(resolve_data_path(moving_seg_path))
        if moving_seg.shape != moving.shape:
            raise ShapeMismatch(
                f"Moving labels {moving_seg.shape} and moving image "
                f"{moving.shape} differ."
            )
    checkpoint = load_checkpoint(checkpoint_path)
    network = checkpoint.network_config
    target = preprocess_target(
        moving.shape, config.preprocess, network.shape_multiple()
    )
    network.check_input_shape(target)
    pair = preprocess_pair(
        VolumePair(moving=moving, fixed=fixed, moving_seg=moving_seg),
        config.preprocess,
        network.shape_multiple(),
    )

    field = infer_field(
        model_from_checkpoint(checkpoint),
        pair,
        config.evaluation.inference_patch_shape,
    )
    # The warp keeps the input intensities
    warped = warp_volume(crop_or_pad(moving, target), field)
    outputs = {
        "warped": config.out_dir / WARPED_FILENAME,
        "field": config.out_dir / FIELD_FILENAME,
    }
    os.makedirs(config.out_dir, exist_ok=True)
    save_nifti(warped, outputs["warped"])
    save_nifti(field, outputs["field"])
    if pair.moving_seg is not None:
        outputs["warped_seg"] = config.out_dir / WARPED_SEG_FILENAME
        save_nifti(
            warp_segmentation(pair.moving_seg, field), outputs["warped_seg"]
        )
    outputs["slices"] = emit_slice_panel(
        crop_or_pad(moving, target),
        crop_or_pad(fixed, target),
        warped,
        config.out_dir,
    )
    log.info(f"Registered {moving_path} onto {fixed_path}")
    return outputs


def cmd_evaluate(
    config: RunConfig, checkpoint_path: Path, data_dir: Path
) -> Dict[str, Path]:
    checkpoint = load_checkpoint(checkpoint_path)
    multiple = checkpoint.network_config.shape_multiple()
    pairs = {
        name: preprocess_pair(pair, config.preprocess, multiple)
        for name, pair in load_dataset(data_dir).items()
    }
    reports = {
        name: evaluate_registration(
            checkpoint,
            pair,
            config.evaluation.labels,
            config.evaluation.inference_patch_shape,
        )
        for name, pair in pairs.items()
    }
    for name, report in reports.items():
        log.info(
            f"{name} | Dice {report.mean_dice:.4f} | baseline "
            f"{report.baseline_mean_dice:.4f}"
        )
    return emit_dataset_report(reports, config.out_dir)


def cmd_gradcheck(config: RunConfig) -> List[GradcheckResult]:
    results = run_gradcheck(config.gradcheck)
    print(format_results(results))
    filepath = config.out_dir / GRADCHECK_FILENAME
    pd.DataFrame(
        [r.model_dump() | {"passed": r.passed} for r in results]
    ).to_csv(filepath, index=False)
    return results


# ----------------------------------------------------------------------------
# ENTRY POINT
# ----------------------------------------------------------------------------
def _run_synth(args: argparse.Namespace, config: RunConfig) -> int:
    cmd_synth(config)
    return EXIT_OK


def _run_train(args: argparse.Namespace, config: RunConfig) -> int:
    cmd_train(config)
    return EXIT_OK


def _run_register(args: argparse.Namespace, config: RunConfig) -> int:
    cmd_register(
        config, args.checkpoint, args.moving, args.fixed, args.moving_seg
    )
    return EXIT_OK


def _run_evaluate(args: argparse.Namespace, config: RunConfig) -> int:
    if config.data_dir is None:
        raise InvalidConfig("evaluate needs --data or data_dir in config.")
    cmd_evaluate(config, args.checkpoint, config.data_dir)
    return EXIT_OK


def _run_gradcheck(args: argparse.Namespace, config: RunConfig) -> int:
    results = cmd_gradcheck(config)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


HANDLERS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "synth": _run_synth,
    "train": _run_train,
    "register": _run_register,
    "evaluate": _run_evaluate,
    "gradcheck": _run_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config JSON file")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="single-stream deterministic execution",
    )
    common.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="tunetreg",
        description="Transformer-UNet unsupervised deformable registration",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    synth = subparsers.add_parser(
        "synth", parents=[common], help="write a synthetic dataset"
    )
    synth.add_argument("--num-pairs", dest="num_pairs", type=int)

    train = subparsers.add_parser(
        "train", parents=[common], help="train a model"
    )
    train.add_argument("--data", type=Path, help="pair dataset directory")
    train.add_argument("--num-pairs", dest="num_pairs", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--learning-rate", dest="learning_rate", type=float)
    train.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    train.add_argument("--resume-from", dest="resume_from", type=Path)

    register = subparsers.add_parser(
        "register", parents=[common], help="register one pair"
    )
    register.add_argument("--checkpoint", type=Path, required=True)
    register.add_argument("--moving", type=Path, required=True)
    register.add_argument("--fixed", type=Path, required=True)
    register.add_argument("--moving-seg", dest="moving_seg", type=Path)

    evaluate = subparsers.add_parser(
        "evaluate", parents=[common], help="Dice report over a dataset"
    )
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--data", type=Path, help="pair dataset directory")

    gradcheck = subparsers.add_parser(
        "gradcheck", parents=[common], help="finite-difference checks"
    )
    gradcheck.add_argument("--tolerance", type=float)
    gradcheck.add_argument(
        "--inject-sign-flip", dest="inject_sign_flip", choices=CHECK_NAMES
    )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    log.basicConfig(
        level=log.DEBUG if args.verbose else log.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        config = resolve_config(args)
        outputs = declared_outputs(args.command, config, args)
        write_manifest(args.command, config, args.config, outputs)
        return HANDLERS[args.command](args, config)
    except InvalidConfig as e:
        log.error(str(e))
        return EXIT_INVALID_CONFIG
    except DivergedLoss as e:
        log.error(f"Training diverged at step {e.step}: loss {e.value}")
        return EXIT_DIVERGED
    except OSError as e:
        log.error(str(e))
        return EXIT_IO
    except (TUNetRegError, ValueError) as e:
        log.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
