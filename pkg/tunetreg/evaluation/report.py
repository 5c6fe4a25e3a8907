import logging as log
import os
import time
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional

import pandas as pd
import plotly.graph_objects as go  # type: ignore
from plotly.subplots import make_subplots  # type: ignore

from tunetreg.custom_typing import ShapeType
from tunetreg.errors import IOFailure, MissingSegmentation
from tunetreg.evaluation.metrics import (
    dice_per_label,
    empty_labels,
    foreground_labels,
    mean_dice,
)
from tunetreg.global_variables import (
    BASELINE_DICE_KEY,
    DICE_KEY,
    LABEL_KEY,
    PAIR_KEY,
    REPORT_COLUMNS,
    REPORT_CSV_FILENAME,
    REPORT_FIGURE_FILENAME,
    REPORT_FOOTER_FILENAME,
    SLICES_FILENAME,
)
from tunetreg.json_utils import config_digest
from tunetreg.network.inference import infer_field
from tunetreg.network.losses import total_loss
from tunetreg.network.transform import warp_segmentation
from tunetreg.schemas.config import LossConfig
from tunetreg.schemas.state import (
    Checkpoint,
    ReferenceTable,
    RegistrationReport,
)
from tunetreg.schemas.volumes import DisplacementField, Volume, VolumePair
from tunetreg.training.checkpoint import model_from_checkpoint, params_digest

DIGEST_LENGTH = 16
REFERENCE_HEADER = (
    "Reference Dice on LPBA40, non-reproduced reference values "
    "(context only, not computed by this run):"
)


# ----------------------------------------------------------------------------
# EVALUATION
# ----------------------------------------------------------------------------
def evaluate_field(
    field: DisplacementField,
    pair: VolumePair,
    labels: Optional[Iterable[int]] = None,
    loss_config: Optional[LossConfig] = None,
    step: int = 0,
) -> RegistrationReport:
    """Score an arbitrary field on a segmented pair.

    Args:
        field (DisplacementField): field registering moving onto fixed.
        pair (VolumePair): pair with both segmentations.
        labels (Iterable[int], optional): labels to score, default every
            foreground label of the fixed map.
        loss_config (LossConfig, optional): attach loss components when
            given.
        step (int): step recorded with the loss components.

    Returns:
        RegistrationReport: registered and unregistered Dice.
    """
    if pair.moving_seg is None or pair.fixed_seg is None:
        raise MissingSegmentation("Evaluation needs both segmentations.")
    label_list = foreground_labels(pair.fixed_seg, labels)
    if not label_list:
        raise MissingSegmentation("No labels to evaluate.")

    registered = warp_segmentation(pair.moving_seg, field)
    scores = dice_per_label(registered, pair.fixed_seg, label_list)
    baseline = dice_per_label(pair.moving_seg, pair.fixed_seg, label_list)
    loss_components = None
    if loss_config is not None:
        _, terms = total_loss(
            pair.moving.to_tensor(),
            pair.fixed.to_tensor(),
            field.to_tensor(),
            loss_config,
        )
        loss_components = terms.to_record(step)
    return RegistrationReport(
        per_label_dice=scores,
        mean_dice=mean_dice(scores),
        baseline_dice=baseline,
        baseline_mean_dice=mean_dice(baseline),
        empty_labels=empty_labels(registered, pair.fixed_seg, label_list),
        loss_components=loss_components,
    )


def checkpoint_config_hash(checkpoint: Checkpoint) -> str:
    return config_digest(
        {
            "model": checkpoint.network_config,
            "train": checkpoint.train_config,
            "loss": checkpoint.loss_config,
        }
    )[:DIGEST_LENGTH]


def evaluate_registration(
    checkpoint: Checkpoint,
    pair: VolumePair,
    labels: Optional[Iterable[int]] = None,
    inference_patch_shape: Optional[ShapeType] = None,
) -> RegistrationReport:
    """Register `pair` with the checkpoint's network and score the
    nearest-warped moving labels against the fixed labels."""
    if not pair.has_segmentations:
        raise MissingSegmentation("Evaluation needs both segmentations.")
    start = time.perf_counter()
    model = model_from_checkpoint(checkpoint)
    field = infer_field(model, pair, inference_patch_shape)
    report = evaluate_field(
        field, pair, labels, checkpoint.loss_config, checkpoint.step
    )
    runtime = time.perf_counter() - start
    log.debug(f"Registered pair in {runtime:.3f} s")
    return report.model_copy(
        update={
            "runtime_s": runtime,
            "config_hash": checkpoint_config_hash(checkpoint),
            "checkpoint_id": params_digest(checkpoint.state)[
                :DIGEST_LENGTH
            ],
        }
    )


# ----------------------------------------------------------------------------
# REPORT FILES
# ----------------------------------------------------------------------------
def report_frame(report: RegistrationReport) -> pd.DataFrame:
    rows = [
        {
            LABEL_KEY: label,
            DICE_KEY: dice,
            BASELINE_DICE_KEY: report.baseline_dice[label],
        }
        for label, dice in sorted(report.per_label_dice.items())
    ]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def reference_text(table: ReferenceTable) -> str:
    df = pd.DataFrame(table.rows, index=table.structures).T
    df.index.name = "method"
    body = df.to_string(float_format=lambda v: f"{v:.3f}")
    return f"{REFERENCE_HEADER}\n{body}\n"


def footer_text(
    mean: float,
    baseline_mean: float,
    empty: List[int],
    config_hash: str,
    checkpoint_id: str,
    table: ReferenceTable,
) -> str:
    empty_text = ", ".join(str(label) for label in empty) or "none"
    lines = [
        f"mean Dice: {mean:.6f}",
        f"baseline mean Dice: {baseline_mean:.6f}",
        f"labels empty in both maps (scored 1.0): {empty_text}",
        f"config hash: {config_hash or 'n/a'}",
        f"checkpoint id: {checkpoint_id or 'n/a'}",
        "",
    ]
    return "\n".join(lines) + "\n" + reference_text(table)


def _bar_figure(df: pd.DataFrame) -> go.Figure:
    labels = [str(label) for label in df[LABEL_KEY]]
    fig = go.Figure(
        data=[
            go.Bar(name="registered", x=labels, y=df[DICE_KEY]),
            go.Bar(name="unregistered", x=labels, y=df[BASELINE_DICE_KEY]),
        ]
    )
    fig.update_layout(
        barmode="group",
        xaxis_title="label",
        yaxis_title="Dice",
        yaxis_range=[0, 1],
    )
    return fig


def _box_figure(df: pd.DataFrame) -> go.Figure:
    labels = [str(label) for label in df[LABEL_KEY]]
    fig = go.Figure(
        data=[
            go.Box(name="registered", x=labels, y=df[DICE_KEY]),
            go.Box(name="unregistered", x=labels, y=df[BASELINE_DICE_KEY]),
        ]
    )
    fig.update_layout(
        boxmode="group",
        xaxis_title="label",
        yaxis_title="Dice",
        yaxis_range=[0, 1],
    )
    return fig


def _write_files(
    df: pd.DataFrame, fig: go.Figure, footer: str, out_dir: Path
) -> Dict[str, Path]:
    paths = {
        "csv": out_dir / REPORT_CSV_FILENAME,
        "figure": out_dir / REPORT_FIGURE_FILENAME,
        "footer": out_dir / REPORT_FOOTER_FILENAME,
    }
    try:
        os.makedirs(out_dir, exist_ok=True)
        df.to_csv(paths["csv"], index=False)
        fig.write_image(str(paths["figure"]), format="png")
        with open(paths["footer"], "w", encoding="utf-8") as f:
            f.write(footer)
    except OSError as e:
        raise IOFailure(f"Could not write report to {out_dir}: {e}") from e
    log.info(f"Report written to {out_dir}")
    return paths


def emit_report(report: RegistrationReport, out_dir: Path) -> Dict[str, Path]:
    """Write the per-label CSV (label, dice, baseline_dice), a grouped bar
    figure and a text footer with provenance and reference values.

    Raises:
        MissingSegmentation: the report has no labels; nothing is written.
        IOFailure: out_dir is not writable.
    """
    if not report.per_label_dice:
        raise MissingSegmentation("Report has no evaluated labels.")
    df = report_frame(report)
    footer = footer_text(
        report.mean_dice,
        report.baseline_mean_dice,
        report.empty_labels,
        report.config_hash,
        report.checkpoint_id,
        report.reference_table,
    )
    return _write_files(df, _bar_figure(df), footer, Path(out_dir))


def emit_dataset_report(
    reports: Mapping[str, RegistrationReport], out_dir: Path
) -> Dict[str, Path]:
    """Aggregate version of emit_report: one CSV row per (pair, label),
    a per-label box figure, and dataset means in the footer. Means are
    taken over pair means."""
    if not reports or any(not r.per_label_dice for r in reports.values()):
        raise MissingSegmentation("Every pair needs evaluated labels.")
    frames = []
    for name, report in sorted(reports.items()):
        df = report_frame(report)
        df.insert(0, PAIR_KEY, name)
        frames.append(df)
    df = pd.concat(frames, ignore_index=True)
    first = next(iter(sorted(reports.items())))[1]
    empty = sorted({e for r in reports.values() for e in r.empty_labels})
    footer = footer_text(
        float(pd.Series([r.mean_dice for r in reports.values()]).mean()),
        float(
            pd.Series([r.baseline_mean_dice for r in reports.values()]).mean()
        ),
        empty,
        first.config_hash,
        first.checkpoint_id,
        first.reference_table,
    )
    return _write_files(df, _box_figure(df), footer, Path(out_dir))


# ----------------------------------------------------------------------------
# SLICE PANEL
# ----------------------------------------------------------------------------
SLICE_TITLES = ("moving", "fixed", "registered")


def slice_figure(
    moving: Volume, fixed: Volume, registered: Volume
) -> go.Figure:
    """Middle slice along the first axis of each volume, side by side on a
    shared grey scale."""
    volumes = (moving, fixed, registered)
    shapes = {v.shape for v in volumes}
    if len(shapes) != 1:
        raise ValueError(f"Slice panel volumes disagree on shape: {shapes}.")
    low = min(v.intensity_range[0] for v in volumes)
    high = max(v.intensity_range[1] for v in volumes)
    fig = make_subplots(rows=1, cols=3, subplot_titles=SLICE_TITLES)
    for col, volume in enumerate(volumes, start=1):
        fig.add_trace(
            go.Heatmap(
                z=volume.data[volume.shape[0] // 2],
                colorscale="gray",
                zmin=low,
                zmax=high,
                showscale=col == 3,
            ),
            row=1,
            col=col,
        )
    return fig


def emit_slice_panel(
    moving: Volume, fixed: Volume, registered: Volume, out_dir: Path
) -> Path:
    filepath = Path(out_dir) / SLICES_FILENAME
    try:
        os.makedirs(out_dir, exist_ok=True)
        slice_figure(moving, fixed, registered).write_image(
            str(filepath), format="png"
        )
    except OSError as e:
        raise IOFailure(f"Could not write {filepath}: {e}") from e
    return filepath
