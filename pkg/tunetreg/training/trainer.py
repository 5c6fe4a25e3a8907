import logging as log
import math
import os
from contextlib import contextmanager
from pathlib import Path
from typing import (
    Any,
    Dict,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader

from tunetreg.custom_typing import ShapeType
from tunetreg.data.synthetic import generate_synthetic_dataset
from tunetreg.errors import (
    DivergedLoss,
    EmptyDataset,
    InvalidConfig,
    IOFailure,
)
from tunetreg.evaluation.metrics import (
    dice_per_label,
    foreground_labels,
    mean_dice,
)
from tunetreg.global_variables import (
    CHECKPOINT_FILENAME,
    LOSS_TRACE_COLUMNS,
    LOSS_TRACE_FILENAME,
    RUN_CONFIG_FILENAME,
)
from tunetreg.json_utils import dump_json
from tunetreg.network.inference import infer_field
from tunetreg.network.losses import total_loss
from tunetreg.network.transform import warp_segmentation
from tunetreg.network.tunet import TUNet, build_model
from tunetreg.schemas.config import (
    LossConfig,
    SyntheticSpec,
    TrainConfig,
    TUNetConfig,
)
from tunetreg.schemas.state import Checkpoint, LossRecord, ValidationResult
from tunetreg.schemas.volumes import VolumePair
from tunetreg.training.checkpoint import (
    checkpoint_from_model,
    load_checkpoint,
    model_from_checkpoint,
    restore_optimizer,
    save_checkpoint,
)
from tunetreg.training.dataset import RegistrationPatchDataset, check_pairs


def write_loss_trace(trace: Sequence[LossRecord], filepath: Path) -> None:
    df = pd.DataFrame(
        [record.model_dump() for record in trace], columns=LOSS_TRACE_COLUMNS
    )
    df.to_csv(filepath, index=False)


def read_loss_trace(filepath: Path) -> pd.DataFrame:
    return pd.read_csv(filepath)


@contextmanager
def _algorithm_mode(deterministic: bool) -> Iterator[None]:
    """Set torch's deterministic-algorithms flag for one training run and
    restore the previous process-wide setting afterwards."""
    enabled = torch.are_deterministic_algorithms_enabled()
    warn_only = torch.is_deterministic_algorithms_warn_only_enabled()
    torch.use_deterministic_algorithms(deterministic, warn_only=True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(enabled, warn_only=warn_only)


def validate_epoch(
    model: Union[TUNet, Checkpoint],
    val_pairs: Sequence[VolumePair],
    loss_config: LossConfig = LossConfig(),
    inference_patch_shape: Optional[ShapeType] = None,
) -> ValidationResult:
    """Mean loss, and mean Dice where segmentations exist, over whole
    validation volumes without augmentation. Parameters are not touched.

    Args:
        model (TUNet | Checkpoint): network to evaluate.
        val_pairs (Sequence[VolumePair]): validation pairs.
        loss_config (LossConfig): objective to report.
        inference_patch_shape (ShapeType, optional): patch-stitched inference
            when given.

    Returns:
        ValidationResult: averages over pairs.
    """
    if not val_pairs:
        raise EmptyDataset("Validation needs at least one pair.")
    if isinstance(model, Checkpoint):
        model = model_from_checkpoint(model)

    losses: List[float] = []
    dices: List[float] = []
    for pair in val_pairs:
        field = infer_field(model, pair, inference_patch_shape)
        with torch.no_grad():
            loss, _ = total_loss(
                pair.moving.to_tensor(),
                pair.fixed.to_tensor(),
                field.to_tensor(),
                loss_config,
            )
        losses.append(float(loss))
        if pair.moving_seg is not None and pair.fixed_seg is not None:
            labels = foreground_labels(pair.fixed_seg)
            if labels:
                registered = warp_segmentation(pair.moving_seg, field)
                scores = dice_per_label(registered, pair.fixed_seg, labels)
                dices.append(mean_dice(scores))
    return ValidationResult(
        mean_loss=float(np.mean(losses)),
        mean_dice=float(np.mean(dices)) if dices else None,
    )


class Trainer:
    """Unsupervised atlas-based training on randomly rotated patches.

    Every step evaluates -CC(M o phi, F) + lambda * smoothness on one
    batch and takes one Adam step. A non-finite loss aborts with
    DivergedLoss. The latest checkpoint, the loss trace CSV and the
    resolved configs are written to `train_config.checkpoint_dir`.
    """

    def __init__(
        self,
        model_config: TUNetConfig,
        train_config: TrainConfig,
        loss_config: LossConfig = LossConfig(),
    ) -> None:
        self.model_config = model_config
        self.config = train_config
        self.loss_config = loss_config
        self.checkpoint_dir = Path(train_config.checkpoint_dir)

    def _initial_state(
        self,
    ) -> Tuple[TUNet, int, List[LossRecord], Dict[str, np.ndarray]]:
        if self.config.resume_from is None:
            model = build_model(self.model_config, self.config.seed)
            return model, 0, [], {}
        checkpoint = load_checkpoint(self.config.resume_from)
        if checkpoint.network_config != self.model_config:
            raise InvalidConfig(
                f"Checkpoint {self.config.resume_from} was trained with a "
                f"different network config."
            )
        log.info(
            f"Resuming from {self.config.resume_from} at step "
            f"{checkpoint.step}"
        )
        return (
            model_from_checkpoint(checkpoint),
            checkpoint.step,
            list(checkpoint.loss_trace),
            checkpoint.optimizer_state,
        )

    def _loader(self, dataset: RegistrationPatchDataset) -> DataLoader:
        kwargs: Dict[str, Any] = {}
        if self.config.num_workers > 0:
            kwargs["prefetch_factor"] = self.config.prefetch_factor
        return DataLoader(
            dataset,
            batch_size=self.config.batch_size,
            shuffle=False,
            num_workers=self.config.num_workers,
            **kwargs,
        )

    def write_artifacts(self, checkpoint: Checkpoint) -> None:
        try:
            os.makedirs(self.checkpoint_dir, exist_ok=True)
            save_checkpoint(
                checkpoint, self.checkpoint_dir / CHECKPOINT_FILENAME
            )
            write_loss_trace(
                checkpoint.loss_trace,
                self.checkpoint_dir / LOSS_TRACE_FILENAME,
            )
            dump_json(
                {
                    "model": self.model_config,
                    "train": self.config,
                    "loss": self.loss_config,
                },
                self.checkpoint_dir / RUN_CONFIG_FILENAME,
            )
        except OSError as e:
            raise IOFailure(
                f"Could not write training artifacts to "
                f"{self.checkpoint_dir}: {e}"
            ) from e

    def fit(
        self,
        pairs: Sequence[VolumePair],
        val_pairs: Optional[Sequence[VolumePair]] = None,
    ) -> Checkpoint:
        """Train until step epochs * steps_per_epoch. A resumed run only
        takes the remaining steps, so it ends where an uninterrupted run
        with the same config would."""
        check_pairs(pairs)
        with _algorithm_mode(self.config.deterministic):
            return self._fit(pairs, val_pairs)

    def _fit(
        self,
        pairs: Sequence[VolumePair],
        val_pairs: Optional[Sequence[VolumePair]],
    ) -> Checkpoint:
        model, start_step, trace, optimizer_state = self._initial_state()
        steps_per_epoch = self.config.steps_per_epoch or len(pairs)
        total_steps = self.config.epochs * steps_per_epoch
        remaining = max(total_steps - start_step, 0)
        batch = self.config.batch_size
        dataset = RegistrationPatchDataset(
            pairs,
            self.config,
            num_samples=remaining * batch,
            offset=start_step * batch,
        )
        optimizer = torch.optim.Adam(
            model.parameters(),
            lr=self.config.learning_rate,
            betas=self.config.betas,
        )
        if optimizer_state:
            restore_optimizer(model, optimizer, optimizer_state)
        log.info(
            f"Training | {len(pairs)} pairs | {self.config.epochs} epochs x "
            f"{steps_per_epoch} steps | {remaining} steps to go | patch "
            f"{dataset.patch_shape}"
        )

        model.train()
        step = start_step
        for moving, fixed in self._loader(dataset):
            field = model(moving, fixed)
            loss, terms = total_loss(moving, fixed, field, self.loss_config)
            record = terms.to_record(step)
            if not math.isfinite(record.total):
                raise DivergedLoss(step, record.total)
            trace.append(record)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1

            if step % self.config.log_interval == 0:
                log.debug(
                    f"Step {step} | loss {record.total:.4f} | "
                    f"cc {record.cc:.4f} | smooth {record.smooth:.4f}"
                )
            epoch_end = step % steps_per_epoch == 0
            if epoch_end:
                self._end_epoch(model, step // steps_per_epoch, val_pairs)
            interval = self.config.checkpoint_interval
            if (interval is None and epoch_end) or (
                interval is not None and step % interval == 0
            ):
                self.write_artifacts(
                    checkpoint_from_model(
                        model,
                        self.config,
                        self.loss_config,
                        step,
                        trace,
                        optimizer,
                    )
                )

        checkpoint = checkpoint_from_model(
            model, self.config, self.loss_config, step, trace, optimizer
        )
        self.write_artifacts(checkpoint)
        return checkpoint

    def _end_epoch(
        self,
        model: TUNet,
        epoch: int,
        val_pairs: Optional[Sequence[VolumePair]],
    ) -> None:
        if not val_pairs or epoch % self.config.val_interval != 0:
            log.info(f"Epoch {epoch} done")
            return
        result = validate_epoch(
            model,
            val_pairs,
            self.loss_config,
            self.config.inference_patch_shape,
        )
        dice = "n/a" if result.mean_dice is None else f"{result.mean_dice:.4f}"
        log.info(
            f"Epoch {epoch} done | val loss {result.mean_loss:.4f} | "
            f"val Dice {dice}"
        )


def train(
    model_config: TUNetConfig,
    train_config: TrainConfig,
    dataset: Union[Sequence[VolumePair], SyntheticSpec],
    loss_config: LossConfig = LossConfig(),
    val_pairs: Optional[Sequence[VolumePair]] = None,
    num_pairs: int = 10,
) -> Checkpoint:
    """Train a TUNet on `dataset`, a list of pairs sharing a fixed atlas
    or a SyntheticSpec from which `num_pairs` pairs are generated."""
    if isinstance(dataset, SyntheticSpec):
        generated = generate_synthetic_dataset(dataset, num_pairs)
        pairs = [pair for pair, _ in generated]
    else:
        pairs = list(dataset)
    return Trainer(model_config, train_config, loss_config).fit(
        pairs, val_pairs
    )
