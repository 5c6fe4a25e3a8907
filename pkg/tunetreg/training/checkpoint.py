import hashlib
import logging as log
import os
import pickle
from pathlib import Path
from typing import Dict, List, Optional

import dill  # type: ignore
import numpy as np
import torch
from pydantic import ValidationError

from tunetreg.errors import (
    IOFailure,
    MalformedCheckpoint,
    MissingFile,
    VersionMismatch,
)
from tunetreg.global_variables import CHECKPOINT_FORMAT_VERSION
from tunetreg.network.tunet import TUNet, state_arrays
from tunetreg.schemas.config import LossConfig, TrainConfig
from tunetreg.schemas.state import Checkpoint, LossRecord

FORMAT_VERSION_KEY = "format_version"


def params_digest(state: Dict[str, np.ndarray]) -> str:
    """SHA-256 over parameter names, shapes, dtypes and bytes."""
    digest = hashlib.sha256()
    for name, array in state.items():
        digest.update(name.encode("utf-8"))
        digest.update(str(array.shape).encode("utf-8"))
        digest.update(str(array.dtype).encode("utf-8"))
        digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()


def optimizer_arrays(
    model: TUNet, optimizer: torch.optim.Optimizer
) -> Dict[str, np.ndarray]:
    """Per-parameter optimizer buffers keyed "<param name>/<buffer>"."""
    names = [name for name, _ in model.named_parameters()]
    arrays: Dict[str, np.ndarray] = {}
    for index, buffers in optimizer.state_dict()["state"].items():
        for key, value in buffers.items():
            arrays[f"{names[index]}/{key}"] = (
                torch.as_tensor(value).detach().cpu().numpy().copy()
            )
    return arrays


def restore_optimizer(
    model: TUNet,
    optimizer: torch.optim.Optimizer,
    arrays: Dict[str, np.ndarray],
) -> None:
    """Load buffers written by optimizer_arrays; hyperparameters stay as
    configured on `optimizer`."""
    index = {name: i for i, (name, _) in enumerate(model.named_parameters())}
    state: Dict[int, Dict[str, torch.Tensor]] = {}
    for key, array in arrays.items():
        name, _, buffer = key.rpartition("/")
        if name not in index:
            raise MalformedCheckpoint(
                f"Optimizer state for unknown parameter {name!r}."
            )
        state.setdefault(index[name], {})[buffer] = torch.from_numpy(
            np.array(array)
        )
    current = optimizer.state_dict()
    optimizer.load_state_dict(
        {"state": state, "param_groups": current["param_groups"]}
    )


def checkpoint_from_model(
    model: TUNet,
    train_config: TrainConfig,
    loss_config: LossConfig,
    step: int = 0,
    loss_trace: Optional[List[LossRecord]] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> Checkpoint:
    return Checkpoint(
        network_config=model.config,
        train_config=train_config,
        loss_config=loss_config,
        state=state_arrays(model),
        optimizer_state=(
            {} if optimizer is None else optimizer_arrays(model, optimizer)
        ),
        step=step,
        loss_trace=list(loss_trace or []),
    )


def model_from_checkpoint(checkpoint: Checkpoint) -> TUNet:
    model = TUNet(checkpoint.network_config)
    state = {
        name: torch.from_numpy(np.array(array))
        for name, array in checkpoint.state.items()
    }
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise MalformedCheckpoint(
            f"Checkpoint state does not match its network config: {e}"
        ) from e
    return model


def save_checkpoint(checkpoint: Checkpoint, filepath: Path) -> None:
    """Write the checkpoint with dill, tagged with the format version.

    Args:
        checkpoint (Checkpoint): checkpoint to persist.
        filepath (Path): destination file; parent dirs are created.
    """
    payload = {FORMAT_VERSION_KEY: CHECKPOINT_FORMAT_VERSION}
    payload.update(checkpoint.to_dict())
    try:
        os.makedirs(Path(filepath).parent, exist_ok=True)
        with open(filepath, "wb") as f:
            dill.dump(payload, f)
    except OSError as e:
        raise IOFailure(f"Could not write checkpoint {filepath}: {e}") from e
    log.info(f"Checkpoint written | step {checkpoint.step} | {filepath}")


def load_checkpoint(filepath: Path) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint.

    Raises:
        MissingFile: the file does not exist.
        MalformedCheckpoint: the file is truncated or not a checkpoint.
        VersionMismatch: the format version tag differs.
    """
    if not os.path.isfile(filepath):
        raise MissingFile(f"Checkpoint {filepath} does not exist.")
    try:
        with open(filepath, "rb") as f:
            payload = dill.load(f)
    except (EOFError, pickle.UnpicklingError, AttributeError, ValueError) as e:
        raise MalformedCheckpoint(
            f"Could not decode checkpoint {filepath}: {e}"
        ) from e
    except OSError as e:
        raise IOFailure(f"Could not read checkpoint {filepath}: {e}") from e

    if not isinstance(payload, dict) or FORMAT_VERSION_KEY not in payload:
        raise MalformedCheckpoint(f"{filepath} is not a tunetreg checkpoint.")
    version = payload.pop(FORMAT_VERSION_KEY)
    if version != CHECKPOINT_FORMAT_VERSION:
        raise VersionMismatch(
            f"Checkpoint version {version!r}, expected "
            f"{CHECKPOINT_FORMAT_VERSION!r}."
        )
    try:
        return Checkpoint.from_dict(payload)
    except (KeyError, TypeError, ValidationError) as e:
        raise MalformedCheckpoint(
            f"Checkpoint {filepath} has missing or invalid fields: {e}"
        ) from e
