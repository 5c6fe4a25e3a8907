from pathlib import Path
from typing import Callable, Tuple

import numpy as np
import pytest

from tunetreg.data.synthetic import generate_synthetic_pair
from tunetreg.network.tunet import TUNet, build_model
from tunetreg.schemas.config import (
    LossConfig,
    SyntheticSpec,
    TrainConfig,
    TUNetConfig,
)
from tunetreg.schemas.state import Checkpoint
from tunetreg.schemas.volumes import (
    DisplacementField,
    SegmentationMap,
    Volume,
    VolumePair,
)
from tunetreg.training.checkpoint import checkpoint_from_model

# Fits a 16^3 input: level 1 is 8^3 and level 2 is 4^3, both divisible by 2
SMALL_NETWORK = TUNetConfig(
    level_widths=[4, 8, 8, 8],
    transformer_levels=[1, 2],
    block_patch_sizes=[2, 2],
    block_heads=[2, 2],
)


# Mean unregistered Dice of generate_synthetic_pair(SyntheticSpec(seed=7))
SEED_7_BASELINE_DICE = 0.92339


@pytest.fixture(scope="module")
def seed_7_baseline_dice() -> float:
    return SEED_7_BASELINE_DICE


@pytest.fixture(scope="module")
def small_network() -> TUNetConfig:
    return SMALL_NETWORK


@pytest.fixture(scope="module")
def make_volume() -> Callable[..., Volume]:
    def make(
        shape: Tuple[int, int, int] = (16, 16, 16), seed: int = 0
    ) -> Volume:
        rng = np.random.default_rng(seed)
        return Volume(data=rng.random(shape).astype(np.float32))

    return make


@pytest.fixture(scope="module")
def make_pair(make_volume: Callable[..., Volume]) -> Callable[..., VolumePair]:
    def make(
        shape: Tuple[int, int, int] = (16, 16, 16),
        seed: int = 0,
        num_labels: int = 3,
    ) -> VolumePair:
        rng = np.random.default_rng(seed + 1000)
        moving_seg = rng.integers(0, num_labels + 1, size=shape)
        fixed_seg = rng.integers(0, num_labels + 1, size=shape)
        return VolumePair(
            moving=make_volume(shape, seed),
            fixed=make_volume(shape, seed + 1),
            moving_seg=SegmentationMap(labels=moving_seg.astype(np.int32)),
            fixed_seg=SegmentationMap(labels=fixed_seg.astype(np.int32)),
        )

    return make


@pytest.fixture(scope="module")
def make_synthetic_pair() -> (
    Callable[..., Tuple[VolumePair, DisplacementField]]
):
    def make(
        shape: Tuple[int, int, int] = (16, 16, 16),
        seed: int = 0,
        max_displacement: float = 2.0,
    ) -> Tuple[VolumePair, DisplacementField]:
        spec = SyntheticSpec(
            shape=shape,
            seed=seed,
            max_displacement=max_displacement,
            field_smoothness=3.0,
        )
        return generate_synthetic_pair(spec)

    return make


@pytest.fixture(scope="module")
def make_registration_pair(
    make_synthetic_pair: Callable[..., Tuple[VolumePair, DisplacementField]]
) -> Callable[..., Tuple[VolumePair, DisplacementField]]:
    """Synthetic pair whose moving image is the phantom itself, so that
    warping moving by the ground-truth field reproduces fixed exactly."""

    def make(
        shape: Tuple[int, int, int] = (16, 16, 16), seed: int = 0
    ) -> Tuple[VolumePair, DisplacementField]:
        pair, field = make_synthetic_pair(shape, seed)
        swapped = VolumePair(
            moving=pair.fixed,
            fixed=pair.moving,
            moving_seg=pair.fixed_seg,
            fixed_seg=pair.moving_seg,
        )
        return swapped, field

    return make


@pytest.fixture()
def make_train_config(tmp_path: Path) -> Callable[..., TrainConfig]:
    def make(**overrides: object) -> TrainConfig:
        values = dict(
            epochs=1,
            learning_rate=0.0,
            patch_shape=(16, 16, 16),
            max_rotation_deg=0.0,
            checkpoint_dir=tmp_path / "checkpoints",
            seed=0,
        )
        values.update(overrides)
        return TrainConfig(**values)

    return make


@pytest.fixture()
def make_model() -> Callable[..., TUNet]:
    def make(config: TUNetConfig = SMALL_NETWORK, seed: int = 0) -> TUNet:
        return build_model(config, seed)

    return make


@pytest.fixture()
def make_checkpoint(
    make_model: Callable[..., TUNet], tmp_path: Path
) -> Callable[..., Checkpoint]:
    """Freshly initialised (zero-field) checkpoint."""

    def make(config: TUNetConfig = SMALL_NETWORK, seed: int = 0) -> Checkpoint:
        return checkpoint_from_model(
            make_model(config, seed),
            TrainConfig(checkpoint_dir=tmp_path / "checkpoints"),
            LossConfig(),
        )

    return make
