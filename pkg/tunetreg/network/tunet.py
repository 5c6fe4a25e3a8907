import logging as log
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from tunetreg.errors import ShapeMismatch
from tunetreg.network.transformer import TransformerBlock
from tunetreg.schemas.config import TUNetConfig
from tunetreg.schemas.volumes import DisplacementField, Volume


class ConvReLU(nn.Sequential):
    """3x3x3 convolution, stride 1, followed by ReLU."""

    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__(
            nn.Conv3d(in_channels, out_channels, kernel_size=3, padding=1),
            nn.ReLU(),
        )


class TUNet(nn.Module):
    """UNet with transformer blocks at the inner levels.

    The encoder pools three times (total factor 8). A level hosting a
    transformer block keeps the block's in-level output as its skip
    feature and hands the block's half-resolution output to the next
    level, where it is concatenated with the pooled features. The decoder
    mirrors this with up-path blocks whose double-resolution output joins
    the concatenation one level below. A zero-initialised 1x1x1 head maps
    the last features to a 3-channel displacement field.
    """

    def __init__(self, config: TUNetConfig) -> None:
        super().__init__()
        self.config = config
        widths = config.level_widths
        levels = config.levels

        self.input_convs = nn.Sequential(
            ConvReLU(config.in_channels, widths[0]),
            ConvReLU(widths[0], widths[0]),
        )
        self.pool = nn.MaxPool3d(kernel_size=2, stride=2)
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")

        self.encoder_convs = nn.ModuleDict()
        self.encoder_blocks = nn.ModuleDict()
        for level in range(1, levels + 1):
            cross = widths[level - 1] if self._has_block(level - 1) else 0
            self.encoder_convs[str(level)] = ConvReLU(
                widths[level - 1] + cross, widths[level]
            )
            block = config.block_config(level, "down")
            if block is not None:
                self.encoder_blocks[str(level)] = TransformerBlock(block)

        self.up_convs = nn.ModuleDict()
        self.decoder_convs = nn.ModuleDict()
        self.decoder_blocks = nn.ModuleDict()
        for level in reversed(range(levels)):
            self.up_convs[str(level)] = ConvReLU(
                widths[level + 1], widths[level]
            )
            cross = widths[level + 1] if self._has_block(level + 1) else 0
            in_channels = 2 * widths[level] + cross
            if level == 0:
                self.decoder_convs[str(level)] = nn.Sequential(
                    ConvReLU(in_channels, widths[0]),
                    ConvReLU(widths[0], widths[0]),
                )
            else:
                self.decoder_convs[str(level)] = ConvReLU(
                    in_channels, widths[level]
                )
            block = config.block_config(level, "up")
            if block is not None:
                self.decoder_blocks[str(level)] = TransformerBlock(block)

        self.field_head = nn.Conv3d(widths[0], 3, kernel_size=1)
        nn.init.zeros_(self.field_head.weight)
        nn.init.zeros_(self.field_head.bias)

    def _has_block(self, level: int) -> bool:
        return level in self.config.transformer_levels

    def _check_input(self, moving: torch.Tensor, fixed: torch.Tensor) -> None:
        if moving.dim() != 5 or moving.shape[1] != 1:
            raise ShapeMismatch(
                f"Expected (B, 1, H, W, D) inputs, got {tuple(moving.shape)}."
            )
        if moving.shape != fixed.shape:
            raise ShapeMismatch(
                f"Moving {tuple(moving.shape)} and fixed "
                f"{tuple(fixed.shape)} differ."
            )
        self.config.check_input_shape(tuple(moving.shape[2:]))  # type: ignore

    def _encode(
        self, x: torch.Tensor
    ) -> Tuple[List[torch.Tensor], Optional[torch.Tensor]]:
        features = [self.input_convs(x)]
        cross: Optional[torch.Tensor] = None
        for level in range(1, self.config.levels + 1):
            pooled = self.pool(features[-1])
            if cross is not None:
                pooled = torch.cat([pooled, cross], dim=1)
            feature = self.encoder_convs[str(level)](pooled)
            cross = None
            if str(level) in self.encoder_blocks:
                feature, cross = self.encoder_blocks[str(level)](feature)
            features.append(feature)
        return features, cross

    def encode(
        self, moving: torch.Tensor, fixed: torch.Tensor
    ) -> List[torch.Tensor]:
        """Skip features per level, input level first and bottleneck last."""
        self._check_input(moving, fixed)
        features, _ = self._encode(torch.cat([moving, fixed], dim=1))
        return features

    def forward(
        self, moving: torch.Tensor, fixed: torch.Tensor
    ) -> torch.Tensor:
        """(B, 1, H, W, D) pair -> (B, 3, H, W, D) displacement in voxels."""
        self._check_input(moving, fixed)
        features, _ = self._encode(torch.cat([moving, fixed], dim=1))
        decoded = features[-1]
        cross: Optional[torch.Tensor] = None
        for level in reversed(range(self.config.levels)):
            up = self.up_convs[str(level)](self.upsample(decoded))
            parts = [up, features[level]]
            if cross is not None:
                parts.append(cross)
            decoded = self.decoder_convs[str(level)](torch.cat(parts, dim=1))
            cross = None
            if str(level) in self.decoder_blocks:
                decoded, cross = self.decoder_blocks[str(level)](decoded)
        return self.field_head(decoded)


def build_model(config: TUNetConfig, seed: int = 0) -> TUNet:
    """Build a TUNet whose initial weights depend only on (config, seed)
    and leave the global RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TUNet(config)
    log.debug(
        f"Built TUNet | seed {seed} | {parameter_count(model)} parameters"
    )
    return model


def parameter_count(
    params: Union[nn.Module, Dict[str, torch.Tensor], Iterable[torch.Tensor]]
) -> int:
    if isinstance(params, nn.Module):
        tensors: Iterable[torch.Tensor] = params.parameters()
    elif isinstance(params, dict):
        tensors = params.values()
    else:
        tensors = params
    return int(sum(t.numel() for t in tensors))


def state_arrays(model: nn.Module) -> Dict[str, np.ndarray]:
    """Copy of the model state as numpy arrays, in state_dict order."""
    return {
        name: tensor.detach().cpu().numpy().copy()
        for name, tensor in model.state_dict().items()
    }


def predict_field(
    model: TUNet, moving: Volume, fixed: Volume
) -> DisplacementField:
    """Gradient-free whole-volume forward pass."""
    if moving.shape != fixed.shape:
        raise ShapeMismatch(
            f"Moving {moving.shape} and fixed {fixed.shape} differ."
        )
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            field = model(moving.to_tensor(), fixed.to_tensor())
    finally:
        model.train(was_training)
    return DisplacementField.from_tensor(field)
