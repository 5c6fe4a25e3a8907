import math
from typing import Tuple

import torch
import torch.nn as nn
from einops import rearrange

from tunetreg.errors import (
    IndivisibleChannels,
    IndivisibleShape,
    ShapeMismatch,
)
from tunetreg.schemas.config import TransformerBlockConfig


# ----------------------------------------------------------------------------
# PATCH AND HEAD RESHAPES
# ----------------------------------------------------------------------------
def patchify(x: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, C, H, W, D) -> (B, N, P^3 * C) with N = HWD / P^3.

    Patches are ordered row-major over (H/P, W/P, D/P) and flattened
    channel-major within a patch.
    """
    if x.dim() != 5:
        raise ShapeMismatch(f"Expected a 5D feature map, got {x.dim()}D.")
    if any(s % patch_size != 0 for s in x.shape[2:]):
        raise IndivisibleShape(
            f"Feature map {tuple(x.shape[2:])} is not divisible by patch "
            f"size {patch_size}."
        )
    return rearrange(
        x,
        "b c (h p1) (w p2) (d p3) -> b (h w d) (c p1 p2 p3)",
        p1=patch_size,
        p2=patch_size,
        p3=patch_size,
    )


def unpatchify(
    seq: torch.Tensor, patch_size: int, spatial_shape: Tuple[int, int, int]
) -> torch.Tensor:
    H, W, D = spatial_shape
    return rearrange(
        seq,
        "b (h w d) (c p1 p2 p3) -> b c (h p1) (w p2) (d p3)",
        h=H // patch_size,
        w=W // patch_size,
        d=D // patch_size,
        p1=patch_size,
        p2=patch_size,
        p3=patch_size,
    )


def _check_heads(seq: torch.Tensor, num_heads: int) -> None:
    if seq.shape[-1] % num_heads != 0:
        raise IndivisibleChannels(
            f"Token length {seq.shape[-1]} is not divisible by {num_heads} "
            f"heads."
        )


def split_heads(seq: torch.Tensor, num_heads: int) -> torch.Tensor:
    """(B, N, k * d_k) -> (B, k, N, d_k)."""
    _check_heads(seq, num_heads)
    return rearrange(seq, "b n (k d) -> b k n d", k=num_heads)


def split_heads_transposed(seq: torch.Tensor, num_heads: int) -> torch.Tensor:
    """(B, N, k * d_k) -> (B, k, d_k, N), the layout of K^T."""
    _check_heads(seq, num_heads)
    return rearrange(seq, "b n (k d) -> b k d n", k=num_heads)


def merge_heads(heads: torch.Tensor) -> torch.Tensor:
    return rearrange(heads, "b k n d -> b n (k d)")


# ----------------------------------------------------------------------------
# ATTENTION
# ----------------------------------------------------------------------------
def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d_k)) over the key axis."""
    if q.dim() != 4 or q.shape != k.shape:
        raise ShapeMismatch(
            f"Q {tuple(q.shape)} and K {tuple(k.shape)} must both be "
            f"(B, k, N, d_k)."
        )
    scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    scores = scores - scores.amax(dim=-1, keepdim=True).detach()
    exp = torch.exp(scores)
    return exp / exp.sum(dim=-1, keepdim=True)


def scaled_dot_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor
) -> torch.Tensor:
    """Y = softmax(Q K^T / sqrt(d_k)) V per batch and head.

    Args:
        q, k, v (torch.Tensor): (B, k, N, d_k) head tensors.

    Returns:
        torch.Tensor: (B, k, N, d_k).
    """
    if v.shape != q.shape:
        raise ShapeMismatch(
            f"V {tuple(v.shape)} does not conform to Q {tuple(q.shape)}."
        )
    return torch.matmul(attention_weights(q, k), v)


# ----------------------------------------------------------------------------
# MODULES
# ----------------------------------------------------------------------------
class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis at every voxel of a 5D map."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = rearrange(x, "b c h w d -> b h w d c")
        x = self.norm(x)
        return rearrange(x, "b h w d c -> b c h w d")


class TransformerBlock(nn.Module):
    """Self-attention over flattened 3D patches with convolutional Q, K, V
    and no position embedding.

    Emits the in-level map LN(X + Y) and a cross-level map at half
    (path_mode "down") or double (path_mode "up") resolution.
    """

    def __init__(self, config: TransformerBlockConfig) -> None:
        super().__init__()
        self.config = config
        C = config.channels
        self.to_q = nn.Conv3d(C, C, kernel_size=3, stride=1, padding=1)
        self.to_k = nn.Conv3d(C, C, kernel_size=3, stride=1, padding=1)
        self.to_v = nn.Conv3d(C, C, kernel_size=3, stride=1, padding=1)
        self.norm_same = ChannelLayerNorm(C)
        self.path: nn.Module
        if config.path_mode == "down":
            self.path = nn.Conv3d(C, C, kernel_size=3, stride=2, padding=1)
        else:
            self.path = nn.ConvTranspose3d(C, C, kernel_size=2, stride=2)
        self.norm_cross = ChannelLayerNorm(C)

    def project_qkv(
        self, x: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if x.dim() != 5 or x.shape[1] != self.config.channels:
            raise ShapeMismatch(
                f"Expected (B, {self.config.channels}, H, W, D), got "
                f"{tuple(x.shape)}."
            )
        return self.to_q(x), self.to_k(x), self.to_v(x)

    def attend(self, x: torch.Tensor) -> torch.Tensor:
        """Attention output reshaped back to x's shape, pre-residual."""
        P = self.config.patch_size
        heads = self.config.num_heads
        q, k, v = (
            split_heads(patchify(t, P), heads) for t in self.project_qkv(x)
        )
        y = merge_heads(scaled_dot_attention(q, k, v))
        return unpatchify(y, P, tuple(x.shape[2:]))  # type: ignore

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        y_same = self.norm_same(x + self.attend(x))
        y_cross = self.norm_cross(self.path(y_same))
        return y_same, y_cross
