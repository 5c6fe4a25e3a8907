import pytest
import torch

from tunetreg.errors import (
    IndivisibleChannels,
    IndivisibleShape,
    ShapeMismatch,
)
from tunetreg.network.transformer import (
    ChannelLayerNorm,
    TransformerBlock,
    attention_weights,
    merge_heads,
    patchify,
    scaled_dot_attention,
    split_heads,
    split_heads_transposed,
    unpatchify,
)
from tunetreg.schemas.config import TransformerBlockConfig


@pytest.fixture()
def feature_map() -> torch.Tensor:
    generator = torch.Generator().manual_seed(0)
    return torch.randn(2, 3, 4, 8, 4, generator=generator)


def test_patchify_shape_and_inverse(feature_map: torch.Tensor) -> None:
    seq = patchify(feature_map, 2)
    # N = 2 * 4 * 2 patches, each 2^3 voxels of 3 channels
    assert seq.shape == (2, 16, 24)
    restored = unpatchify(seq, 2, (4, 8, 4))
    assert torch.equal(restored, feature_map)


def test_patchify_layout(feature_map: torch.Tensor) -> None:
    seq = patchify(feature_map, 2)
    # Second patch along the D axis of the first row, channel-major
    expected = feature_map[0, :, 0:2, 0:2, 2:4].reshape(-1)
    assert torch.equal(seq[0, 1], expected)


def test_patchify_errors(feature_map: torch.Tensor) -> None:
    with pytest.raises(IndivisibleShape):
        patchify(feature_map, 3)
    with pytest.raises(ShapeMismatch):
        patchify(feature_map[0], 2)


def test_head_split_and_merge() -> None:
    seq = torch.arange(2 * 5 * 12, dtype=torch.float32).reshape(2, 5, 12)
    heads = split_heads(seq, 3)
    assert heads.shape == (2, 3, 5, 4)
    assert torch.equal(heads[0, 1, 2], seq[0, 2, 4:8])
    assert torch.equal(merge_heads(heads), seq)
    assert torch.equal(
        split_heads_transposed(seq, 3), heads.transpose(-1, -2)
    )
    with pytest.raises(IndivisibleChannels):
        split_heads(seq, 5)


def test_attention_rows_sum_to_one() -> None:
    generator = torch.Generator().manual_seed(1)
    q, k = torch.randn(2, 2, 6, 4, 4, generator=generator).unbind(-1)[:2]
    weights = attention_weights(q, k)
    assert weights.shape == (2, 2, 6, 6)
    assert (weights >= 0).all()
    torch.testing.assert_close(
        weights.sum(dim=-1), torch.ones(2, 2, 6), atol=1e-6, rtol=0
    )


def test_attention_with_equal_scores_averages_values() -> None:
    q = torch.zeros(1, 1, 4, 2)
    v = torch.arange(8, dtype=torch.float32).reshape(1, 1, 4, 2)
    y = scaled_dot_attention(q, q, v)
    torch.testing.assert_close(y, v.mean(dim=2, keepdim=True).expand_as(v))


def test_attention_is_permutation_equivariant() -> None:
    generator = torch.Generator().manual_seed(2)
    q, k, v = torch.randn(3, 1, 2, 5, 4, generator=generator).unbind(0)
    perm = torch.tensor([3, 0, 4, 1, 2])
    y = scaled_dot_attention(q, k, v)
    y_perm = scaled_dot_attention(q[:, :, perm], k[:, :, perm], v[:, :, perm])
    torch.testing.assert_close(y_perm, y[:, :, perm])


def test_attention_shape_errors() -> None:
    q = torch.zeros(1, 2, 4, 3)
    with pytest.raises(ShapeMismatch):
        attention_weights(q, torch.zeros(1, 2, 5, 3))
    with pytest.raises(ShapeMismatch):
        scaled_dot_attention(q, q, torch.zeros(1, 2, 4, 2))


def test_channel_layer_norm() -> None:
    generator = torch.Generator().manual_seed(3)
    x = torch.randn(1, 4, 2, 2, 2, generator=generator) * 5 + 3
    y = ChannelLayerNorm(4)(x)
    torch.testing.assert_close(
        y.mean(dim=1), torch.zeros(1, 2, 2, 2), atol=1e-5, rtol=0
    )


@pytest.mark.parametrize(
    "path_mode, cross_shape",
    [("down", (2, 8, 2, 4, 2)), ("up", (2, 8, 8, 16, 8))],
)
def test_block_output_shapes(path_mode: str, cross_shape: tuple) -> None:
    torch.manual_seed(0)
    config = TransformerBlockConfig(
        channels=8, patch_size=2, num_heads=2, path_mode=path_mode
    )
    block = TransformerBlock(config)
    x = torch.randn(2, 8, 4, 8, 4)
    y_same, y_cross = block(x)
    assert y_same.shape == x.shape
    assert y_cross.shape == cross_shape


def test_block_is_deterministic() -> None:
    config = TransformerBlockConfig(channels=4, patch_size=2, num_heads=2)
    torch.manual_seed(5)
    block = TransformerBlock(config)
    x = torch.randn(1, 4, 4, 4, 4)
    first = block(x)
    second = block(x)
    assert torch.equal(first[0], second[0])
    assert torch.equal(first[1], second[1])


def test_block_rejects_wrong_channels() -> None:
    config = TransformerBlockConfig(channels=4, patch_size=2, num_heads=2)
    block = TransformerBlock(config)
    with pytest.raises(ShapeMismatch):
        block(torch.zeros(1, 3, 4, 4, 4))
    with pytest.raises(IndivisibleShape):
        block(torch.zeros(1, 4, 4, 4, 3))


# ----------------------------------------------------------------------------
# QKV PROJECTION
# ----------------------------------------------------------------------------
def _qkv_block(seed: int = 0) -> TransformerBlock:
    torch.manual_seed(seed)
    config = TransformerBlockConfig(channels=2, patch_size=2, num_heads=2)
    return TransformerBlock(config).double()


def _conv_oracle(
    x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor
) -> torch.Tensor:
    """Direct 3x3x3 convolution with zero padding, one output at a time."""
    _, C, H, W, D = x.shape
    padded = torch.nn.functional.pad(x, (1, 1, 1, 1, 1, 1))
    out = torch.zeros(1, weight.shape[0], H, W, D, dtype=x.dtype)
    for o in range(weight.shape[0]):
        for h in range(H):
            for w in range(W):
                for d in range(D):
                    acc = float(bias[o])
                    for i in range(C):
                        for a in range(3):
                            for b in range(3):
                                for c in range(3):
                                    acc += float(
                                        weight[o, i, a, b, c]
                                        * padded[0, i, h + a, w + b, d + c]
                                    )
                    out[0, o, h, w, d] = acc
    return out


def test_identity_kernel_projects_onto_the_input() -> None:
    block = _qkv_block()
    with torch.no_grad():
        block.to_q.weight.zero_()
        block.to_q.bias.zero_()
        for c in range(2):
            block.to_q.weight[c, c, 1, 1, 1] = 1.0
    x = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64)
    q, _, _ = block.project_qkv(x)
    torch.testing.assert_close(q, x, rtol=0.0, atol=1e-15)


def test_zero_input_with_zero_bias_projects_to_zeros() -> None:
    block = _qkv_block()
    with torch.no_grad():
        for conv in (block.to_q, block.to_k, block.to_v):
            conv.bias.zero_()
    x = torch.zeros(1, 2, 4, 4, 4, dtype=torch.float64)
    for projected in block.project_qkv(x):
        assert not projected.any()


def test_projection_matches_direct_convolution() -> None:
    block = _qkv_block(seed=3)
    generator = torch.Generator().manual_seed(4)
    x = torch.randn(1, 2, 4, 4, 4, generator=generator, dtype=torch.float64)
    with torch.no_grad():
        projected = block.project_qkv(x)
    for conv, result in zip((block.to_q, block.to_k, block.to_v), projected):
        expected = _conv_oracle(x, conv.weight.detach(), conv.bias.detach())
        torch.testing.assert_close(result, expected, rtol=1e-5, atol=1e-10)
