from typing import NamedTuple, Tuple, Union

import torch
import torch.nn.functional as F

from tunetreg.errors import ShapeMismatch
from tunetreg.network.transform import warp_trilinear
from tunetreg.schemas.config import LossConfig
from tunetreg.schemas.state import LossRecord
from tunetreg.schemas.volumes import DisplacementField, Volume


class LossTerms(NamedTuple):
    total: torch.Tensor
    cc: torch.Tensor
    smooth: torch.Tensor

    def to_record(self, step: int) -> LossRecord:
        return LossRecord(
            step=step,
            total=float(self.total.detach()),
            cc=float(self.cc.detach()),
            smooth=float(self.smooth.detach()),
        )


def _image_tensor(image: Union[Volume, torch.Tensor]) -> torch.Tensor:
    if isinstance(image, Volume):
        return image.to_tensor()
    return image


def _field_tensor(
    field: Union[DisplacementField, torch.Tensor]
) -> torch.Tensor:
    if isinstance(field, DisplacementField):
        return field.to_tensor()
    return field


def _window_sum(x: torch.Tensor, window: Tuple[int, int, int]) -> torch.Tensor:
    # Zero padding makes boundary windows sum over the clipped region only
    kernel = torch.ones((1, 1, *window), dtype=x.dtype, device=x.device)
    padding = tuple(w // 2 for w in window)
    return F.conv3d(x, kernel, padding=padding)


# ----------------------------------------------------------------------------
# SIMILARITY
# ----------------------------------------------------------------------------
def local_cc(
    a: Union[Volume, torch.Tensor],
    b: Union[Volume, torch.Tensor],
    config: LossConfig = LossConfig(),
) -> torch.Tensor:
    """Sum over voxels of the squared correlation inside the window
    centred on each voxel.

    For a window with n voxels the summand is
    (sum(AB) - sum(A) sum(B) / n)^2 / (var(A) var(B) + epsilon), where the
    variances are un-normalised sums of squared deviations. Windows are
    clipped at the volume boundary.

    Args:
        a, b (Volume | torch.Tensor): images, tensors shaped
            (B, 1, H, W, D).
        config (LossConfig): window and epsilon.

    Returns:
        torch.Tensor: scalar in [0, |Omega|], averaged over the batch.
    """
    a, b = _image_tensor(a), _image_tensor(b)
    if a.shape != b.shape or a.dim() != 5:
        raise ShapeMismatch(
            f"local_cc needs equal (B, 1, H, W, D) inputs, got "
            f"{tuple(a.shape)} and {tuple(b.shape)}."
        )
    window = config.cc_window
    if a.shape[1] != 1:
        a = a.reshape(-1, 1, *a.shape[2:])
        b = b.reshape(-1, 1, *b.shape[2:])

    count = _window_sum(torch.ones_like(a[:1]), window)
    sum_a = _window_sum(a, window)
    sum_b = _window_sum(b, window)
    sum_aa = _window_sum(a * a, window)
    sum_bb = _window_sum(b * b, window)
    sum_ab = _window_sum(a * b, window)

    cross = sum_ab - sum_a * sum_b / count
    var_a = (sum_aa - sum_a * sum_a / count).clamp(min=0)
    var_b = (sum_bb - sum_b * sum_b / count).clamp(min=0)
    # Cauchy-Schwarz bound, otherwise lost to rounding on flat windows
    cross_sq = torch.minimum(cross * cross, var_a * var_b)
    cc = cross_sq / (var_a * var_b + config.epsilon)
    return cc.flatten(1).sum(dim=1).mean()


# ----------------------------------------------------------------------------
# REGULARISATION
# ----------------------------------------------------------------------------
def _forward_difference(u: torch.Tensor, dim: int) -> torch.Tensor:
    """Forward difference along `dim`, one-sided backward at the last
    index."""
    diff = torch.diff(u, dim=dim)
    last = diff.narrow(dim, diff.shape[dim] - 1, 1)
    return torch.cat([diff, last], dim=dim)


def spatial_jacobian(field: torch.Tensor) -> torch.Tensor:
    """(B, 3, H, W, D) displacement -> (B, 3, 3, H, W, D) with entry
    [:, c, a] = d u_c / d x_a."""
    if field.dim() != 5 or field.shape[1] != 3:
        raise ShapeMismatch(
            f"Expected a (B, 3, H, W, D) field, got {tuple(field.shape)}."
        )
    if any(s < 2 for s in field.shape[2:]):
        raise ShapeMismatch("Field dims must be >= 2 to difference.")
    return torch.stack(
        [_forward_difference(field, dim) for dim in (2, 3, 4)], dim=2
    )


def smoothness_penalty(
    field: Union[DisplacementField, torch.Tensor],
    config: LossConfig = LossConfig(),
) -> torch.Tensor:
    """Sum over voxels of the norm of the spatial Jacobian.

    The Jacobian is that of u unless `config.penalize_deformation` is set,
    in which case the identity is added to obtain the Jacobian of
    phi = p + u.
    """
    jacobian = spatial_jacobian(_field_tensor(field))
    if config.penalize_deformation:
        eye = torch.eye(3, dtype=jacobian.dtype, device=jacobian.device)
        jacobian = jacobian + eye.reshape(1, 3, 3, 1, 1, 1)
    entries = jacobian.flatten(1, 2)
    if config.jacobian_norm == "l1":
        norm = entries.abs().sum(dim=1)
    else:
        norm = torch.linalg.vector_norm(entries, dim=1)
    return norm.flatten(1).sum(dim=1).mean()


# ----------------------------------------------------------------------------
# OBJECTIVE
# ----------------------------------------------------------------------------
def total_loss(
    moving: torch.Tensor,
    fixed: torch.Tensor,
    field: torch.Tensor,
    config: LossConfig = LossConfig(),
) -> Tuple[torch.Tensor, LossTerms]:
    """-CC(moving o phi, fixed) + lambda * smoothness(u).

    Returns:
        Tuple[torch.Tensor, LossTerms]: the scalar loss and its
            components for logging.
    """
    if moving.shape != fixed.shape:
        raise ShapeMismatch(
            f"Moving {tuple(moving.shape)} and fixed {tuple(fixed.shape)} "
            f"differ."
        )
    warped = warp_trilinear(moving, field)
    cc = local_cc(warped, fixed, config)
    smooth = smoothness_penalty(field, config)
    total = -cc + config.smoothness_weight * smooth
    return total, LossTerms(total=total, cc=cc, smooth=smooth)
