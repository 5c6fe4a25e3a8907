import logging as log
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from tunetreg.errors import InvalidConfig
from tunetreg.network.losses import local_cc, smoothness_penalty, total_loss
from tunetreg.network.transform import warp_trilinear
from tunetreg.network.transformer import (
    TransformerBlock,
    scaled_dot_attention,
)
from tunetreg.network.tunet import TUNet
from tunetreg.schemas.config import (
    GradcheckConfig,
    LossConfig,
    TransformerBlockConfig,
    TUNetConfig,
)
from tunetreg.schemas.state import GradcheckResult

Closure = Callable[[], torch.Tensor]

DEFAULT_TOLERANCE = 1e-3
FULL_MODEL_TOLERANCE = 1e-2
CHECK_NAMES = [
    "attention",
    "transformer_block",
    "warp",
    "local_cc",
    "smoothness",
    "total_loss",
    "full_model",
]
# Small network for the 16^3 full-model check
GRADCHECK_NETWORK = TUNetConfig(
    level_widths=[4, 8, 8, 8],
    transformer_levels=[1, 2],
    block_patch_sizes=[2, 2],
    block_heads=[2, 2],
)
GRADCHECK_LOSS = LossConfig(cc_window=3)


def _weighted_sum(output: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    # Random projection so that every output entry reaches the scalar
    return (output * weights).sum()


def compare_gradients(
    name: str,
    closure: Closure,
    inputs: Dict[str, torch.Tensor],
    config: GradcheckConfig,
    tolerance: float,
    rng: np.random.Generator,
) -> GradcheckResult:
    """Compare autograd against central differences on a sample of
    entries of every input.

    The error of one entry is |analytic - numeric| divided by the larger
    of their magnitudes, floored at `config.error_floor` so that vanishing
    gradients are compared in absolute terms. The check reports the worst
    sampled entry over every input.

    Args:
        name (str): check name, matched against `inject_sign_flip`.
        closure (Closure): scalar function of `inputs`.
        inputs (Dict[str, torch.Tensor]): float64 leaves to differentiate.
        config (GradcheckConfig): step size, sample count and hooks.
        tolerance (float): pass threshold.
        rng (np.random.Generator): entry sampler.

    Returns:
        GradcheckResult: worst relative error and tolerance.
    """
    tensors = list(inputs.values())
    for tensor in tensors:
        tensor.requires_grad_(True)
    grads = torch.autograd.grad(closure(), tensors, allow_unused=True)
    sign = -1.0 if config.inject_sign_flip == name else 1.0

    worst = 0.0
    with torch.no_grad():
        for tensor, grad in zip(tensors, grads):
            flat = tensor.view(-1)
            size = min(config.samples_per_group, flat.numel())
            index = rng.choice(flat.numel(), size=size, replace=False)
            if grad is None:
                analytic = np.zeros(size)
            else:
                analytic = sign * grad.reshape(-1)[index].cpu().numpy()
            numeric = np.empty(size)
            for j, i in enumerate(index):
                original = float(flat[i])
                flat[i] = original + config.eps
                plus = float(closure())
                flat[i] = original - config.eps
                minus = float(closure())
                flat[i] = original
                numeric[j] = (plus - minus) / (2 * config.eps)
            scale = np.maximum(np.abs(analytic), np.abs(numeric))
            error = np.abs(analytic - numeric) / np.maximum(
                scale, config.error_floor
            )
            worst = max(worst, float(error.max()))
    log.debug(f"Gradient check {name} | max relative error {worst:.3e}")
    return GradcheckResult(
        name=name, max_relative_error=worst, tolerance=tolerance
    )


# ----------------------------------------------------------------------------
# CHECKS
# ----------------------------------------------------------------------------
def _attention_case() -> Tuple[Closure, Dict[str, torch.Tensor]]:
    q, k, v = (torch.randn(1, 2, 5, 3, dtype=torch.float64) for _ in "qkv")
    weights = torch.randn(1, 2, 5, 3, dtype=torch.float64)

    def closure() -> torch.Tensor:
        return _weighted_sum(scaled_dot_attention(q, k, v), weights)

    return closure, {"q": q, "k": k, "v": v}


def _transformer_block_case() -> Tuple[Closure, Dict[str, torch.Tensor]]:
    block = TransformerBlock(
        TransformerBlockConfig(channels=2, patch_size=2, num_heads=2)
    ).double()
    x = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64)
    w_same = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64)
    w_cross = torch.randn(1, 2, 2, 2, 2, dtype=torch.float64)

    def closure() -> torch.Tensor:
        y_same, y_cross = block(x)
        return _weighted_sum(y_same, w_same) + _weighted_sum(y_cross, w_cross)

    inputs = {"x": x}
    inputs.update(dict(block.named_parameters()))
    return closure, inputs


def _warp_case() -> Tuple[Closure, Dict[str, torch.Tensor]]:
    image = torch.rand(1, 1, 6, 6, 6, dtype=torch.float64)
    # Keep samples away from lattice points, where the warp has kinks
    field = torch.rand(1, 3, 6, 6, 6, dtype=torch.float64) * 0.8 + 0.1
    field = field * torch.sign(torch.rand_like(field) - 0.5)
    weights = torch.randn(1, 1, 6, 6, 6, dtype=torch.float64)

    def closure() -> torch.Tensor:
        return _weighted_sum(warp_trilinear(image, field), weights)

    return closure, {"image": image, "field": field}


def _local_cc_case() -> Tuple[Closure, Dict[str, torch.Tensor]]:
    a = torch.rand(1, 1, 6, 6, 6, dtype=torch.float64)
    b = torch.rand(1, 1, 6, 6, 6, dtype=torch.float64)

    def closure() -> torch.Tensor:
        return local_cc(a, b, GRADCHECK_LOSS)

    return closure, {"a": a}


def _smoothness_case() -> Tuple[Closure, Dict[str, torch.Tensor]]:
    field = torch.randn(1, 3, 6, 6, 6, dtype=torch.float64)

    def closure() -> torch.Tensor:
        return smoothness_penalty(field, GRADCHECK_LOSS)

    return closure, {"field": field}


def _total_loss_case() -> Tuple[Closure, Dict[str, torch.Tensor]]:
    moving = torch.rand(1, 1, 8, 8, 8, dtype=torch.float64)
    fixed = torch.rand(1, 1, 8, 8, 8, dtype=torch.float64)
    field = (torch.rand(1, 3, 8, 8, 8, dtype=torch.float64) - 0.5) * 1.6

    def closure() -> torch.Tensor:
        loss, _ = total_loss(moving, fixed, field, GRADCHECK_LOSS)
        return loss

    return closure, {"moving": moving, "field": field}


def _full_model_case() -> Tuple[Closure, Dict[str, torch.Tensor]]:
    model = TUNet(GRADCHECK_NETWORK).double()
    # A zero head blocks every gradient but its own
    torch.nn.init.normal_(model.field_head.weight, std=0.1)
    torch.nn.init.normal_(model.field_head.bias, std=0.1)
    moving = torch.rand(1, 1, 16, 16, 16, dtype=torch.float64)
    fixed = torch.rand(1, 1, 16, 16, 16, dtype=torch.float64)

    def closure() -> torch.Tensor:
        loss, _ = total_loss(
            moving, fixed, model(moving, fixed), GRADCHECK_LOSS
        )
        return loss

    return closure, dict(model.named_parameters())


CASES: Dict[str, Callable[[], Tuple[Closure, Dict[str, torch.Tensor]]]] = {
    "attention": _attention_case,
    "transformer_block": _transformer_block_case,
    "warp": _warp_case,
    "local_cc": _local_cc_case,
    "smoothness": _smoothness_case,
    "total_loss": _total_loss_case,
    "full_model": _full_model_case,
}


def run_gradcheck(
    config: GradcheckConfig = GradcheckConfig(),
    names: Optional[List[str]] = None,
) -> List[GradcheckResult]:
    """Run the finite-difference suites in float64.

    Args:
        config (GradcheckConfig): seed, step, samples, tolerance override
            and the sign-flip hook.
        names (List[str], optional): subset of CHECK_NAMES, default all.

    Returns:
        List[GradcheckResult]: one result per check, in run order.
    """
    names = CHECK_NAMES if names is None else names
    unknown = set(names) - set(CHECK_NAMES)
    if config.inject_sign_flip is not None:
        unknown |= {config.inject_sign_flip} - set(CHECK_NAMES)
    if unknown:
        raise InvalidConfig(f"Unknown gradient checks: {sorted(unknown)}.")

    rng = np.random.default_rng(config.seed)
    results = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        for name in names:
            closure, inputs = CASES[name]()
            default = (
                FULL_MODEL_TOLERANCE
                if name == "full_model"
                else DEFAULT_TOLERANCE
            )
            tolerance = config.tolerance or default
            results.append(
                compare_gradients(
                    name, closure, inputs, config, tolerance, rng
                )
            )
    return results


def format_results(results: List[GradcheckResult]) -> str:
    df = pd.DataFrame(
        [
            {
                "check": r.name,
                "max_relative_error": f"{r.max_relative_error:.3e}",
                "tolerance": f"{r.tolerance:.1e}",
                "status": "pass" if r.passed else "FAIL",
            }
            for r in results
        ]
    )
    return df.to_string(index=False)
