"""Latent extractive-rationale selection over input units.

A two-output linear head on the task encoder's contextual vectors predicts
the HardKuma shape pair of one binary selector per input unit. Sampled
selector values scale the unit's content embedding in downstream queries;
sparsity is charged through the expected-L0 relaxation and fragmentation
through a fused-Lasso term on the sampled values (adjacent differences
have no tractable closed-form expectation).
"""

from __future__ import annotations

import torch
from torch import nn

from . import hardkuma
from .hardkuma import DEFAULT_BOUNDS, StretchBounds

# Shape forced onto masked units: prob_zero ~ 0.99975, so padding is never
# selected and contributes nothing to penalties or queries.
_MASKED_A = hardkuma.SHAPE_FLOOR
_MASKED_B = 1.0


class RationaleExtractor(nn.Module):
    """Per-unit selector-parameter head."""

    def __init__(self, model_dim: int):
        super().__init__()
        self.head = nn.Linear(model_dim, 2)

    def predict_selector_params(
        self, context: torch.Tensor, mask: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Map contextual vectors [B, N, d] to shape tensors a, b of [B, N]."""
        raw = self.head(context)
        a = hardkuma.positive_shape(raw[..., 0])
        b = hardkuma.positive_shape(raw[..., 1])
        a = torch.where(mask, a, torch.full_like(a, _MASKED_A))
        b = torch.where(mask, b, torch.full_like(b, _MASKED_B))
        return a, b


def sample_rationale(
    a: torch.Tensor,
    b: torch.Tensor,
    uniforms: torch.Tensor,
    mask: torch.Tensor,
    bounds: StretchBounds = DEFAULT_BOUNDS,
) -> torch.Tensor:
    """Reparameterized selector values in [0, 1]; exactly 0 at masked units."""
    values = hardkuma.stretched_sample(uniforms, a, b, bounds)
    return values * mask.to(values.dtype)


def soft_query(embedded: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Scale each content row by its selector value."""
    if embedded.shape[:-1] != values.shape:
        raise ValueError(
            f"mask length {tuple(values.shape)} does not match embeddings "
            f"{tuple(embedded.shape[:-1])}"
        )
    return embedded * values.unsqueeze(-1)


def rationale_penalties(
    a: torch.Tensor,
    b: torch.Tensor,
    values: torch.Tensor,
    mask: torch.Tensor,
    lambda0: float,
    lambda1: float,
    bounds: StretchBounds = DEFAULT_BOUNDS,
    l1_on_samples: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-instance (L1, fused-Lasso) terms, each summed over real units.

    The L1 term defaults to the expected-L0 relaxation; `l1_on_samples`
    switches to penalizing the sampled values directly (zero gradient at
    clipped samples, kept for comparison).
    """
    fmask = mask.to(values.dtype)
    if l1_on_samples:
        per_unit = values
    else:
        per_unit = hardkuma.expected_l0(a, b, bounds)
    l1 = lambda0 * (per_unit * fmask).sum(dim=-1)
    pair_mask = fmask[..., :-1] * fmask[..., 1:]
    fused = lambda1 * ((values[..., :-1] - values[..., 1:]).abs() * pair_mask).sum(dim=-1)
    return l1, fused


def expected_l0_per_instance(
    a: torch.Tensor,
    b: torch.Tensor,
    mask: torch.Tensor,
    bounds: StretchBounds = DEFAULT_BOUNDS,
) -> torch.Tensor:
    return (hardkuma.expected_l0(a, b, bounds) * mask.to(a.dtype)).sum(dim=-1)


def hard_rationale(
    a: torch.Tensor,
    b: torch.Tensor,
    mask: torch.Tensor,
    bounds: StretchBounds = DEFAULT_BOUNDS,
) -> torch.Tensor:
    """Deterministic inference-time selection: prob_zero < 0.5, [B, N] bool."""
    return (hardkuma.prob_zero(a, b, bounds) < 0.5) & mask


def selected_indices(flags: torch.Tensor) -> list[int]:
    """Sorted unit indices from a single instance's boolean selection row."""
    return torch.nonzero(flags, as_tuple=False).flatten().tolist()
