"""Latent selection over generated knowledge snippets.

A small MLP conditioned on each snippet's hidden vector and a pooled
task-context vector predicts one HardKuma shape pair per snippet. Sampled
selector values scale the snippet representations before fusion; sparsity
is charged through the expected-L0 relaxation.
"""

from __future__ import annotations

import torch
from torch import nn

from . import hardkuma
from .hardkuma import DEFAULT_BOUNDS, StretchBounds


class KnowledgeSelector(nn.Module):
    def __init__(self, model_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(2 * model_dim, model_dim),
            nn.GELU(),
            nn.Linear(model_dim, 2),
        )

    def predict_selection_params(
        self, snippet_hidden: torch.Tensor, pooled_context: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Shapes a, b of [B, M] from snippets [B, M, d] and context [B, d]."""
        if snippet_hidden.shape[1] < 1:
            raise ValueError("need at least one snippet to select over")
        ctx = pooled_context.unsqueeze(1).expand_as(snippet_hidden)
        raw = self.net(torch.cat([snippet_hidden, ctx], dim=-1))
        return hardkuma.positive_shape(raw[..., 0]), hardkuma.positive_shape(raw[..., 1])


def sample_selection(
    a: torch.Tensor,
    b: torch.Tensor,
    uniforms: torch.Tensor,
    bounds: StretchBounds = DEFAULT_BOUNDS,
) -> torch.Tensor:
    return hardkuma.stretched_sample(uniforms, a, b, bounds)


def mask_knowledge(snippet_hidden: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Scale snippet vector j by selector value j."""
    if snippet_hidden.shape[:-1] != values.shape:
        raise ValueError(
            f"selection mask {tuple(values.shape)} does not match snippets "
            f"{tuple(snippet_hidden.shape[:-1])}"
        )
    return snippet_hidden * values.unsqueeze(-1)


def selection_penalty(
    a: torch.Tensor,
    b: torch.Tensor,
    lambda0_k: float,
    bounds: StretchBounds = DEFAULT_BOUNDS,
) -> torch.Tensor:
    """Per-instance expected-L0 sum over snippets, weighted by lambda0_k."""
    return lambda0_k * hardkuma.expected_l0(a, b, bounds).sum(dim=-1)


def selected_flags(
    a: torch.Tensor, b: torch.Tensor, bounds: StretchBounds = DEFAULT_BOUNDS
) -> torch.Tensor:
    """Deterministic surfacing rule: prob_zero < 0.5, [B, M] bool."""
    return hardkuma.prob_zero(a, b, bounds) < 0.5
