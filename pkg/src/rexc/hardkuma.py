"""Stretched-and-rectified Kumaraswamy ("HardKuma") latent variables.

A Kumaraswamy variable on [0, 1] has the closed-form CDF

    F(x; a, b) = 1 - (1 - x^a)^b,        a, b > 0

and is therefore reparameterizable through its inverse CDF. Stretching the
support to an interval (l, r) with l < 0 < 1 < r and clamping back to [0, 1]
produces a mixed distribution with point masses at exactly 0 and 1 while the
sample stays a differentiable function of (a, b) wherever it is unclipped.
That combination is what lets binary on/off selectors be trained with plain
backpropagation: a selector can be *exactly* zero (or one) for a sampled
step, yet the probability of that event is a smooth function of the
parameters.

All functions below accept floats or torch tensors for the shape arguments
and broadcast; gradients flow through every tensor path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import torch

Scalar = Union[float, torch.Tensor]

# Floor applied when mapping unconstrained head outputs to valid shapes.
SHAPE_FLOOR = 1e-4


@dataclass(frozen=True)
class StretchBounds:
    """Support interval (left, right) that strictly contains [0, 1]."""

    left: float = -0.1
    right: float = 1.1

    def __post_init__(self) -> None:
        if not (self.left < 0.0 < 1.0 < self.right):
            raise ValueError(
                f"stretch bounds must satisfy left < 0 < 1 < right, "
                f"got ({self.left}, {self.right})"
            )

    @property
    def width(self) -> float:
        return self.right - self.left


DEFAULT_BOUNDS = StretchBounds()


@dataclass(frozen=True)
class KumaShape:
    """Shape pair (a, b) of one Kumaraswamy variable; both strictly positive."""

    a: float
    b: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError(f"shape parameters must be finite, got ({self.a}, {self.b})")
        if self.a <= 0.0 or self.b <= 0.0:
            raise ValueError(f"shape parameters must be positive, got ({self.a}, {self.b})")


@dataclass(frozen=True)
class HardKumaSample:
    """One rectified draw plus the uniform noise that produced it."""

    value: float
    source_uniform: float
    clipped_low: bool
    clipped_high: bool


def _as_tensor(x: Scalar) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def kuma_cdf(x: Scalar, a: Scalar, b: Scalar) -> torch.Tensor:
    """CDF of Kuma(a, b) on [0, 1]: 1 - (1 - x^a)^b.

    Raises a domain error for x outside [0, 1] or non-positive shapes.
    """
    x_t, a_t, b_t = _as_tensor(x), _as_tensor(a), _as_tensor(b)
    if bool((x_t < 0).any()) or bool((x_t > 1).any()):
        raise ValueError("kuma_cdf is only defined on [0, 1]")
    _check_shapes(a_t, b_t)
    return 1.0 - (1.0 - x_t**a_t) ** b_t


def kuma_icdf(u: Scalar, a: Scalar, b: Scalar) -> torch.Tensor:
    """Inverse CDF: x = (1 - (1 - u)^(1/b))^(1/a).

    Accepts the closed endpoints u = 0 and u = 1 because the closed form is
    finite there (0 and 1 respectively); raises only if the result is
    non-finite, which happens for u outside [0, 1].
    """
    u_t, a_t, b_t = _as_tensor(u), _as_tensor(a), _as_tensor(b)
    _check_shapes(a_t, b_t)
    x = (1.0 - (1.0 - u_t) ** (1.0 / b_t)) ** (1.0 / a_t)
    if not bool(torch.isfinite(x).all()):
        raise ValueError("kuma_icdf: non-finite result (u outside [0, 1]?)")
    return x


def stretched_sample(
    u: Scalar, a: Scalar, b: Scalar, bounds: StretchBounds = DEFAULT_BOUNDS
) -> torch.Tensor:
    """Rectified sample: clamp(l + (r - l) * icdf(u; a, b), 0, 1).

    Differentiable in (a, b) wherever the pre-clamp value lies in (0, 1);
    the clamp zeroes the gradient exactly on the clipped regions.
    """
    t = bounds.left + bounds.width * kuma_icdf(u, a, b)
    return t.clamp(0.0, 1.0)


def prob_zero(a: Scalar, b: Scalar, bounds: StretchBounds = DEFAULT_BOUNDS) -> torch.Tensor:
    """P(sample == 0): mass of the stretched variable left of 0."""
    x0 = (0.0 - bounds.left) / bounds.width
    return kuma_cdf(x0, a, b)


def prob_one(a: Scalar, b: Scalar, bounds: StretchBounds = DEFAULT_BOUNDS) -> torch.Tensor:
    """P(sample == 1): mass of the stretched variable right of 1."""
    x1 = (1.0 - bounds.left) / bounds.width
    return 1.0 - kuma_cdf(x1, a, b)


def expected_l0(a: Scalar, b: Scalar, bounds: StretchBounds = DEFAULT_BOUNDS) -> torch.Tensor:
    """Differentiable sparsity surrogate P(sample != 0) = 1 - prob_zero."""
    return 1.0 - prob_zero(a, b, bounds)


def hardkuma_sample(
    u: float, shape: KumaShape, bounds: StretchBounds = DEFAULT_BOUNDS
) -> HardKumaSample:
    """Draw one typed sample from a scalar uniform in (0, 1)."""
    if not 0.0 < u < 1.0:
        raise ValueError(f"source uniform must lie strictly in (0, 1), got {u}")
    t = bounds.left + bounds.width * float(kuma_icdf(u, shape.a, shape.b))
    value = min(1.0, max(0.0, t))
    return HardKumaSample(
        value=value,
        source_uniform=u,
        clipped_low=t < 0.0,
        clipped_high=t > 1.0,
    )


def positive_shape(raw: torch.Tensor) -> torch.Tensor:
    """Map unconstrained head outputs to valid shape parameters.

    softplus keeps the transform smooth; the floor guards against collapse
    to zero where the CDF powers become numerically degenerate.
    """
    return torch.nn.functional.softplus(raw) + SHAPE_FLOOR


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if bool((a <= 0).any()) or bool((b <= 0).any()):
        raise ValueError("Kumaraswamy shape parameters must be strictly positive")
