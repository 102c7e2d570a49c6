"""Objective math: negative cosine distance, the symmetrized siamese loss,
feature aggregation, the mixed-branch loss, and the blended total.

Stop-gradient placement is the load-bearing detail throughout: targets are
detached *inside* siam_loss and *after* aggregation for the mixed branch,
so gradients reach the encoder only through the predictor-side paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

AGGREGATION_KINDS = ("maximum", "average", "none")
NONE_BRANCH_POLICIES = ("always_first", "seeded_random")


@dataclass(frozen=True)
class AggregationStrategy:
    """How the two view embeddings combine into the mixed-branch target z_f.

    "maximum" is the element-wise max, "average" the arithmetic mean, and
    "none" adopts a single branch: always z1 under always_first, or a
    per-call seeded coin flip under seeded_random.
    """

    kind: str = "maximum"
    none_branch_policy: str = "always_first"

    def __post_init__(self):
        if self.kind not in AGGREGATION_KINDS:
            raise ConfigError(f"aggregation kind must be one of {AGGREGATION_KINDS}, got {self.kind!r}")
        if self.none_branch_policy not in NONE_BRANCH_POLICIES:
            raise ConfigError(
                f"none_branch_policy must be one of {NONE_BRANCH_POLICIES}, got {self.none_branch_policy!r}")


@dataclass(frozen=True)
class LossBreakdown:
    """Logged scalars for one step. Values are clamped into the cosine
    range [-1, 1] (normalization rounding can overshoot by ~1e-16), and
    `total` is the float64 blend of the clamped branch losses, so
    total == lam*l_siam + (1-lam)*l_mix holds bitwise."""

    l_siam: float
    l_mix: float
    total: float
    lam: float


def neg_cosine(p: Tensor, z: Tensor) -> Tensor:
    """Mean over the batch of -<p/||p||, z/||z||>.

    Differentiable in both arguments; callers that want a stop-gradient
    target pass a detached z (this op never detaches).
    """
    if p.data.shape != z.data.shape:
        raise ShapeError(f"neg_cosine: shapes {p.data.shape} and {z.data.shape} differ")
    batch = p.data.shape[0]
    dots = ad.tensor_sum(ad.l2_normalize(p) * ad.l2_normalize(z))
    return dots * (-1.0 / batch)


def siam_loss(p1, p2, z1, z2, stop_gradient=True) -> Tensor:
    """Symmetrized siamese loss:
    0.5 * D(p1, detach(z2)) + 0.5 * D(p2, detach(z1)).

    `stop_gradient=False` is the collapse ablation: targets stay attached
    to the graph and gradients flow into both sides.
    """
    t2 = z2.detach() if stop_gradient else z2
    t1 = z1.detach() if stop_gradient else z1
    return neg_cosine(p1, t2) * 0.5 + neg_cosine(p2, t1) * 0.5


def aggregate(z1: Tensor, z2: Tensor, strategy: AggregationStrategy, rng=None) -> Tensor:
    """z_f from the two view embeddings. The caller detaches the result
    before feeding mix_loss."""
    if strategy.kind == "maximum":
        return ad.maximum(z1, z2)
    if strategy.kind == "average":
        return (z1 + z2) * 0.5
    if strategy.none_branch_policy == "always_first":
        return z1
    if rng is None:
        raise ConfigError("aggregate: seeded_random branch policy needs an rng")
    return z1 if int(rng.integers(0, 2)) == 0 else z2


def mix_loss(p_m: Tensor, z_f_detached: Tensor) -> Tensor:
    """D(p_m, z_f) where z_f must already carry no gradient."""
    assert not z_f_detached.requires_grad, \
        "mix_loss target must be detached (stopgrad(z_f))"
    return neg_cosine(p_m, z_f_detached)


def total_loss(l_siam: Tensor, l_mix: Tensor, lam: float):
    """Blend: total = lam * l_siam + (1 - lam) * l_mix.

    Returns the differentiable total plus the logged LossBreakdown. At
    lam == 1 the tensor total equals l_siam bitwise (the mixed branch
    contributes an exact zero), and symmetrically at lam == 0.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0,1], got {lam}")
    total = l_siam * lam + l_mix * (1.0 - lam)
    ls = min(max(float(l_siam.data), -1.0), 1.0)
    lm = min(max(float(l_mix.data), -1.0), 1.0)
    return total, LossBreakdown(l_siam=ls, l_mix=lm,
                                total=lam * ls + (1.0 - lam) * lm, lam=lam)
