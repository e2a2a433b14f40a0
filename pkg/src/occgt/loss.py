"""Focal loss for binary occupancy classification, with its exact gradient.

For predicted probabilities ``P`` and binary targets ``T`` of shape
(m, D, H, W), with n = D*H*W::

    loss = -(1/m)(1/n) sum_ij alpha_t (1 - P_t)^gamma log(P_t)

where ``P_t = P, alpha_t = alpha`` on occupied voxels and
``P_t = 1 - P, alpha_t = 1 - alpha`` on free voxels. Probabilities are
clamped to ``[clamp_eps, 1 - clamp_eps]`` first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ValidationError


class FocalMode(str, Enum):
    STANDARD = "standard"
    PAPER_LITERAL = "paper_literal"


@dataclass(frozen=True)
class FocalLossParams:
    """Weighting for the focal loss.

    ``standard`` mode needs ``0 < alpha < 1``. ``paper_literal`` accepts any
    alpha, so with alpha = 2 the free-voxel weight ``1 - alpha`` is -1 and the
    loss can go negative; it exists to evaluate the (alpha=2, gamma=0.25)
    setting verbatim.
    """

    alpha: float = 0.25
    gamma: float = 2.0
    clamp_eps: float = 1e-7
    mode: FocalMode = FocalMode.STANDARD

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", FocalMode(self.mode))
        if not all(math.isfinite(v) for v in (self.alpha, self.gamma, self.clamp_eps)):
            raise ValidationError("focal loss parameters must be finite")
        if self.gamma < 0:
            raise ValidationError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.clamp_eps < 0.5:
            raise ValidationError(f"clamp_eps must be in (0, 0.5), got {self.clamp_eps}")
        if self.mode is FocalMode.STANDARD and not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"standard mode needs alpha in (0, 1), got {self.alpha}")

    @classmethod
    def paper_literal(cls, clamp_eps: float = 1e-7) -> FocalLossParams:
        return cls(alpha=2.0, gamma=0.25, clamp_eps=clamp_eps, mode=FocalMode.PAPER_LITERAL)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "gamma": self.gamma, "clamp_eps": self.clamp_eps, "mode": self.mode.value}


def _prepare(P, T, params: FocalLossParams):
    P = np.asarray(P, dtype=np.float64)
    T = np.asarray(getattr(T, "bits", T))
    if P.shape != T.shape:
        raise ValidationError(f"prediction shape {P.shape} does not match target shape {T.shape}")
    if P.ndim != 4:
        raise ValidationError(f"expected (m, D, H, W) tensors, got {P.ndim} dims")
    if not np.all(np.isfinite(P)):
        raise ValidationError("predictions contain non-finite values")
    occupied = T.astype(bool)
    eps = params.clamp_eps
    p = np.clip(P, eps, 1.0 - eps)
    p_t = np.where(occupied, p, 1.0 - p)
    alpha_t = np.where(occupied, params.alpha, 1.0 - params.alpha)
    return P, occupied, p_t, alpha_t


def focal_loss(P, T, params: FocalLossParams = FocalLossParams()) -> float:
    """Mean focal loss over all m*n voxels (natural log, float64 accumulation)."""
    _, _, p_t, alpha_t = _prepare(P, T, params)
    terms = alpha_t * (1.0 - p_t) ** params.gamma * np.log(p_t)
    # np.sum is a fixed pairwise tree for a given shape, so repeated runs are bit-identical.
    return float(-np.sum(terms) / terms.size)


def clamp_active(P, params: FocalLossParams) -> np.ndarray:
    """Mask of entries where clamping changes the value (zero-gradient region)."""
    P = np.asarray(P, dtype=np.float64)
    return (P < params.clamp_eps) | (P > 1.0 - params.clamp_eps)


def focal_loss_grad(P, T, params: FocalLossParams = FocalLossParams()) -> np.ndarray:
    """d(loss)/dP, same shape as ``P``; exactly zero where clamping is active."""
    P, occupied, p_t, alpha_t = _prepare(P, T, params)
    g = params.gamma
    q = 1.0 - p_t
    # d/dp_t of (1 - p_t)^g log p_t; the g*q^(g-1) term vanishes for g = 0
    pow_term = g * q ** (g - 1.0) if g != 0 else 0.0
    d_term = q**g / p_t - pow_term * np.log(p_t)
    sign = np.where(occupied, 1.0, -1.0)
    grad = -alpha_t * d_term * sign / P.size
    grad[clamp_active(P, params)] = 0.0
    return grad
