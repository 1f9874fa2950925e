"""Gram-matrix domain discrepancy, semantic consistency and the combined objective."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .autodiff import Tensor, frobenius_norm, matmul
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class LossWeights:
    lambda_dis: float = 1.0
    lambda_sem: float = 1.0

    def __post_init__(self):
        for name in ("lambda_dis", "lambda_sem"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and non-negative, got {value}")


def gram_matrix(f: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C, C) channel inner products divided by C*H*W."""
    if f.ndim != 4:
        raise DimensionError(f"gram_matrix expects (B, C, H, W), got {f.shape}")
    B, C, H, W = f.shape
    flat = f.reshape(B, C, H * W)
    return matmul(flat, flat.swap_last()) * (1.0 / (C * H * W))


def discrepancy(taps_o: Sequence[Tensor], taps_p: Sequence[Tensor]) -> Tensor:
    """Batch mean of the summed per-layer Frobenius distances between Gram matrices.

    Non-negative; the discrepancy *loss* that the perturbation maximizes is
    the negation of this value.
    """
    if len(taps_o) != len(taps_p):
        raise DimensionError(f"{len(taps_o)} original taps vs {len(taps_p)} perturbed taps")
    if not taps_o:
        raise DimensionError("discrepancy needs at least one tap layer")
    total = None
    for k, (a, b) in enumerate(zip(taps_o, taps_p)):
        if a.shape != b.shape:
            raise DimensionError(f"tap {k}: shapes differ {a.shape} vs {b.shape}")
        per_sample = frobenius_norm(gram_matrix(a) - gram_matrix(b), axis=(1, 2))
        total = per_sample if total is None else total + per_sample
    return total.mean()


def semantic_loss(out_o: Tensor, out_p: Tensor) -> Tensor:
    """Batch mean of the squared L2 distance between the two streams' outputs.

    Pass classifier logits (default variant) or pooled features.
    """
    if out_o.shape != out_p.shape:
        raise DimensionError(f"semantic_loss shapes differ: {out_o.shape} vs {out_p.shape}")
    if out_o.ndim != 2:
        raise DimensionError(f"semantic_loss expects (B, D) outputs, got {out_o.shape}")
    diff = out_o - out_p
    return (diff * diff).sum(axis=1).mean()


def total_loss(cls1, cls2, D, sem, w: LossWeights):
    """``cls1 + cls2 - lambda_dis * D + lambda_sem * sem``; used for logging only."""
    return cls1 + cls2 + (-D) * w.lambda_dis + sem * w.lambda_sem
