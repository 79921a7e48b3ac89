"""Training losses: InfoNCE, mask-guided attention regulation, attention-
weighted feature regulation, and the class-balanced focal classification loss,
plus a finite-difference gradient-check harness.

All loss functions are pure, differentiable w.r.t. their tensor inputs, and
work in whatever float dtype the inputs carry (tests use float64, training
float32).  Ratio denominators carry a small epsilon so every loss is finite
for any finite input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .data import ClassBalanceTable, MaskPair

EPSILON = 1e-8
UNIT_NORM_TOL = 1e-6


@dataclass
class ContrastiveBatch:
    """2N unit-norm embeddings ordered so rows (2t, 2t+1) are views of sample t."""

    embeddings: Tensor  # (2N, D)
    temperature: float = 0.2

    def validate(self) -> None:
        if self.embeddings.ndim != 2:
            raise ValueError(f"embeddings must be 2-D, got shape {tuple(self.embeddings.shape)}")
        n = self.embeddings.shape[0]
        if n % 2 != 0:
            raise ValueError(f"batch must hold an even number of embeddings, got {n}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        norms = self.embeddings.detach().norm(dim=1)
        worst = float((norms - 1.0).abs().max())
        if worst > UNIT_NORM_TOL:
            raise ValueError(f"embeddings must be unit-norm (max deviation {worst:.3e})")

    @property
    def positive_index(self) -> Tensor:
        """Index of each row's positive view (2t <-> 2t+1)."""
        idx = torch.arange(self.embeddings.shape[0], device=self.embeddings.device)
        return idx ^ 1


@dataclass
class AttentionTap:
    """One backbone stage's features, attention maps and scale-matched masks."""

    features: Tensor  # (C, H, W)
    map_pos: Tensor  # (H, W), values in [0,1]
    map_neg: Tensor  # (H, W), values in [0,1]
    masks: MaskPair
    epsilon: float = EPSILON

    def validate(self) -> None:
        if self.features.ndim != 3:
            raise ValueError(f"features must be (C,H,W), got {tuple(self.features.shape)}")
        h, w = self.features.shape[1:]
        for name, m in (("map_pos", self.map_pos), ("map_neg", self.map_neg)):
            if m.shape != (h, w):
                raise ValueError(f"{name} shape {tuple(m.shape)} != features spatial ({h},{w})")
            if torch.isnan(m).any():
                raise ValueError(f"{name} contains NaN")
            lo, hi = float(m.detach().min()), float(m.detach().max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"{name} values [{lo},{hi}] outside [0,1]")
        if torch.isnan(self.features).any():
            raise ValueError("features contain NaN")
        if (self.masks.height, self.masks.width) != (h, w):
            raise ValueError(f"mask scale ({self.masks.height},{self.masks.width}) != features spatial ({h},{w})")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def mask_tensors(self) -> tuple[Tensor, Tensor]:
        dtype = self.map_pos.dtype
        return (
            torch.as_tensor(self.masks.mask_pos, dtype=dtype, device=self.map_pos.device),
            torch.as_tensor(self.masks.mask_neg, dtype=dtype, device=self.map_pos.device),
        )


@dataclass
class FocalConfig:
    """Focusing exponent plus the per-class effective-number weighting."""

    gamma: float
    balance: ClassBalanceTable

    def validate(self) -> None:
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        self.balance.validate()
        if self.balance.weights is None:
            raise ValueError("balance table has no weights; call class_balance_weights first")


# ---------------------------------------------------------------------------
# Contrastive loss
# ---------------------------------------------------------------------------


def info_nce(batch: ContrastiveBatch) -> Tensor:
    """Mean InfoNCE over all 2N anchors.

    Per anchor i the softmax runs over the other 2N-1 embeddings (self
    excluded, positive included), with dot-product similarities scaled by the
    temperature.
    """
    batch.validate()
    z = batch.embeddings
    n = z.shape[0]
    if n < 4:
        raise ValueError(f"need at least 4 embeddings (2 samples), got {n}")
    logits = (z @ z.T) / batch.temperature
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(eye, float("-inf"))
    log_denom = torch.logsumexp(logits, dim=1)
    pos = logits[torch.arange(n, device=z.device), batch.positive_index]
    return (log_denom - pos).mean()


def similarity_matrix(batch: ContrastiveBatch) -> Tensor:
    """Pairwise dot-product similarities (no temperature scaling)."""
    z = batch.embeddings.detach()
    return z @ z.T


# ---------------------------------------------------------------------------
# Mask-guided attention losses
# ---------------------------------------------------------------------------


def _require_lesion(tap: AttentionTap) -> None:
    if not tap.masks.mask_pos.any():
        raise ValueError("attention losses need a lesion mask; got an all-zero positive mask "
                         "(normal-class samples must be skipped upstream)")


def attention_mask_loss(tap: AttentionTap) -> Tensor:
    """Supervise the two attention maps with the mask pair.

    MSE(map+, mask+) / (MSE(map+, mask-) + eps) + MSE(map-, mask-): the
    positive map is pulled onto the lesion mask and pushed off its complement,
    the negative map is pulled onto the complement.
    """
    tap.validate()
    _require_lesion(tap)
    mask_pos, mask_neg = tap.mask_tensors()
    mse_pp = ((tap.map_pos - mask_pos) ** 2).mean()
    mse_pn = ((tap.map_pos - mask_neg) ** 2).mean()
    mse_nn = ((tap.map_neg - mask_neg) ** 2).mean()
    return mse_pp / (mse_pn + tap.epsilon) + mse_nn


def feature_contrast_loss(tap: AttentionTap) -> Tensor:
    """Pull features toward their positively-attended version, away from the
    negatively-attended one: L1(feat, feat*map+) / (L1(feat, feat*map-) + eps).

    The spatial maps broadcast across all feature channels.
    """
    tap.validate()
    _require_lesion(tap)
    num = (tap.features - tap.features * tap.map_pos).abs().mean()
    den = (tap.features - tap.features * tap.map_neg).abs().mean() + tap.epsilon
    return num / den


def guided_attention_loss(taps: Sequence[AttentionTap]) -> Tensor:
    """Attention plus feature regulation, averaged over the backbone stages."""
    if not 1 <= len(taps) <= 4:
        raise ValueError(f"expected 1-4 taps (one per backbone stage), got {len(taps)}")
    total = sum(attention_mask_loss(t) + feature_contrast_loss(t) for t in taps)
    return total / len(taps)


# ---------------------------------------------------------------------------
# Class-balanced focal classification loss
# ---------------------------------------------------------------------------


def class_balance_weights(counts: np.ndarray | Sequence[int], beta: float) -> np.ndarray:
    """Effective-number class weights (1-beta) / (1-beta^n_c), unnormalized.

    beta = 0 recovers uniform weights (plain focal loss); weights decrease
    strictly with the class count and approach inverse frequency as beta -> 1.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must be in [0,1), got {beta}")
    if np.any(counts < 1):
        raise ValueError(f"every requested class needs count >= 1, got {counts}")
    return (1.0 - beta) / (1.0 - np.power(beta, counts))


def make_focal_config(counts: np.ndarray | Sequence[int], beta: float, gamma: float) -> FocalConfig:
    """Bundle gamma with a balance table whose weights are filled in."""
    counts = np.asarray(counts, dtype=np.int64)
    weights = class_balance_weights(counts, beta)
    table = ClassBalanceTable(counts=counts, beta=beta, weights=weights)
    cfg = FocalConfig(gamma=gamma, balance=table)
    cfg.validate()
    return cfg


def balanced_focal_loss(logits: Tensor, labels: Tensor, config: FocalConfig) -> Tensor:
    """Batch-mean class-balanced focal loss.

    Per sample: -w[y] * (1 - p_y)^gamma * log(p_y) with p the softmax of the
    logits; computed via log-softmax so it is stable for |logit| <= 100.
    gamma = 0 with uniform weights reduces to plain cross-entropy.
    """
    config.validate()
    if logits.ndim != 2:
        raise ValueError(f"logits must be (B, C), got {tuple(logits.shape)}")
    num_classes = logits.shape[1]
    if config.balance.weights.shape[0] != num_classes:
        raise ValueError(f"weight table has {config.balance.weights.shape[0]} classes, logits {num_classes}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"label out of range 0..{num_classes - 1}")
    log_probs = torch.log_softmax(logits, dim=1)
    idx = torch.arange(logits.shape[0], device=logits.device)
    log_pt = log_probs[idx, labels]
    pt = log_pt.exp()
    weights = torch.as_tensor(config.balance.weights, dtype=logits.dtype, device=logits.device)
    per_sample = -weights[labels] * (1.0 - pt) ** config.gamma * log_pt
    return per_sample.mean()


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    non_differentiable: bool = False
    notes: list[str] = field(default_factory=list)

    def __str__(self) -> str:
        lines = [
            f"gradient check: {'PASS' if self.passed else 'FAIL'}",
            f"  max relative error: {self.max_rel_error:.3e} (tolerance {self.tolerance:.1e})",
        ]
        if self.non_differentiable:
            lines.append("  non-differentiable point detected")
        lines.extend(f"  {n}" for n in self.notes)
        return "\n".join(lines)


def gradient_check(
    loss_fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray | Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare autograd gradients against central finite differences.

    Runs in float64.  Per-coordinate error is |analytic - numeric| divided by
    max(|analytic|, |numeric|, 1e-3), so near-zero gradients are compared
    absolutely.  Non-finite gradients are reported, not raised.
    """
    leaves = [
        torch.as_tensor(np.asarray(x), dtype=torch.float64).clone().requires_grad_(True) for x in inputs
    ]
    total = sum(leaf.numel() for leaf in leaves)
    if total > 2000:
        raise ValueError(f"gradient_check is meant for small fixtures; got {total} scalars")
    loss = loss_fn(*leaves)
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)

    max_rel = 0.0
    non_diff = False
    notes: list[str] = []
    with torch.no_grad():
        for leaf_idx, (leaf, grad) in enumerate(zip(leaves, grads)):
            grad_flat = (torch.zeros_like(leaf) if grad is None else grad).reshape(-1)
            flat = leaf.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                f_plus = float(loss_fn(*leaves))
                flat[i] = orig - step
                f_minus = float(loss_fn(*leaves))
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                analytic = float(grad_flat[i])
                if not (math.isfinite(numeric) and math.isfinite(analytic)):
                    non_diff = True
                    notes.append(f"input {leaf_idx} coord {i}: non-finite gradient "
                                 f"(analytic {analytic}, numeric {numeric})")
                    continue
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
                max_rel = max(max_rel, rel)
    passed = (not non_diff) and max_rel < tolerance
    return GradCheckReport(max_rel_error=max_rel, tolerance=tolerance, passed=passed,
                           non_differentiable=non_diff, notes=notes)
