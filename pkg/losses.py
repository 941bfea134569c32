# losses.py
# training objectives: evidential cross-entropy, evidential KL, distillation, and the weighted sum

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import torch
import torch.nn.functional as F

from errors import InvalidInputError

Number = Union[float, torch.Tensor]


@dataclass(frozen=True)
class LossWeights:
    """lambda1 * L_ECE + lambda2 * L_EKL + lambda3 * L_KD"""
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 0.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise InvalidInputError(f"{name} must be finite and >= 0, got {value}")


@dataclass(frozen=True)
class KDConfig:
    temperature: float = 2.0
    old_class_count: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise InvalidInputError(f"temperature must be > 0, got {self.temperature}")
        if self.old_class_count < 0:
            raise InvalidInputError("old_class_count must be >= 0")


def evidence_activation(logits: torch.Tensor, clamp: float = 10.0) -> torch.Tensor:
    """Differentiable twin of evidential.evidence_from_logits."""
    return torch.exp(torch.clamp(logits, max=clamp))


def _check_pair(alpha: torch.Tensor, y: torch.Tensor) -> None:
    if alpha.dim() != 2 or alpha.shape != y.shape:
        raise InvalidInputError(
            f"alpha and y must both be (N, C) with matching shapes, got {tuple(alpha.shape)} and {tuple(y.shape)}"
        )


# -----------------------------
# 1) Evidential objectives
# -----------------------------
def ece_loss(alpha: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """
    Evidential cross-entropy, batch mean of sum_j y_ij (log S_i - log alpha_ij).

    Args:
        alpha: (N, C) Dirichlet parameters, alpha >= 1
        y: (N, C) one-hot targets
    """
    _check_pair(alpha, y)
    strength = alpha.sum(dim=1, keepdim=True)
    per_sample = (y * (torch.log(strength) - torch.log(alpha))).sum(dim=1)
    return per_sample.mean()


def ekl_loss(
    alpha: torch.Tensor,
    y: torch.Tensor,
    class_mask: Optional[torch.Tensor] = None,
    restrict: bool = True,
) -> torch.Tensor:
    """
    KL[Dir(p | alpha_tilde) || Dir(p | 1)] with misleading-evidence removal
    alpha_tilde = y + (1 - y) * alpha.

    class_mask selects the coordinates the regularizer looks at (all classes on
    the first task, only the new classes afterwards). With restrict=True the
    Dirichlet lives on the masked coordinates only; with restrict=False the
    unmasked coordinates are pinned to 1 and the KL is taken over all classes.
    """
    _check_pair(alpha, y)
    num_classes = alpha.shape[1]
    if class_mask is None:
        class_mask = torch.ones(num_classes, dtype=torch.bool, device=alpha.device)
    class_mask = class_mask.to(dtype=torch.bool, device=alpha.device)
    if class_mask.shape != (num_classes,):
        raise InvalidInputError("class_mask must have one entry per class")
    if int(class_mask.sum()) < 2:
        raise InvalidInputError("class_mask must select at least 2 classes")

    if alpha.shape[0] == 0:
        return alpha.sum() * 0.0

    alpha_tilde = y + (1.0 - y) * alpha
    if restrict:
        alpha_tilde = alpha_tilde[:, class_mask]
    else:
        alpha_tilde = torch.where(class_mask, alpha_tilde, torch.ones_like(alpha_tilde))

    k = alpha_tilde.shape[1]
    strength = alpha_tilde.sum(dim=1, keepdim=True)
    log_norm = (
        torch.lgamma(strength.squeeze(1))
        - math.lgamma(k)
        - torch.lgamma(alpha_tilde).sum(dim=1)
    )
    digamma_term = ((alpha_tilde - 1.0) * (torch.digamma(alpha_tilde) - torch.digamma(strength))).sum(dim=1)
    return (log_norm + digamma_term).mean()


# -----------------------------
# 2) Knowledge distillation
# -----------------------------
def kd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor, cfg: KDConfig) -> torch.Tensor:
    """
    KL(p_teacher || p_student) over the first C_old logits, both softened by tau.
    No tau^2 rescaling.
    """
    c_old = cfg.old_class_count
    if c_old == 0:
        raise InvalidInputError("kd_loss needs old_class_count > 0 (undefined on the first task)")
    if student_logits.shape[1] < c_old or teacher_logits.shape[1] < c_old:
        raise InvalidInputError("logits must cover at least old_class_count classes")

    log_p_s = F.log_softmax(student_logits[:, :c_old] / cfg.temperature, dim=1)
    log_p_t = F.log_softmax(teacher_logits[:, :c_old] / cfg.temperature, dim=1)
    per_sample = (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=1)
    return per_sample.mean()


def total_loss(ece: Number, ekl: Number, kd: Number, w: LossWeights) -> Number:
    return w.lambda1 * ece + w.lambda2 * ekl + w.lambda3 * kd
