# evidential.py
# does the Dirichlet math: logits -> evidence -> opinion -> vacuity / dissonance

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import gammaln

from errors import InvalidInputError

ArrayLike = Union[np.ndarray, list, tuple]

DEFAULT_LOGIT_CLAMP = 10.0


# -----------------------------
# 1) Evidence and opinions
#    Every function works on a single vector (C,) or a batch (N, C);
#    the last axis is always the class axis.
# -----------------------------
@dataclass(frozen=True)
class DirichletOpinion:
    """
    Subjective-logic opinion backed by a Dirichlet distribution.

    evidence: per-class evidence e >= 0
    alpha:    Dirichlet parameters, alpha = e + 1
    strength: S = sum(alpha)
    beliefs:  b = e / S
    """
    evidence: np.ndarray
    alpha: np.ndarray
    strength: np.ndarray
    beliefs: np.ndarray
    num_classes: int

    def __post_init__(self):
        for name in ("evidence", "alpha", "strength", "beliefs"):
            getattr(self, name).setflags(write=False)


def evidence_from_logits(logits: ArrayLike, clamp: float = DEFAULT_LOGIT_CLAMP) -> np.ndarray:
    """
    Exponential evidence activation: exp(min(logit, clamp)).

    The clamp keeps exp() away from overflow; evidence is strictly positive.
    """
    if clamp <= 0:
        raise InvalidInputError(f"clamp must be > 0, got {clamp}")

    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits must be finite")

    return np.exp(np.minimum(z, clamp))


def opinion_from_evidence(evidence: ArrayLike) -> DirichletOpinion:
    e = np.array(evidence, dtype=np.float64)
    if e.ndim == 0 or e.shape[-1] < 2:
        raise InvalidInputError("evidence needs at least 2 classes on its last axis")
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise InvalidInputError("evidence must be finite and non-negative")

    alpha = e + 1.0
    strength = alpha.sum(axis=-1, keepdims=True)
    beliefs = e / strength

    return DirichletOpinion(
        evidence=e,
        alpha=alpha,
        strength=strength[..., 0],
        beliefs=beliefs,
        num_classes=int(e.shape[-1]),
    )


def opinion_from_logits(logits: ArrayLike, clamp: float = DEFAULT_LOGIT_CLAMP) -> DirichletOpinion:
    """Convenience: evidence_from_logits -> opinion_from_evidence."""
    return opinion_from_evidence(evidence_from_logits(logits, clamp=clamp))


# -----------------------------
# 2) Uncertainty measures
# -----------------------------
def vacuity(op: DirichletOpinion) -> np.ndarray:
    """Lack of evidence: C / S. Returns a scalar for one opinion, (N,) for a batch."""
    return op.num_classes / op.strength


def _balance(b_i: np.ndarray, b_c: np.ndarray) -> np.ndarray:
    # Bal(b_i, b_c) = 1 - |b_i - b_c| / (b_i + b_c) when both are non-zero, else 0
    both = (b_i > 0) & (b_c > 0)
    total = np.where(both, b_i + b_c, 1.0)
    return np.where(both, 1.0 - np.abs(b_i - b_c) / total, 0.0)


def dissonance(op: DirichletOpinion) -> np.ndarray:
    """
    Conflict of evidence between classes.

    Diss = sum_c b_c * sum_{i != c} b_i Bal(b_i, b_c) / sum_{i != c} b_i

    A class term whose denominator is zero contributes 0.
    """
    b = op.beliefs
    # pairwise[..., c, i] = b_i * Bal(b_i, b_c)
    b_c = b[..., :, None]
    b_i = b[..., None, :]
    pairwise = b_i * _balance(b_i, b_c)

    off_diag = ~np.eye(op.num_classes, dtype=bool)
    numerator = np.where(off_diag, pairwise, 0.0).sum(axis=-1)
    denominator = b.sum(axis=-1, keepdims=True) - b

    safe = denominator > 0
    ratio = np.where(safe, numerator / np.where(safe, denominator, 1.0), 0.0)
    return (b * ratio).sum(axis=-1)


def combined_uncertainty(vac: ArrayLike, diss: ArrayLike, beta: float) -> np.ndarray:
    """CU(beta) = beta * vacuity + (1 - beta) * (1 - dissonance)."""
    if not 0.0 <= beta <= 1.0:
        raise InvalidInputError(f"beta must be in [0, 1], got {beta}")

    v = np.asarray(vac, dtype=np.float64)
    d = np.asarray(diss, dtype=np.float64)
    return beta * v + (1.0 - beta) * (1.0 - d)


def predict_class(op: DirichletOpinion) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest index
    return np.argmax(op.alpha, axis=-1)


# -----------------------------
# 3) Density
# -----------------------------
def dirichlet_log_density(p: ArrayLike, alpha: ArrayLike) -> float:
    """
    log Dir(p | alpha) = log Gamma(S) - sum log Gamma(alpha_c) + sum (alpha_c - 1) log p_c
    """
    p = np.asarray(p, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)

    if p.shape != alpha.shape or p.ndim != 1:
        raise InvalidInputError("p and alpha must be vectors of the same length")
    if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-9:
        raise InvalidInputError("p must lie strictly inside the probability simplex")
    if np.any(alpha <= 0):
        raise InvalidInputError("alpha must be > 0")

    log_norm = gammaln(alpha.sum()) - gammaln(alpha).sum()
    return float(log_norm + ((alpha - 1.0) * np.log(p)).sum())
