# ood_scores.py
# per-sample in-distribution confidence scores: posthoc baselines and evidential uncertainty
#
# Sign convention everywhere: higher score = more in-distribution.

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import log_softmax, logsumexp, softmax

from backbone import EvidentialClassifier, WeightNorms, bias_corrected_logits
from errors import InvalidInputError
from evidential import (
    DEFAULT_LOGIT_CLAMP,
    combined_uncertainty,
    dissonance,
    opinion_from_logits,
    vacuity,
)

METHOD_REGISTRY: Dict[str, str] = {
    "msp": "Maximum softmax probability",
    "odin": "ODIN: temperature scaling + input perturbation",
    "energy": "Negative free energy",
    "entropy": "Negative softmax entropy",
    "msp_bc": "MSP on weight-norm bias-corrected logits",
    "cedl_vacuity": "Negative vacuity",
    "cedl_dissonance": "1 - dissonance (low dissonance = IND)",
    "cedl_dissonance_inv": "Dissonance (high dissonance = IND)",
    "cedl_combined": "Negative combined uncertainty CU(beta)",
}

EVIDENTIAL_KINDS = {
    "vacuity": "cedl_vacuity",
    "dissonance": "cedl_dissonance",
    "dissonance_inv": "cedl_dissonance_inv",
    "combined": "cedl_combined",
}

ODIN_TEMPERATURE = 1000.0
ODIN_EPSILON = 0.0014
ENERGY_TEMPERATURE = 1.0


@dataclass(frozen=True)
class ScoreSet:
    scores: np.ndarray
    method_id: str
    task_id: int = 0

    def __post_init__(self):
        if self.method_id not in METHOD_REGISTRY:
            raise InvalidInputError(f"Unknown score method '{self.method_id}'")
        if not np.all(np.isfinite(self.scores)):
            raise InvalidInputError(f"{self.method_id} produced non-finite scores")


def _as_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise InvalidInputError("logits must be a (N, C) array")
    return z


# -----------------------------
# 1) Posthoc baselines
# -----------------------------
def msp_score(logits, task_id: int = 0) -> ScoreSet:
    probs = softmax(_as_logits(logits), axis=1)
    return ScoreSet(probs.max(axis=1), "msp", task_id)


def energy_score(logits, temperature: float = ENERGY_TEMPERATURE, task_id: int = 0) -> ScoreSet:
    """T * logsumexp(logits / T)"""
    if temperature <= 0:
        raise InvalidInputError("temperature must be > 0")
    z = _as_logits(logits)
    return ScoreSet(temperature * logsumexp(z / temperature, axis=1), "energy", task_id)


def entropy_score(logits, task_id: int = 0) -> ScoreSet:
    log_p = log_softmax(_as_logits(logits), axis=1)
    return ScoreSet((np.exp(log_p) * log_p).sum(axis=1), "entropy", task_id)


def msp_bc_score(logits, norms: WeightNorms, task_id: int = 0) -> ScoreSet:
    corrected = bias_corrected_logits(_as_logits(logits), norms)
    probs = softmax(corrected, axis=1)
    return ScoreSet(probs.max(axis=1), "msp_bc", task_id)


def odin_score(
    model: EvidentialClassifier,
    x: torch.Tensor,
    temperature: float = ODIN_TEMPERATURE,
    epsilon: float = ODIN_EPSILON,
    task_id: int = 0,
    batch_size: int = 512,
) -> ScoreSet:
    """
    ODIN: move each input against the gradient of the temperature-scaled NLL of
    its own prediction, x' = x - eps * sign(grad), then take the
    temperature-scaled MSP of x'.

    x must already be model inputs (normalized floats).
    """
    if epsilon < 0:
        raise InvalidInputError(f"epsilon must be >= 0, got {epsilon}")
    if temperature <= 0:
        raise InvalidInputError("temperature must be > 0")

    model.eval()
    chunks = []
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size].detach().clone().requires_grad_(True)
        # fresh graph per batch; nothing is shared between workers
        with torch.enable_grad():
            logits = model(xb)
            pred = logits.argmax(dim=1)
            nll = F.cross_entropy(logits / temperature, pred)
            (grad,) = torch.autograd.grad(nll, xb)

        with torch.no_grad():
            perturbed = xb.detach() - epsilon * torch.sign(grad)
            chunks.append(model(perturbed).double().cpu())

    z = torch.cat(chunks).numpy() if chunks else np.zeros((0, model.num_classes))
    probs = softmax(z / temperature, axis=1)
    return ScoreSet(probs.max(axis=1), "odin", task_id)


# -----------------------------
# 2) Evidential scores
# -----------------------------
def evidential_score(
    logits,
    kind: str = "vacuity",
    beta: Optional[float] = None,
    clamp: float = DEFAULT_LOGIT_CLAMP,
    task_id: int = 0,
) -> ScoreSet:
    """
    vacuity        -> -vacuity
    dissonance     -> 1 - dissonance
    dissonance_inv -> dissonance
    combined       -> -CU(beta)
    """
    if kind not in EVIDENTIAL_KINDS:
        raise InvalidInputError(f"Unknown evidential score kind '{kind}'. Options: {sorted(EVIDENTIAL_KINDS)}")

    op = opinion_from_logits(_as_logits(logits), clamp=clamp)
    if kind == "vacuity":
        scores = -vacuity(op)
    elif kind == "dissonance":
        scores = 1.0 - dissonance(op)
    elif kind == "dissonance_inv":
        scores = dissonance(op)
    else:
        if beta is None:
            raise InvalidInputError("kind='combined' needs beta")
        scores = -combined_uncertainty(vacuity(op), dissonance(op), beta)

    return ScoreSet(np.asarray(scores, dtype=np.float64), EVIDENTIAL_KINDS[kind], task_id)


# -----------------------------
# 3) Dispatch
# -----------------------------
def score_samples(
    method_id: str,
    logits: np.ndarray,
    norms: WeightNorms,
    model: Optional[EvidentialClassifier] = None,
    inputs: Optional[torch.Tensor] = None,
    params: Optional[Mapping[str, Any]] = None,
    task_id: int = 0,
) -> ScoreSet:
    """
    Score one batch with a registered method. `inputs` and `model` are only
    needed by ODIN; evidential methods read `uncertainty_source`
    ("uncorrected" | "corrected") and `clamp` from params.
    """
    params = dict(params or {})
    if method_id not in METHOD_REGISTRY:
        raise InvalidInputError(f"Unknown score method '{method_id}'. Options: {sorted(METHOD_REGISTRY)}")

    if method_id == "msp":
        return msp_score(logits, task_id)
    if method_id == "energy":
        return energy_score(logits, params.get("temperature", ENERGY_TEMPERATURE), task_id)
    if method_id == "entropy":
        return entropy_score(logits, task_id)
    if method_id == "msp_bc":
        return msp_bc_score(logits, norms, task_id)
    if method_id == "odin":
        if model is None or inputs is None:
            raise InvalidInputError("odin needs the model and its inputs")
        return odin_score(
            model,
            inputs,
            temperature=params.get("temperature", ODIN_TEMPERATURE),
            epsilon=params.get("epsilon", ODIN_EPSILON),
            task_id=task_id,
        )

    source = params.get("uncertainty_source", "uncorrected")
    z = bias_corrected_logits(logits, norms) if source == "corrected" else logits
    kind = method_id.removeprefix("cedl_")
    return evidential_score(
        z,
        kind=kind,
        beta=params.get("beta"),
        clamp=params.get("clamp", DEFAULT_LOGIT_CLAMP),
        task_id=task_id,
    )
