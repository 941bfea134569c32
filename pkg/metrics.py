# does the math to compute detection and classification metrics from scored test data

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Literal, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from sklearn.metrics import average_precision_score, roc_auc_score, roc_curve

from backbone import EvidentialClassifier, bias_corrected_logits, predict_logits, weight_norms
from data_tasks import TaskStream, to_model_inputs
from errors import InvalidInputError
from evidential import DEFAULT_LOGIT_CLAMP, dissonance, opinion_from_logits, vacuity
from ood_scores import score_samples

ComparisonType = Literal["IND_vs_OOD", "INDc_vs_OOD", "INDf_vs_OOD", "INDc_vs_INDf"]

# comparison -> (positive splits, negative splits)
COMPARISONS: Dict[str, tuple] = {
    "IND_vs_OOD": (("IND_c", "IND_f"), ("OOD",)),
    "INDc_vs_OOD": (("IND_c",), ("OOD",)),
    "INDf_vs_OOD": (("IND_f",), ("OOD",)),
    "INDc_vs_INDf": (("IND_c",), ("IND_f",)),
}


# -----------------------------
# 1) Binary detection metrics
#    positives = in-distribution, scores oriented higher = positive
# -----------------------------
def _labels_and_scores(pos_scores, neg_scores):
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise InvalidInputError("Both positive and negative score sets must be non-empty")
    y_true = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return y_true, np.concatenate([pos, neg])


def auroc(pos_scores, neg_scores) -> float:
    """P(random positive outranks random negative), ties counted 1/2."""
    y_true, y_score = _labels_and_scores(pos_scores, neg_scores)
    return float(roc_auc_score(y_true, y_score))


def aupr(pos_scores, neg_scores) -> float:
    """Step-wise area under precision-recall: sum (R_k - R_{k-1}) * P_k over descending thresholds."""
    y_true, y_score = _labels_and_scores(pos_scores, neg_scores)
    return float(average_precision_score(y_true, y_score))


def fpr_at_tpr(pos_scores, neg_scores, tpr_target: float = 0.95) -> float:
    """Smallest FPR over observed-score thresholds whose TPR reaches tpr_target. No interpolation."""
    if not 0.0 < tpr_target <= 1.0:
        raise InvalidInputError("tpr_target must be in (0, 1]")
    y_true, y_score = _labels_and_scores(pos_scores, neg_scores)
    fpr, tpr, _ = roc_curve(y_true, y_score, drop_intermediate=False)
    # tpr is non-decreasing, so the first hit has the lowest fpr
    return float(fpr[np.argmax(tpr >= tpr_target)])


# -----------------------------
# 2) Classification metrics
# -----------------------------
@dataclass
class AccuracyLog:
    accuracies: List[float] = field(default_factory=list)

    def append(self, accuracy: float) -> None:
        if not 0.0 <= accuracy <= 1.0:
            raise InvalidInputError(f"accuracy must be in [0, 1], got {accuracy}")
        self.accuracies.append(float(accuracy))

    @property
    def aca(self) -> float:
        return aca(self.accuracies)

    @property
    def aia(self) -> float:
        return aia(self.accuracies)


def aca(per_task_accuracies: Sequence[float]) -> float:
    """Accuracy over all seen classes after the last task."""
    if len(per_task_accuracies) == 0:
        raise InvalidInputError("accuracy history is empty")
    return float(per_task_accuracies[-1])


def aia(per_task_accuracies: Sequence[float]) -> float:
    """Mean of the per-task accuracies."""
    if len(per_task_accuracies) == 0:
        raise InvalidInputError("accuracy history is empty")
    return float(np.mean(per_task_accuracies))


def seen_class_accuracy(model: EvidentialClassifier, stream: TaskStream, task_t: int, apply_bc: bool = True) -> float:
    """Top-1 accuracy on the test data of tasks 1..t over all seen classes."""
    tasks = stream.tasks[:task_t]
    x = to_model_inputs(_cat([t.test_x for t in tasks]))
    y = _cat([t.test_y for t in tasks]).numpy()

    logits = predict_logits(model, x)
    if apply_bc:
        logits = bias_corrected_logits(logits, weight_norms(model))
    predicted = np.asarray(model.seen_classes)[np.argmax(logits, axis=1)]
    return float((predicted == y).mean())


def _cat(tensors):
    return torch.cat(list(tensors))


# -----------------------------
# 3) Scoring the whole stream
# -----------------------------
def assign_splits(data_task: np.ndarray, task_t: int) -> np.ndarray:
    """Tasks before t -> IND_f, task t -> IND_c, later tasks -> OOD."""
    data_task = np.asarray(data_task)
    return np.where(data_task < task_t, "IND_f", np.where(data_task == task_t, "IND_c", "OOD"))


def score_stream(
    model: EvidentialClassifier,
    stream: TaskStream,
    task_t: int,
    methods: Sequence[str],
    method_params: Optional[Mapping[str, Mapping]] = None,
    clamp: float = DEFAULT_LOGIT_CLAMP,
    uncertainty_source: str = "uncorrected",
) -> pd.DataFrame:
    """
    Score every test sample of the stream with the model trained through task t.

    One row per sample: sample_id, data_task, true_label, split, vacuity,
    dissonance, plus one column per score method.
    """
    method_params = method_params or {}
    x_raw = _cat([t.test_x for t in stream.tasks])
    labels = _cat([t.test_y for t in stream.tasks]).numpy()
    data_task = np.concatenate([np.full(len(t.test_y), t.task_id) for t in stream.tasks])

    inputs = to_model_inputs(x_raw)
    logits = predict_logits(model, inputs)
    norms = weight_norms(model)

    source_logits = bias_corrected_logits(logits, norms) if uncertainty_source == "corrected" else logits
    op = opinion_from_logits(source_logits, clamp=clamp)

    frame = pd.DataFrame({
        "sample_id": np.arange(len(labels)),
        "data_task": data_task,
        "true_label": labels,
        "split": assign_splits(data_task, task_t),
        "vacuity": vacuity(op),
        "dissonance": dissonance(op),
    })

    for method_id in methods:
        params = {"clamp": clamp, "uncertainty_source": uncertainty_source, **dict(method_params.get(method_id, {}))}
        result = score_samples(method_id, logits, norms, model=model, inputs=inputs, params=params, task_id=task_t)
        frame[method_id] = result.scores

    return frame


# -----------------------------
# 4) Four-way protocol
# -----------------------------
@dataclass(frozen=True)
class DetectionReport:
    comparison_id: ComparisonType
    task_id: int
    method_id: str
    auroc: float
    aupr: float
    fpr95: float
    n_positive: int
    n_negative: int

    def to_dict(self) -> dict:
        return asdict(self)


def detection_reports(
    frame: pd.DataFrame,
    task_t: int,
    method_id: str,
    aupr_positive: Literal["ind", "ood"] = "ind",
) -> List[DetectionReport]:
    """Every comparison whose two sides are non-empty for this task."""
    reports = []
    for comparison_id, (pos_splits, neg_splits) in COMPARISONS.items():
        pos = frame.loc[frame["split"].isin(pos_splits), method_id].to_numpy()
        neg = frame.loc[frame["split"].isin(neg_splits), method_id].to_numpy()
        if len(pos) == 0 or len(neg) == 0:
            continue

        # flipping the positive class means scoring the negatives with the negated score
        pr = aupr(pos, neg) if aupr_positive == "ind" else aupr(-neg, -pos)
        reports.append(DetectionReport(
            comparison_id=comparison_id,
            task_id=task_t,
            method_id=method_id,
            auroc=auroc(pos, neg),
            aupr=pr,
            fpr95=fpr_at_tpr(pos, neg),
            n_positive=len(pos),
            n_negative=len(neg),
        ))
    return reports


def protocol_eval(
    model: EvidentialClassifier,
    stream: TaskStream,
    task_t: int,
    score_method: str,
    params: Optional[Mapping] = None,
    aupr_positive: Literal["ind", "ood"] = "ind",
) -> List[DetectionReport]:
    """
    Split the stream's test data into IND_f / IND_c / OOD relative to task t and
    produce the detection reports for one score method.
    """
    if not 1 <= task_t <= len(stream):
        raise InvalidInputError(f"task_t must be in [1, {len(stream)}]")
    frame = score_stream(model, stream, task_t, [score_method], {score_method: dict(params or {})})
    return detection_reports(frame, task_t, score_method, aupr_positive)


# -----------------------------
# 5) Aggregations (table-level)
# -----------------------------
def reports_to_frame(reports: Sequence[DetectionReport]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in reports])


def summarize_reports(reports: pd.DataFrame) -> pd.DataFrame:
    """
    Average each method x comparison over the tasks where it exists
    (OOD comparisons: tasks 1..T-1; INDc_vs_INDf: tasks 2..T).
    """
    grouped = reports.groupby(["method_id", "comparison_id"], as_index=False).agg(
        TASKS=("task_id", "count"),
        AUROC=("auroc", "mean"),
        AUPR=("aupr", "mean"),
        FPR95=("fpr95", "mean"),
    )
    return grouped.sort_values(["comparison_id", "method_id"]).reset_index(drop=True)


def uncertainty_by_task(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean vacuity / dissonance per data task and per split."""
    return frame.groupby(["data_task", "split"], as_index=False).agg(
        VACUITY=("vacuity", "mean"),
        DISSONANCE=("dissonance", "mean"),
        SAMPLES=("sample_id", "count"),
    )
