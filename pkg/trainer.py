# trainer.py
# Continual training loop: rehearsal buffer with herding, two-phase task training, teacher snapshots

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from backbone import (
    EvidentialClassifier,
    build_model,
    expand_head,
    extract_features,
    freeze,
    label_to_index,
    load_checkpoint,
    save_checkpoint,
    weight_align,
)
from data_tasks import TaskSpec, TaskStream, augment, to_model_inputs
from errors import InvalidInputError
from losses import KDConfig, LossWeights, ece_loss, ekl_loss, evidence_activation, kd_loss, total_loss

logger = logging.getLogger(__name__)

MethodType = Literal["cedl", "baseline"]


@dataclass(frozen=True)
class TrainerConfig:
    method: MethodType = "cedl"
    loss_weights_first_task: LossWeights = LossWeights(0.5, 0.5, 0.0)
    loss_weights_later: LossWeights = LossWeights(0.45, 0.5, 0.05)
    kd_temperature: float = 2.0

    epochs: int = 120
    batch_size: int = 128
    lr: float = 0.1
    lr_schedule: Literal["cosine", "constant"] = "cosine"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 1993

    buffer_per_class: int = 20
    apply_wa: bool = True
    apply_bc: bool = True
    ekl_mask_new_only: bool = True
    ekl_strength: Literal["masked", "global"] = "masked"

    augment_policy: str = "none"
    augment_num_ops: int = 1
    augment_magnitude: int = 9
    augment_exemplars: bool = True
    logit_clamp: float = 10.0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")


def task_seed(seed: int, task_id: int) -> int:
    """Per-task RNG seed, so a resumed run replays later tasks identically."""
    return seed * 1000 + task_id


# -----------------------------
# 1) Rehearsal buffer
# -----------------------------
@dataclass(frozen=True)
class ExemplarSet:
    class_id: int
    task_id: int
    indices: Tuple[int, ...]  # positions in the task's train set, in herding order
    inputs: torch.Tensor


@dataclass
class RehearsalBuffer:
    per_class_capacity: int = 20
    store: Dict[int, ExemplarSet] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(s.indices) for s in self.store.values())

    def inputs_and_labels(self) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
        if not self.store:
            return None, None
        sets = [self.store[c] for c in sorted(self.store)]
        x = torch.cat([s.inputs for s in sets])
        y = torch.cat([torch.full((len(s.indices),), s.class_id, dtype=torch.long) for s in sets])
        return x, y

    def manifest(self) -> dict:
        return {
            "per_class_capacity": self.per_class_capacity,
            "size": len(self),
            "classes": {
                str(c): {"task_id": s.task_id, "indices": list(s.indices)}
                for c, s in sorted(self.store.items())
            },
        }


def buffer_from_manifest(manifest: dict, stream: TaskStream) -> RehearsalBuffer:
    buffer = RehearsalBuffer(per_class_capacity=int(manifest["per_class_capacity"]))
    for class_id, entry in manifest["classes"].items():
        task = stream.task(int(entry["task_id"]))
        idx = torch.tensor(entry["indices"], dtype=torch.long)
        buffer.store[int(class_id)] = ExemplarSet(
            class_id=int(class_id),
            task_id=int(entry["task_id"]),
            indices=tuple(int(i) for i in entry["indices"]),
            inputs=task.train_x[idx],
        )
    return buffer


def herding_select(features: np.ndarray, m: int) -> List[int]:
    """
    Greedy herding: at step k pick the unused sample whose addition brings the
    running mean of the selection closest to the class mean.

    Returns min(m, n) unique indices in selection order.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) == 0:
        raise InvalidInputError("features must be a non-empty (n, d) array")
    if m < 1:
        raise InvalidInputError("m must be >= 1")

    class_mean = f.mean(axis=0)
    running_sum = np.zeros_like(class_mean)
    available = np.ones(len(f), dtype=bool)
    selected: List[int] = []

    for k in range(1, min(m, len(f)) + 1):
        candidate_means = (running_sum + f) / k
        dist = np.linalg.norm(class_mean - candidate_means, axis=1)
        dist[~available] = np.inf
        i = int(np.argmin(dist))
        selected.append(i)
        available[i] = False
        running_sum += f[i]

    return selected


def update_buffer(buffer: RehearsalBuffer, task: TaskSpec, model: EvidentialClassifier) -> RehearsalBuffer:
    """Herd per_class_capacity exemplars for every class of the task; older classes are kept as-is."""
    m = buffer.per_class_capacity
    if m <= 0:
        return buffer

    for class_id in task.class_ids:
        class_idx = (task.train_y == class_id).nonzero().squeeze(1)
        if len(class_idx) == 0:
            continue
        feats = extract_features(model, to_model_inputs(task.train_x[class_idx]))
        # iCaRL works on L2-normalized features
        feats = feats / (np.linalg.norm(feats, axis=1, keepdims=True) + 1e-8)
        chosen = class_idx[herding_select(feats, m)]
        buffer.store[int(class_id)] = ExemplarSet(
            class_id=int(class_id),
            task_id=task.task_id,
            indices=tuple(int(i) for i in chosen),
            inputs=task.train_x[chosen],
        )

    logger.info("buffer after task %d: %d exemplars over %d classes", task.task_id, len(buffer), len(buffer.store))
    return buffer


# -----------------------------
# 2) Task training
# -----------------------------
def _batches(perm: torch.Tensor, batch_size: int) -> List[torch.Tensor]:
    batches = list(torch.split(perm, batch_size))
    # a trailing single-sample batch breaks BatchNorm in train mode
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = torch.cat([batches[-2], batches.pop()])
    return batches


def _optimizer(model: EvidentialClassifier, cfg: TrainerConfig) -> torch.optim.Optimizer:
    # no weight decay on the head bias
    decayed = [p for name, p in model.named_parameters() if name != "head.bias"]
    return torch.optim.SGD(
        [
            {"params": decayed, "weight_decay": cfg.weight_decay},
            {"params": [model.head.bias], "weight_decay": 0.0},
        ],
        lr=cfg.lr,
        momentum=cfg.momentum,
    )


def _prepare_batch(
    x: torch.Tensor, is_exemplar: torch.Tensor, cfg: TrainerConfig, seed: int
) -> torch.Tensor:
    if cfg.augment_policy == "none":
        return to_model_inputs(x)
    augmented = augment(x, cfg.augment_policy, seed, cfg.augment_num_ops, cfg.augment_magnitude)
    if not cfg.augment_exemplars:
        keep = is_exemplar.view(-1, *([1] * (x.dim() - 1)))
        augmented = torch.where(keep, x, augmented)
    return to_model_inputs(augmented)


def train_task(
    model: EvidentialClassifier,
    task: TaskSpec,
    buffer: RehearsalBuffer,
    teacher: Optional[EvidentialClassifier],
    cfg: TrainerConfig,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> EvidentialClassifier:
    """
    Phase 1: minimize the task objective over task data + buffer exemplars.
    Phase 2: weight aligning of the new-class head rows (task >= 2, cfg.apply_wa).
    """
    t = task.task_id
    if t >= 2 and teacher is None:
        raise InvalidInputError(f"Task {t} needs the frozen model of task {t - 1} as teacher")
    missing = [c for c in task.class_ids if c not in model.seen_classes]
    if missing:
        raise InvalidInputError(f"Head has no rows for classes {missing}; call expand_head first")

    new_ids = list(task.class_ids)
    old_ids = [c for c in model.seen_classes if c not in set(new_ids)]
    c_old = len(old_ids)
    distill = t >= 2 and c_old > 0

    buf_x, buf_y = buffer.inputs_and_labels()
    if buf_x is None:
        x, y = task.train_x, task.train_y
        is_exemplar = torch.zeros(len(y), dtype=torch.bool)
    else:
        x = torch.cat([task.train_x, buf_x])
        y = torch.cat([task.train_y, buf_y])
        is_exemplar = torch.cat([torch.zeros(len(task.train_y), dtype=torch.bool), torch.ones(len(buf_y), dtype=torch.bool)])

    targets = label_to_index(model, y)
    onehot = F.one_hot(targets, model.num_classes).float()
    new_rows = torch.tensor([c in set(new_ids) for c in model.seen_classes])
    ekl_new_only = cfg.ekl_mask_new_only and t >= 2
    class_mask = new_rows if ekl_new_only else torch.ones(model.num_classes, dtype=torch.bool)
    is_new_sample = new_rows[targets]

    weights = cfg.loss_weights_first_task if t == 1 else cfg.loss_weights_later
    kd_cfg = KDConfig(temperature=cfg.kd_temperature, old_class_count=c_old)

    generator = torch.Generator().manual_seed(task_seed(cfg.seed, t))
    optimizer = _optimizer(model, cfg)
    scheduler = None
    if cfg.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.epochs)

    for epoch in range(cfg.epochs):
        model.train()
        lr = optimizer.param_groups[0]["lr"]
        sums = {"loss": 0.0, "ece": 0.0, "ekl": 0.0, "kd": 0.0, "ce": 0.0}
        perm = torch.randperm(len(y), generator=generator)

        for idx in _batches(perm, cfg.batch_size):
            aug_seed = int(torch.randint(0, 2**31 - 1, (1,), generator=generator))
            inputs = _prepare_batch(x[idx], is_exemplar[idx], cfg, aug_seed)
            logits = model(inputs)

            kd = logits.new_zeros(())
            if distill:
                with torch.no_grad():
                    teacher_logits = teacher(inputs)
                kd = kd_loss(logits, teacher_logits, kd_cfg)

            parts: Dict[str, torch.Tensor] = {"kd": kd}
            if cfg.method == "cedl":
                alpha = evidence_activation(logits, cfg.logit_clamp) + 1.0
                parts["ece"] = ece_loss(alpha, onehot[idx])
                rows = is_new_sample[idx] if ekl_new_only else torch.ones(len(idx), dtype=torch.bool)
                parts["ekl"] = ekl_loss(
                    alpha[rows], onehot[idx][rows], class_mask, restrict=cfg.ekl_strength == "masked"
                )
                loss = total_loss(parts["ece"], parts["ekl"], kd, weights)
            else:
                parts["ce"] = F.cross_entropy(logits, targets[idx])
                kd_weight = c_old / model.num_classes if distill else 0.0
                loss = (1.0 - kd_weight) * parts["ce"] + kd_weight * kd

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            sums["loss"] += float(loss.detach()) * len(idx)
            for name, value in parts.items():
                sums[name] += float(value.detach()) * len(idx)

        if scheduler is not None:
            scheduler.step()

        record = {"task": t, "epoch": epoch + 1, "lr": lr}
        record.update({name: total / len(y) for name, total in sums.items()})
        logger.info("epoch %s", json.dumps(record))
        if on_epoch is not None:
            on_epoch(record)

    # Phase 2
    if cfg.apply_wa and distill:
        weight_align(model, old_ids, new_ids)

    model.eval()
    return model


# -----------------------------
# 3) Whole stream
# -----------------------------
TaskHook = Callable[[TaskSpec, EvidentialClassifier, TaskStream], dict]


@dataclass
class StreamResult:
    models: List[EvidentialClassifier]
    reports: List[dict]
    epoch_log: pd.DataFrame
    buffer: RehearsalBuffer


def task_dir(results_dir: Path, task_id: int) -> Path:
    return Path(results_dir) / f"task_{task_id}"


def run_stream(
    stream: TaskStream,
    cfg: TrainerConfig,
    architecture_id: str,
    results_dir: Optional[Path] = None,
    hooks: Sequence[TaskHook] = (),
    eval_key: Optional[str] = None,
) -> StreamResult:
    """
    Train every task in order. After each task: update the buffer, snapshot the
    teacher, write results/<run>/task_<t>/{checkpoint.pt, buffer_manifest.json,
    epoch_log.csv, metrics.json} and call the evaluation hooks.

    Tasks whose checkpoint and buffer manifest already exist are restored
    instead of retrained. A stored metrics.json is reused only when it was
    written under the same eval_key; otherwise the hooks run again on the
    restored model.
    """
    buffer = RehearsalBuffer(per_class_capacity=cfg.buffer_per_class)
    model: Optional[EvidentialClassifier] = None
    teacher: Optional[EvidentialClassifier] = None
    models: List[EvidentialClassifier] = []
    reports: List[dict] = []
    logs: List[pd.DataFrame] = []

    for task in stream.tasks:
        t = task.task_id
        out = task_dir(results_dir, t) if results_dir is not None else None

        if out is not None and (out / "checkpoint.pt").exists() and (out / "buffer_manifest.json").exists():
            logger.info("task %d: restoring from %s", t, out)
            model = load_checkpoint(out / "checkpoint.pt")
            buffer = buffer_from_manifest(json.loads((out / "buffer_manifest.json").read_text()), stream)
            log = pd.read_csv(out / "epoch_log.csv") if (out / "epoch_log.csv").exists() else pd.DataFrame()
        else:
            if model is None:
                model = build_model(architecture_id, task.class_ids, seed=cfg.seed)
            else:
                expand_head(model, task.class_ids)

            records: List[dict] = []
            train_task(model, task, buffer, teacher, cfg, on_epoch=records.append)
            update_buffer(buffer, task, model)
            log = pd.DataFrame(records)

            if out is not None:
                save_checkpoint(model, out / "checkpoint.pt")
                (out / "buffer_manifest.json").write_text(json.dumps(buffer.manifest(), indent=2))
                log.to_csv(out / "epoch_log.csv", index=False)

        teacher = freeze(model)
        models.append(teacher)
        logs.append(log)

        metrics_path = out / "metrics.json" if out is not None else None
        stored = json.loads(metrics_path.read_text()) if metrics_path is not None and metrics_path.exists() else None
        if stored is not None and stored.get("eval_key") == eval_key:
            report = stored
        else:
            if stored is not None:
                logger.info("task %d: evaluation settings changed, re-scoring", t)
            report = {"task_id": t, "eval_key": eval_key}
            for hook in hooks:
                report.update(hook(task, teacher, stream))
            if metrics_path is not None:
                metrics_path.write_text(json.dumps(report, indent=2))
        reports.append(report)

    epoch_log = pd.concat(logs, ignore_index=True) if logs else pd.DataFrame()
    return StreamResult(models=models, reports=reports, epoch_log=epoch_log, buffer=buffer)
