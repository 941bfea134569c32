# backbone.py
# classifier networks with an expandable evidential head, weight aligning and bias correction

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import DegenerateModelError, InvalidInputError

logger = logging.getLogger(__name__)


# -----------------------------
# 1) Feature extractors
# -----------------------------
class BasicBlock(nn.Module):
    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)

        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet32Features(nn.Module):
    """CIFAR ResNet-32: 3 stages x 5 basic blocks (16/32/64 channels), 64-d output."""

    out_dim = 64

    def __init__(self, blocks_per_stage: int = 5):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, 3, stride=1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(16)

        layers: List[nn.Module] = []
        in_planes = 16
        for planes, stride in ((16, 1), (32, 2), (64, 2)):
            for i in range(blocks_per_stage):
                layers.append(BasicBlock(in_planes, planes, stride if i == 0 else 1))
                in_planes = planes
        self.stages = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.stages(out)
        return torch.flatten(self.pool(out), 1)


class RBFFeatures(nn.Module):
    """
    Feature layer of the "mlp-toy" backbone: fixed Gaussian bumps on a grid over
    the input plane. With the linear head on top the toy classifier is a
    two-layer RBF network (Gaussian hidden units, no ReLU MLP anywhere).

    A bump only responds near its center, so head weights are only learned
    where some task had data; elsewhere the logits fall back to the head bias.
    """

    def __init__(self, in_dim: int = 2, extent: float = 12.0, spacing: float = 1.0, width: float = 0.75):
        super().__init__()
        self.width = width
        axis = torch.arange(-extent, extent + spacing / 2, spacing)
        centers = torch.cartesian_prod(*([axis] * in_dim)).reshape(-1, in_dim)
        self.register_buffer("centers", centers)
        self.out_dim = len(centers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        d2 = (x.unsqueeze(1) - self.centers.unsqueeze(0)).pow(2).sum(dim=-1)
        return torch.exp(-d2 / (2 * self.width ** 2))


# architecture_id -> (factory, input shape without the batch axis)
# "mlp-toy" is the registry id of the desk-scale RBF network above
BACKBONES: Dict[str, Tuple[Callable[[], nn.Module], Tuple[int, ...]]] = {
    "resnet32": (ResNet32Features, (3, 32, 32)),
    "mlp-toy": (RBFFeatures, (2,)),
}


# -----------------------------
# 2) Classifier
# -----------------------------
class EvidentialClassifier(nn.Module):
    """
    feature_extractor -> linear head producing one raw logit per seen class.

    Evidence is derived downstream (evidential.evidence_from_logits), so the
    same module also serves the softmax baseline.
    """

    def __init__(self, architecture_id: str, class_ids: Sequence[int]):
        super().__init__()
        if architecture_id not in BACKBONES:
            raise InvalidInputError(
                f"Unknown architecture '{architecture_id}'. Options: {sorted(BACKBONES)}"
            )
        factory, input_shape = BACKBONES[architecture_id]

        self.architecture_id = architecture_id
        self.input_shape = tuple(input_shape)
        self.feature_extractor = factory()
        self.head = nn.Linear(self.feature_extractor.out_dim, len(class_ids))
        self.seen_classes: List[int] = [int(c) for c in class_ids]

    @property
    def num_classes(self) -> int:
        return len(self.seen_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise InvalidInputError(
                f"{self.architecture_id} expects inputs of shape (N, {self.input_shape}), got {tuple(x.shape)}"
            )
        return self.feature_extractor(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def build_model(architecture_id: str, class_ids: Sequence[int], seed: int) -> EvidentialClassifier:
    """Create a classifier whose initial weights depend only on `seed`."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = EvidentialClassifier(architecture_id, class_ids)
    return model


def forward(model: EvidentialClassifier, x: torch.Tensor) -> torch.Tensor:
    """Raw logits, (N, |seen_classes|)."""
    return model(x)


def predict_logits(model: EvidentialClassifier, x: torch.Tensor, batch_size: int = 512) -> np.ndarray:
    """Eval-mode logits for a whole tensor, returned as float64 numpy."""
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            chunks.append(model(x[start:start + batch_size]).double().cpu())
    if not chunks:
        return np.zeros((0, model.num_classes))
    return torch.cat(chunks).numpy()


def extract_features(model: EvidentialClassifier, x: torch.Tensor, batch_size: int = 512) -> np.ndarray:
    """Penultimate-layer features (eval mode), float64 numpy."""
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            chunks.append(model.features(x[start:start + batch_size]).double().cpu())
    return torch.cat(chunks).numpy()


def label_to_index(model: EvidentialClassifier, labels: torch.Tensor) -> torch.Tensor:
    """Map dataset class ids to head row indices."""
    position = {c: i for i, c in enumerate(model.seen_classes)}
    try:
        return torch.tensor([position[int(c)] for c in labels], dtype=torch.long)
    except KeyError as e:
        raise InvalidInputError(f"Label {e.args[0]} is not a seen class") from e


# -----------------------------
# 3) Incremental growth
# -----------------------------
def expand_head(model: EvidentialClassifier, new_class_ids: Sequence[int]) -> EvidentialClassifier:
    """
    Append one zero-initialized head row (and zero bias) per new class.
    Existing rows are copied bit-exactly.
    """
    new_ids = [int(c) for c in new_class_ids]
    if not new_ids:
        return model

    overlap = set(new_ids) & set(model.seen_classes)
    if overlap or len(set(new_ids)) != len(new_ids):
        raise InvalidInputError(f"Duplicate class ids: {sorted(overlap) or new_ids}")

    old = model.head
    head = nn.Linear(old.in_features, old.out_features + len(new_ids)).to(old.weight.device)
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
        head.weight[: old.out_features] = old.weight
        head.bias[: old.out_features] = old.bias

    model.head = head
    model.seen_classes = model.seen_classes + new_ids
    return model


def freeze(model: EvidentialClassifier) -> EvidentialClassifier:
    """Detached copy in eval mode, used as the distillation teacher."""
    teacher = copy.deepcopy(model)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


# -----------------------------
# 4) Weight norms, aligning, bias correction
# -----------------------------
@dataclass(frozen=True)
class WeightNorms:
    """Euclidean norm of each head weight row (bias excluded), aligned with class_ids."""
    norms: np.ndarray
    class_ids: Tuple[int, ...]


def weight_norms(model: EvidentialClassifier) -> WeightNorms:
    with torch.no_grad():
        norms = model.head.weight.double().norm(dim=1).cpu().numpy()
    return WeightNorms(norms=norms, class_ids=tuple(model.seen_classes))


def _rows(model: EvidentialClassifier, class_ids: Sequence[int]) -> List[int]:
    position = {c: i for i, c in enumerate(model.seen_classes)}
    missing = [c for c in class_ids if c not in position]
    if missing:
        raise InvalidInputError(f"Class ids not in the head: {missing}")
    return [position[c] for c in class_ids]


def wa_gamma(model: EvidentialClassifier, old_ids: Sequence[int], new_ids: Sequence[int]) -> float:
    """gamma = mean(||w_old||) / mean(||w_new||)"""
    norms = weight_norms(model).norms
    old_mean = norms[_rows(model, old_ids)].mean()
    new_mean = norms[_rows(model, new_ids)].mean()
    if new_mean == 0:
        raise DegenerateModelError("Mean new-class weight norm is 0; cannot align")
    return float(old_mean / new_mean)


def weight_align(model: EvidentialClassifier, old_ids: Sequence[int], new_ids: Sequence[int]) -> EvidentialClassifier:
    """Scale new-class weight rows so their mean norm matches the old classes'. Biases untouched."""
    old_ids = [int(c) for c in old_ids]
    new_ids = [int(c) for c in new_ids]
    if sorted(old_ids + new_ids) != sorted(model.seen_classes):
        raise InvalidInputError("old_ids and new_ids must partition the seen classes")

    gamma = wa_gamma(model, old_ids, new_ids)
    rows = torch.tensor(_rows(model, new_ids), dtype=torch.long)
    with torch.no_grad():
        model.head.weight[rows] = model.head.weight[rows] * gamma

    logger.info("weight aligning: gamma=%.6f over %d new classes", gamma, len(new_ids))
    return model


def bias_corrected_logits(logits: np.ndarray, norms: WeightNorms) -> np.ndarray:
    """logit_c / ||w_c|| per class."""
    n = np.asarray(norms.norms, dtype=np.float64)
    if np.any(n <= 0):
        raise DegenerateModelError("Bias correction needs strictly positive weight norms")
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] != n.shape[0]:
        raise InvalidInputError("logits and norms disagree on the number of classes")
    return z / n


# -----------------------------
# 5) Checkpoints
# -----------------------------
def save_checkpoint(model: EvidentialClassifier, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "architecture_id": model.architecture_id,
            "seen_classes": list(model.seen_classes),
            "state_dict": model.state_dict(),
        },
        path,
    )
    return path


def load_checkpoint(path: Path) -> EvidentialClassifier:
    payload = torch.load(Path(path), map_location="cpu")
    model = EvidentialClassifier(payload["architecture_id"], payload["seen_classes"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
