# data_tasks.py
# Builds class-incremental task streams (CIFAR-100 from local archives, or toy Gaussian clusters)

from __future__ import annotations

import os
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from errors import InvalidInputError

# Support DATA_DIR environment variable for the dataset root
DATA_DIR = Path(os.environ.get("DATA_DIR", "./data"))

AVAILABLE_DATASETS = ["cifar100", "toy"]
AUGMENT_POLICIES = ["none", "flip-crop", "randaugment"]

CIFAR100_CLASSES = 100
CIFAR_MEAN = torch.tensor([0.5071, 0.4865, 0.4409]).view(1, 3, 1, 1)
CIFAR_STD = torch.tensor([0.2673, 0.2564, 0.2762]).view(1, 3, 1, 1)


@dataclass(frozen=True)
class TaskSpec:
    """
    One incremental step. Image inputs are kept as uint8 (N, 3, 32, 32);
    toy inputs are float32 (N, 2). Labels are dataset class ids.
    """
    task_id: int
    class_ids: Tuple[int, ...]
    train_x: torch.Tensor
    train_y: torch.Tensor
    test_x: torch.Tensor
    test_y: torch.Tensor


@dataclass(frozen=True)
class TaskStream:
    tasks: Tuple[TaskSpec, ...]
    total_classes: int
    shuffle_seed: int
    dataset_id: str = "toy"

    def __len__(self) -> int:
        return len(self.tasks)

    def task(self, task_id: int) -> TaskSpec:
        return self.tasks[task_id - 1]

    @property
    def class_order(self) -> List[int]:
        return [c for t in self.tasks for c in t.class_ids]


# -----------------------------
# 1) Class splitting
# -----------------------------
def split_classes(n_classes: int, n_tasks: int, shuffle_seed: int) -> List[List[int]]:
    """Seeded permutation of range(n_classes), cut into n_tasks equal contiguous blocks."""
    if n_tasks < 1 or n_classes % n_tasks != 0:
        raise InvalidInputError(f"{n_classes} classes cannot be split into {n_tasks} equal tasks")
    order = np.random.default_rng(shuffle_seed).permutation(n_classes)
    per_task = n_classes // n_tasks
    return [order[i * per_task:(i + 1) * per_task].tolist() for i in range(n_tasks)]


def stream_from_arrays(
    train: Tuple[torch.Tensor, torch.Tensor],
    test: Tuple[torch.Tensor, torch.Tensor],
    n_tasks: int,
    shuffle_seed: int,
    dataset_id: str,
) -> TaskStream:
    """Partition a labeled dataset into a TaskStream by class blocks."""
    x_train, y_train = train
    x_test, y_test = test
    n_classes = int(torch.unique(torch.cat([y_train, y_test])).numel())
    blocks = split_classes(n_classes, n_tasks, shuffle_seed)

    tasks = []
    for task_id, class_ids in enumerate(blocks, start=1):
        ids = torch.tensor(class_ids)
        train_mask = torch.isin(y_train, ids)
        test_mask = torch.isin(y_test, ids)
        tasks.append(TaskSpec(
            task_id=task_id,
            class_ids=tuple(int(c) for c in class_ids),
            train_x=x_train[train_mask],
            train_y=y_train[train_mask],
            test_x=x_test[test_mask],
            test_y=y_test[test_mask],
        ))
    return TaskStream(tasks=tuple(tasks), total_classes=n_classes, shuffle_seed=shuffle_seed, dataset_id=dataset_id)


# -----------------------------
# 2) CIFAR-100 ingestion
#    Reads the published archives from local disk, never downloads.
# -----------------------------
def _read_cifar_binary(path: Path) -> Tuple[torch.Tensor, torch.Tensor]:
    # each record: 1 coarse label byte, 1 fine label byte, 3072 pixel bytes
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, 2 + 3072)
    labels = raw[:, 1].astype(np.int64)
    images = raw[:, 2:].reshape(-1, 3, 32, 32)
    return torch.from_numpy(images.copy()), torch.from_numpy(labels)


def _read_cifar_pickle(path: Path) -> Tuple[torch.Tensor, torch.Tensor]:
    with open(path, "rb") as f:
        entry = pickle.load(f, encoding="latin1")
    images = np.asarray(entry["data"], dtype=np.uint8).reshape(-1, 3, 32, 32)
    labels = np.asarray(entry["fine_labels"], dtype=np.int64)
    return torch.from_numpy(images), torch.from_numpy(labels)


def find_cifar100(data_dir: Optional[Path] = None) -> Path:
    """Locate the CIFAR-100 archive directory under data_dir (default: DATA_DIR)."""
    root = Path(data_dir) if data_dir is not None else DATA_DIR
    for name in ("cifar-100-binary", "cifar-100-python"):
        candidate = root / name
        if candidate.is_dir():
            return candidate
    raise FileNotFoundError(
        f"No CIFAR-100 archive under {root}. Expected cifar-100-binary/ or cifar-100-python/ "
        "(set DATA_DIR to point elsewhere)."
    )


def load_cifar100(data_dir: Optional[Path] = None) -> Dict[str, Tuple[torch.Tensor, torch.Tensor]]:
    """
    Load CIFAR-100 (fine labels).

    Returns:
        {"train": (images uint8 (50000, 3, 32, 32), labels), "test": (...)}
    """
    folder = find_cifar100(data_dir)
    if folder.name == "cifar-100-binary":
        return {split: _read_cifar_binary(folder / f"{split}.bin") for split in ("train", "test")}
    return {split: _read_cifar_pickle(folder / split) for split in ("train", "test")}


def split_tasks(dataset_id: str, n_tasks: int, shuffle_seed: int, data_dir: Optional[Path] = None) -> TaskStream:
    """
    Shuffle the dataset's classes with a seeded permutation and cut them into n_tasks
    equal tasks (CIFAR-100: 5 x 20 or 10 x 10).
    """
    if dataset_id != "cifar100":
        raise InvalidInputError(f"split_tasks supports 'cifar100' only, got '{dataset_id}' (use make_toy_stream)")
    if CIFAR100_CLASSES % n_tasks != 0:
        raise InvalidInputError(f"{CIFAR100_CLASSES} classes cannot be split into {n_tasks} equal tasks")

    data = load_cifar100(data_dir)
    return stream_from_arrays(data["train"], data["test"], n_tasks, shuffle_seed, dataset_id="cifar100")


# -----------------------------
# 3) Toy stream
# -----------------------------
TOY_STD = 0.5
# neighbouring means on the circle, in standard deviations
TOY_SPACING = 3.5
# samples are redrawn beyond this radius (in standard deviations), below TOY_SPACING / 2
TOY_TRUNCATION = 1.7


def _check_toy_margins(x: np.ndarray, y: np.ndarray) -> None:
    # every pair of classes must be split by the hyperplane orthogonal to their mean difference
    classes = np.unique(y)
    for i, a in enumerate(classes):
        for b in classes[i + 1:]:
            xa, xb = x[y == a], x[y == b]
            direction = xb.mean(axis=0) - xa.mean(axis=0)
            if (xa @ direction).max() >= (xb @ direction).min():
                raise RuntimeError(f"Toy classes {a} and {b} are not linearly separable; use another seed")


def _truncated_normal(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    z = rng.standard_normal((n, 2))
    outside = np.linalg.norm(z, axis=1) > radius
    while outside.any():
        z[outside] = rng.standard_normal((int(outside.sum()), 2))
        outside = np.linalg.norm(z, axis=1) > radius
    return z


def toy_class_means(n_tasks: int, classes_per_task: int) -> np.ndarray:
    """
    Means on a circle, neighbours TOY_SPACING standard deviations apart, with
    the tasks interleaved: walking around the circle visits task 1, 2, ..., T,
    then the next class of task 1, and so on. Every class of a later task sits
    right next to classes the model has already learned.
    """
    n_classes = n_tasks * classes_per_task
    radius = TOY_SPACING * TOY_STD / 2 / np.sin(np.pi / n_classes)
    class_ids = np.arange(n_classes)
    slots = (class_ids % classes_per_task) * n_tasks + class_ids // classes_per_task
    angles = 2 * np.pi * slots / n_classes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def make_toy_stream(n_tasks: int, classes_per_task: int, samples_per_class: int, seed: int) -> TaskStream:
    """
    One truncated isotropic Gaussian cluster per class around toy_class_means,
    split 80/20 train/test per class. Task k owns classes
    [(k-1) * classes_per_task, k * classes_per_task).
    """
    if n_tasks < 1 or samples_per_class < 1:
        raise InvalidInputError("n_tasks and samples_per_class must be >= 1")
    if classes_per_task < 2:
        raise InvalidInputError("each task needs at least 2 classes for the evidential head")

    rng = np.random.default_rng(seed)
    n_classes = n_tasks * classes_per_task
    means = toy_class_means(n_tasks, classes_per_task)

    x = np.concatenate([
        means[c] + TOY_STD * _truncated_normal(rng, samples_per_class, TOY_TRUNCATION)
        for c in range(n_classes)
    ])
    y = np.repeat(np.arange(n_classes), samples_per_class)
    _check_toy_margins(x, y)

    n_train = samples_per_class * 4 // 5
    is_train = np.tile(np.arange(samples_per_class) < n_train, n_classes)

    x_t = torch.from_numpy(x.astype(np.float32))
    y_t = torch.from_numpy(y.astype(np.int64))
    train_mask = torch.from_numpy(is_train)

    tasks = []
    for k in range(n_tasks):
        class_ids = tuple(range(k * classes_per_task, (k + 1) * classes_per_task))
        in_task = torch.isin(y_t, torch.tensor(class_ids))
        tasks.append(TaskSpec(
            task_id=k + 1,
            class_ids=class_ids,
            train_x=x_t[in_task & train_mask],
            train_y=y_t[in_task & train_mask],
            test_x=x_t[in_task & ~train_mask],
            test_y=y_t[in_task & ~train_mask],
        ))
    return TaskStream(tasks=tuple(tasks), total_classes=n_classes, shuffle_seed=seed, dataset_id="toy")


def toy_stream_to_frame(stream: TaskStream) -> pd.DataFrame:
    """Columnar view of a 2-D stream: x1, x2, label, task_id, split."""
    frames = []
    for task in stream.tasks:
        for split, x, y in (("train", task.train_x, task.train_y), ("test", task.test_x, task.test_y)):
            frames.append(pd.DataFrame({
                "x1": x[:, 0].numpy(),
                "x2": x[:, 1].numpy(),
                "label": y.numpy(),
                "task_id": task.task_id,
                "split": split,
            }))
    return pd.concat(frames, ignore_index=True)


def save_toy_stream_csv(stream: TaskStream, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    toy_stream_to_frame(stream).to_csv(path, index=False)
    return path


# -----------------------------
# 4) Augmentation and input preparation
# -----------------------------
def _flip_crop(batch: torch.Tensor, generator: torch.Generator, padding: int = 4) -> torch.Tensor:
    n, _, h, w = batch.shape
    flip = torch.rand(n, generator=generator) < 0.5
    out = torch.where(flip.view(n, 1, 1, 1), batch.flip(-1), batch)

    padded = torch.nn.functional.pad(out, (padding, padding, padding, padding))
    dx = torch.randint(0, 2 * padding + 1, (n,), generator=generator)
    dy = torch.randint(0, 2 * padding + 1, (n,), generator=generator)
    return torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])


def _randaugment(batch: torch.Tensor, seed: int, num_ops: int, magnitude: int) -> torch.Tensor:
    from torchvision.transforms import RandAugment

    policy = RandAugment(num_ops=num_ops, magnitude=magnitude)
    # RandAugment draws from the global RNG; fork it so the call is reproducible
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return torch.stack([policy(img) for img in batch])


def augment(batch: torch.Tensor, policy_id: str, seed: int, num_ops: int = 1, magnitude: int = 9) -> torch.Tensor:
    """
    Apply a named stochastic augmentation policy to an image batch.

    "none" is the identity and accepts any batch; "flip-crop" and
    "randaugment" need uint8 image batches (N, 3, H, W).
    """
    if policy_id not in AUGMENT_POLICIES:
        raise InvalidInputError(f"Unknown augmentation policy '{policy_id}'. Options: {AUGMENT_POLICIES}")
    if policy_id == "none":
        return batch
    if batch.dim() != 4 or batch.dtype != torch.uint8:
        raise InvalidInputError(f"Policy '{policy_id}' needs a uint8 image batch (N, C, H, W)")
    if len(batch) == 0:
        return batch

    if policy_id == "flip-crop":
        generator = torch.Generator().manual_seed(seed)
        return _flip_crop(batch, generator)
    return _randaugment(batch, seed, num_ops, magnitude)


def to_model_inputs(batch: torch.Tensor) -> torch.Tensor:
    """uint8 images -> normalized float32; float inputs pass through."""
    if batch.dtype == torch.uint8:
        return (batch.float() / 255.0 - CIFAR_MEAN) / CIFAR_STD
    return batch.float()
