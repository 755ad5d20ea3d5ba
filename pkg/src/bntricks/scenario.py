"""Class-incremental task streams over synthetic Gaussian classes."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .replay import Batch, ReplayBuffer


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration."""


@dataclass(frozen=True)
class StreamConfig:
    num_tasks: int = 5
    classes_per_task: int = 2
    input_dim: int = 32
    train_per_class: int = 400
    test_per_class: int = 100
    # distance of the first task's class means from their task centre
    mean_spread: float = 12.0
    # per-task multiplier on that distance; < 1 packs later classes closer together
    spread_decay: float = 0.25
    within_scale: float = 0.3
    # pull of each new task centre towards the centroid of all earlier class means
    overlap: float = 1.0
    # norm of a random offset added to every task centre
    task_shift: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_tasks", "classes_per_task", "input_dim", "train_per_class", "test_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"stream.{name} must be positive")
        if self.overlap < 0:
            raise ConfigError("stream.overlap must be non-negative")
        if self.within_scale <= 0:
            raise ConfigError("stream.within_scale must be positive")
        if not 0 < self.spread_decay <= 1:
            raise ConfigError("stream.spread_decay must lie in (0, 1]")
        if self.mean_spread < 0 or self.task_shift < 0:
            raise ConfigError("stream.mean_spread and stream.task_shift must be non-negative")
        if self.mean_spread == 0 and self.overlap > 0:
            raise ConfigError("overlap needs a non-zero mean_spread")

    @property
    def num_classes(self) -> int:
        return self.num_tasks * self.classes_per_task


@dataclass(frozen=True)
class Task:
    task_id: int
    classes: tuple[int, ...]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def __len__(self) -> int:
        return len(self.train_y)

    def train_batch(self) -> Batch:
        return Batch(self.train_x, self.train_y, np.full(len(self.train_y), self.task_id))


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[Task, ...]
    input_dim: int
    num_classes: int
    config: StreamConfig | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self) -> Iterator[Task]:
        return iter(self.tasks)

    def __getitem__(self, i: int) -> Task:
        return self.tasks[i]

    def check_disjoint(self) -> None:
        seen: set[int] = set()
        for task in self.tasks:
            if seen & set(task.classes):
                raise ConfigError(f"task {task.task_id} reuses classes {sorted(seen & set(task.classes))}")
            seen |= set(task.classes)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def make_gaussian_stream(config: StreamConfig) -> TaskStream:
    """Isotropic Gaussian class blobs, grouped into tasks with disjoint labels.

    Task t's classes sit at distance ``mean_spread * spread_decay**t`` from a
    task centre.  The centre is ``overlap`` times the centroid of every
    earlier class mean plus a random offset of norm ``task_shift``.  With
    ``overlap`` near 1 and ``spread_decay`` < 1, each new task lands inside
    the cloud of old classes with a smaller separation than theirs.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, k = config.input_dim, config.classes_per_task
    means = np.zeros((config.num_classes, d))
    for t in range(config.num_tasks):
        centre = np.zeros(d)
        if t > 0:
            centre = config.overlap * means[: t * k].mean(axis=0)
        if config.task_shift > 0:
            centre = centre + config.task_shift * _unit(rng.standard_normal(d))
        radius = config.mean_spread * config.spread_decay ** t
        for c in range(t * k, (t + 1) * k):
            means[c] = centre + radius * _unit(rng.standard_normal(d))

    tasks = []
    for t in range(config.num_tasks):
        classes = tuple(range(t * k, (t + 1) * k))
        parts = {}
        for split, n in (("train", config.train_per_class), ("test", config.test_per_class)):
            xs = [means[c] + config.within_scale * rng.standard_normal((n, d)) for c in classes]
            parts[split] = (np.concatenate(xs), np.repeat(np.array(classes, dtype=np.int64), n))
        tasks.append(Task(t, classes, *parts["train"], *parts["test"]))
    stream = TaskStream(tuple(tasks), d, config.num_classes, config)
    stream.check_disjoint()
    return stream


def iterate_online(task: Task | Batch, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    """One shuffled pass; every sample appears once and the short tail batch is kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    data = task.train_batch() if isinstance(task, Task) else task
    order = rng.permutation(len(data))
    for start in range(0, len(order), batch_size):
        yield data.subset(order[start:start + batch_size])


def iterate_offline_mixed(
    task: Task, buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator
) -> Iterator[Batch]:
    """Shuffled pass over the task's training data pooled with the buffer contents."""
    data = task.train_batch()
    if len(buffer):
        stored = buffer.as_batch()
        stored.logits = None
        data = Batch.concat(data, stored)
    return iterate_online(data, batch_size, rng)


# CSV interchange: split,task_id,label,x_0..x_{D-1}


def export_stream_csv(stream: TaskStream, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "task_id", "label"] + [f"x_{i}" for i in range(stream.input_dim)])
        for task in stream:
            for split, xs, ys in (("train", task.train_x, task.train_y), ("test", task.test_x, task.test_y)):
                for x, y in zip(xs, ys):
                    writer.writerow([split, task.task_id, int(y)] + [repr(float(v)) for v in x])


def import_stream_csv(path: str | Path, num_classes: int | None = None) -> TaskStream:
    rows: dict[tuple[int, str], list[tuple[int, list[float]]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["split", "task_id", "label"]:
            raise ConfigError(f"{path}: unexpected header {header[:3]}")
        dim = len(header) - 3
        for row in reader:
            split, tid, label = row[0], int(row[1]), int(row[2])
            if split not in ("train", "test"):
                raise ConfigError(f"{path}: unknown split {split!r}")
            rows.setdefault((tid, split), []).append((label, [float(v) for v in row[3:]]))
    task_ids = sorted({tid for tid, _ in rows})
    tasks = []
    for tid in task_ids:
        parts = []
        for split in ("train", "test"):
            items = rows.get((tid, split), [])
            xs = np.array([x for _, x in items], dtype=np.float64).reshape(len(items), dim)
            ys = np.array([y for y, _ in items], dtype=np.int64)
            parts += [xs, ys]
        classes = tuple(sorted(set(parts[1].tolist())))
        tasks.append(Task(tid, classes, *parts))
    total = num_classes if num_classes is not None else 1 + max(max(t.classes) for t in tasks)
    stream = TaskStream(tuple(tasks), dim, total)
    stream.check_disjoint()
    return stream
