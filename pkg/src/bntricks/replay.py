"""Exemplar buffer, reservoir and herding policies, and batch construction."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .autodiff import ContractError


@dataclass
class Batch:
    """A stack of samples; ``logits`` rows are the teacher logits stored for DER++."""

    x: np.ndarray
    y: np.ndarray
    task_id: np.ndarray | None = None
    logits: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.task_id is None:
            self.task_id = np.zeros(len(self.y), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def empty(self) -> bool:
        return len(self.y) == 0

    def subset(self, idx) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(
            self.x[idx], self.y[idx], self.task_id[idx],
            None if self.logits is None else self.logits[idx],
        )

    @staticmethod
    def empty_like(dim: int) -> Batch:
        return Batch(np.zeros((0, dim)), np.zeros(0, dtype=np.int64))

    @staticmethod
    def concat(*batches: Batch) -> Batch:
        parts = [b for b in batches if not b.empty] or list(batches[:1])
        logits = None
        if all(b.logits is not None for b in parts):
            logits = np.concatenate([b.logits for b in parts])
        return Batch(
            np.concatenate([b.x for b in parts]),
            np.concatenate([b.y for b in parts]),
            np.concatenate([b.task_id for b in parts]),
            logits,
        )


@dataclass
class BufferEntry:
    input: np.ndarray
    label: int
    task_id: int
    stored_logits: np.ndarray | None = None


@dataclass
class ReplayBuffer:
    capacity: int
    entries: list[BufferEntry] = field(default_factory=list)
    seen_count: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ContractError(f"buffer capacity must be positive, got {self.capacity}")

    def __len__(self) -> int:
        return len(self.entries)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def as_batch(self, idx: Iterable[int] | None = None, dim: int | None = None) -> Batch:
        chosen = self.entries if idx is None else [self.entries[i] for i in idx]
        if not chosen:
            return Batch.empty_like(dim if dim is not None else 0)
        logits = None
        if all(e.stored_logits is not None for e in chosen):
            logits = np.stack([e.stored_logits for e in chosen])
        return Batch(
            np.stack([e.input for e in chosen]),
            np.array([e.label for e in chosen]),
            np.array([e.task_id for e in chosen]),
            logits,
        )

    def dump_csv(self, path: str | Path) -> None:
        """Write ``task_id,label,x_*,logit_*`` rows for debugging.

        Logit columns appear only when every entry carries stored logits.
        """
        rows = self.entries
        dim = len(rows[0].input) if rows else 0
        with_logits = bool(rows) and all(e.stored_logits is not None for e in rows)
        n_logits = len(rows[0].stored_logits) if with_logits else 0
        header = ["task_id", "label"] + [f"x_{i}" for i in range(dim)] + [f"logit_{i}" for i in range(n_logits)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for e in rows:
                row = [e.task_id, e.label] + [repr(float(v)) for v in e.input]
                if with_logits:
                    row += [repr(float(v)) for v in e.stored_logits]
                writer.writerow(row)


def reservoir_offer(buffer: ReplayBuffer, entry: BufferEntry, rng: np.random.Generator) -> None:
    if buffer.seen_count < buffer.capacity:
        buffer.entries.append(entry)
    else:
        slot = int(rng.integers(0, buffer.seen_count + 1))
        if slot < buffer.capacity:
            buffer.entries[slot] = entry
    buffer.seen_count += 1


def offer_batch(buffer: ReplayBuffer, batch: Batch, rng: np.random.Generator) -> None:
    for i in range(len(batch)):
        reservoir_offer(
            buffer,
            BufferEntry(
                batch.x[i].copy(), int(batch.y[i]), int(batch.task_id[i]),
                None if batch.logits is None else batch.logits[i].copy(),
            ),
            rng,
        )


def sample_buffer(buffer: ReplayBuffer, k: int, rng: np.random.Generator, dim: int | None = None) -> Batch:
    """Uniform draw of ``min(k, len(buffer))`` entries without replacement."""
    n = len(buffer)
    if n == 0:
        return Batch.empty_like(dim or 0)
    idx = rng.choice(n, size=min(k, n), replace=False)
    return buffer.as_batch(idx)


def sample_prev_only(
    buffer: ReplayBuffer, current_classes, k: int, rng: np.random.Generator, dim: int | None = None
) -> Batch:
    """Like :func:`sample_buffer` but restricted to labels outside ``current_classes``."""
    labels = buffer.labels()
    eligible = np.flatnonzero(~np.isin(labels, np.asarray(list(current_classes))))
    if eligible.size == 0:
        return Batch.empty_like(dim or 0)
    pick = rng.choice(eligible.size, size=min(k, eligible.size), replace=False)
    return buffer.as_batch(eligible[pick])


def balance(b_t: Batch, b_m: Batch, rng: np.random.Generator) -> Batch:
    """Top up each current class in ``b_m`` to the per-class target using rows of ``b_t``.

    The target is ``ceil(len(b_m) / distinct classes in b_m)``; existing
    over-represented classes are never trimmed.
    """
    if b_t.empty:
        raise ContractError("balance needs a non-empty current batch")
    if b_m.empty:
        return b_t
    mem_classes, mem_counts = np.unique(b_m.y, return_counts=True)
    target = math.ceil(len(b_m) / len(mem_classes))
    have = dict(zip(mem_classes.tolist(), mem_counts.tolist()))
    picks = []
    for c in np.unique(b_t.y):
        need = target - have.get(int(c), 0)
        if need <= 0:
            continue
        pool = np.flatnonzero(b_t.y == c)
        picks.append(rng.choice(pool, size=min(need, pool.size), replace=False))
    if not picks:
        return b_m
    extra = b_t.subset(np.concatenate(picks))
    if b_m.logits is None or extra.logits is None:
        b_m = Batch(b_m.x, b_m.y, b_m.task_id)
        extra.logits = None
    return Batch.concat(b_m, extra)


def herding_select(features: np.ndarray, m: int) -> list[int]:
    """Greedy herding: each pick brings the running exemplar mean closest to the class mean.

    Ties go to the lowest index.  The order is a prefix code, so the first
    ``k`` picks for ``m`` equal the picks for ``k``.
    """
    feats = np.asarray(features, dtype=np.float64)
    n = feats.shape[0]
    if not 1 <= m <= n:
        raise ContractError(f"herding_select needs 1 <= m <= n, got m={m}, n={n}")
    target = feats.mean(axis=0)
    running = np.zeros_like(target)
    available = np.ones(n, dtype=bool)
    order: list[int] = []
    for k in range(1, m + 1):
        dist = np.linalg.norm(target - (running + feats) / k, axis=1)
        dist[~available] = np.inf
        i = int(np.argmin(dist))
        order.append(i)
        available[i] = False
        running += feats[i]
    return order


def l2_normalize(feats: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    return feats / np.maximum(norms, 1e-12)


def icarl_rebuild_buffer(model, task_x: np.ndarray, task_y: np.ndarray, task_id: int, buffer: ReplayBuffer) -> None:
    """Shrink stored classes to the new quota and add herded exemplars for each new class.

    Entries are kept grouped by class in herding order, so truncation keeps
    the best prefix.
    """
    new_classes = sorted(set(np.asarray(task_y).tolist()))
    old_classes = sorted({e.label for e in buffer.entries} - set(new_classes))
    quota = buffer.capacity // (len(old_classes) + len(new_classes))
    kept: list[BufferEntry] = []
    for c in old_classes:
        kept += [e for e in buffer.entries if e.label == c][:quota]
    if quota > 0:
        for c in new_classes:
            idx = np.flatnonzero(task_y == c)
            feats = l2_normalize(model.features(task_x[idx]))
            for j in herding_select(feats, min(quota, idx.size)):
                kept.append(BufferEntry(task_x[idx[j]].copy(), int(c), task_id))
    buffer.entries = kept
    buffer.seen_count += len(task_y)
