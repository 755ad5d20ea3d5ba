"""Multi-seed experiment execution, aggregation and result persistence.

Files written to the output directory:

``results.csv``
    ``seed,method,after_task,eval_task,accuracy`` -- one row per defined
    entry of each seed's accuracy matrix, accuracy printed with 17
    significant digits.
``summary.json``
    ``method, acc_mean, acc_std, bwt_mean, bwt_std, seeds, fingerprint``
    plus ``per_seed`` (acc/bwt/error per seed), ``failed`` and
    ``wall_clock_s``.  Standard deviations are sample (n - 1) deviations.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, fingerprint, serialize_config
from .evaluation import (
    ClassMeans,
    acc_metric,
    bwt_metric,
    compute_class_means,
    ema_drift_probe,
    evaluate_task,
    export_activations,
    write_activations_csv,
)
from .model import MlpModel
from .replay import BufferEntry, ReplayBuffer, balance, sample_buffer
from .scenario import ConfigError, TaskStream, iterate_online, make_gaussian_stream
from .strategies import Learner

logger = logging.getLogger(__name__)

OUT_DIR_ENV = "CLBENCH_OUT_DIR"


@dataclass
class SeedResult:
    seed: int
    R: np.ndarray | None = None
    acc: float | None = None
    bwt: float | None = None
    error: str | None = None
    drift: dict | None = None
    ema_checks: int = 0
    ema_violations: int = 0


@dataclass
class ResultRecord:
    method: str
    fingerprint: str
    per_seed: list[SeedResult] = field(default_factory=list)
    acc_mean: float | None = None
    acc_std: float | None = None
    bwt_mean: float | None = None
    bwt_std: float | None = None
    wall_clock: float = 0.0

    @property
    def ok(self) -> list[SeedResult]:
        return [r for r in self.per_seed if r.error is None]

    @property
    def failed(self) -> bool:
        return not self.ok

    def accs(self) -> dict[int, float]:
        return {r.seed: r.acc for r in self.ok}

    def summary(self) -> dict:
        return {
            "method": self.method,
            "acc_mean": self.acc_mean,
            "acc_std": self.acc_std,
            "bwt_mean": self.bwt_mean,
            "bwt_std": self.bwt_std,
            "seeds": [r.seed for r in self.per_seed],
            "fingerprint": self.fingerprint,
            "failed": self.failed,
            "per_seed": [
                {"seed": r.seed, "acc": r.acc, "bwt": r.bwt, "error": r.error,
                 "ema_checks": r.ema_checks, "ema_violations": r.ema_violations,
                 **({"drift": r.drift} if r.drift is not None else {})}
                for r in self.per_seed
            ],
            "wall_clock_s": self.wall_clock,
        }


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.array(values)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def aggregate(record: ResultRecord) -> None:
    """Recompute the aggregates from the per-seed entries, in seed order."""
    rows = sorted(record.ok, key=lambda r: r.seed)
    record.acc_mean, record.acc_std = _mean_std([r.acc for r in rows])
    record.bwt_mean, record.bwt_std = _mean_std([r.bwt for r in rows if r.bwt is not None])


@dataclass
class SeedRun:
    """Live objects of one finished seed, kept for probes and checkpoints."""

    result: SeedResult
    stream: TaskStream
    learner: Learner

    @property
    def model(self) -> MlpModel:
        return self.learner.model


def build_learner(config: ExperimentConfig, seed: int, num_classes: int) -> Learner:
    init_seq, train_seq = np.random.SeedSequence(seed).spawn(2)
    model = MlpModel(
        config.stream.input_dim, config.model.hidden, num_classes,
        np.random.default_rng(init_seq), config.model.momentum, config.model.eps,
    )
    return Learner(model, config.strategy, ReplayBuffer(config.experiment.buffer_size), np.random.default_rng(train_seq))


def class_means_for(config: ExperimentConfig, learner: Learner) -> ClassMeans | None:
    return compute_class_means(learner.model, learner.buffer) if config.classifier == "ncm" else None


def evaluate_all(config, learner, tasks) -> np.ndarray:
    means = class_means_for(config, learner)
    return np.array([evaluate_task(learner.model, t.test_x, t.test_y, config.classifier, means) for t in tasks])


def run_seed(config: ExperimentConfig, seed: int, stream: TaskStream | None = None) -> SeedRun:
    stream = stream if stream is not None else make_gaussian_stream(config.stream)
    learner = build_learner(config, seed, stream.num_classes)
    T = len(stream)
    R = np.full((T, T), np.nan)
    for i, task in enumerate(stream):
        learner.run_task(task, config.experiment.epochs)
        R[i, : i + 1] = evaluate_all(config, learner, stream.tasks[: i + 1])
    result = SeedResult(
        seed, R, acc_metric(R), bwt_metric(R),
        ema_checks=learner.audit.checks, ema_violations=learner.audit.violations,
    )
    return SeedRun(result, stream, learner)


def last_task_batches(run: SeedRun, n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    task = run.stream.tasks[-1]
    out: list[np.ndarray] = []
    while len(out) < n:
        out += [b.x for b in iterate_online(task, batch_size, rng)]
    return out[:n]


def balanced_batches(run: SeedRun, n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Balanced batches built the way the BN-Tricks refresh builds them: buffer draw topped up from the last task."""
    task = run.stream.tasks[-1]
    buffer = run.learner.buffer
    dim = task.train_x.shape[1]
    out: list[np.ndarray] = []
    while len(out) < n:
        for b_t in iterate_online(task, batch_size, rng):
            out.append(balance(b_t, sample_buffer(buffer, batch_size, rng, dim), rng).x)
    return out[:n]


def drift_probe(config: ExperimentConfig, run: SeedRun, seed: int) -> dict:
    """Per-task accuracy before/after EMA-only refreshes with last-task and with balanced batches."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    n, k = config.probe.drift_batches, config.strategy.batch_size
    means = class_means_for(config, run.learner)
    tasks = run.stream.tasks
    before, after_last = ema_drift_probe(run.model, last_task_batches(run, n, k, rng), tasks, config.classifier, means)
    _, after_bal = ema_drift_probe(run.model, balanced_batches(run, n, k, rng), tasks, config.classifier, means)
    return {"before": before.tolist(), "after_last_task": after_last.tolist(), "after_balanced": after_bal.tolist()}


def resolve_out_dir(config: ExperimentConfig, override: str | None = None) -> Path:
    if override:
        return Path(override)
    env = os.environ.get(OUT_DIR_ENV)
    return Path(env) if env else Path(config.experiment.out_dir)


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None, write: bool = True) -> ResultRecord:
    """Run every seed, aggregate, and (optionally) persist ``results.csv`` and ``summary.json``.

    A failing seed is recorded with its error and the remaining seeds still run.
    """
    config.validate()
    start = time.perf_counter()
    record = ResultRecord(config.strategy.method.value, fingerprint(config))
    stream = make_gaussian_stream(config.stream)
    target = resolve_out_dir(config, str(out_dir) if out_dir is not None else None)
    for seed in config.experiment.seeds:
        try:
            run = run_seed(config, seed, stream)
            if config.probe.ema_drift:
                run.result.drift = drift_probe(config, run, seed)
            if write and config.probe.save_checkpoint:
                target.mkdir(parents=True, exist_ok=True)
                save_checkpoint(run, target / f"checkpoint_seed{seed}.npz")
            if write and config.probe.export_activations:
                target.mkdir(parents=True, exist_ok=True)
                x = np.concatenate([t.test_x for t in stream])
                y = np.concatenate([t.test_y for t in stream])
                write_activations_csv(target / f"activations_seed{seed}.csv", *export_activations(run.model, x, y))
            record.per_seed.append(run.result)
        except Exception as exc:  # one bad seed must not sink the others
            logger.warning("seed %s failed: %s", seed, exc)
            logger.debug("%s", traceback.format_exc())
            record.per_seed.append(SeedResult(seed, error=f"{type(exc).__name__}: {exc}"))
    aggregate(record)
    record.wall_clock = time.perf_counter() - start
    if write:
        write_results(record, target, config)
    return record


def write_results(record: ResultRecord, out_dir: Path, config: ExperimentConfig | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["seed,method,after_task,eval_task,accuracy"]
    for r in record.per_seed:
        if r.R is None:
            continue
        for i in range(r.R.shape[0]):
            for j in range(i + 1):
                lines.append(f"{r.seed},{record.method},{i},{j},{r.R[i, j]:.17g}")
    (out_dir / "results.csv").write_text("\n".join(lines) + "\n")
    (out_dir / "summary.json").write_text(json.dumps(record.summary(), indent=2, sort_keys=True) + "\n")
    if config is not None:
        (out_dir / "config.cfg").write_text(serialize_config(config))


def load_results(out_dir: str | Path) -> ResultRecord:
    """Rebuild a record from ``results.csv`` + ``summary.json`` and recompute its aggregates."""
    out_dir = Path(out_dir)
    summary = json.loads((out_dir / "summary.json").read_text())
    entries: dict[int, dict[tuple[int, int], float]] = {}
    for line in (out_dir / "results.csv").read_text().splitlines()[1:]:
        seed, _, i, j, acc = line.split(",")
        entries.setdefault(int(seed), {})[(int(i), int(j))] = float(acc)
    record = ResultRecord(summary["method"], summary["fingerprint"])
    errors = {row["seed"]: row.get("error") for row in summary.get("per_seed", [])}
    for seed in summary["seeds"]:
        if seed not in entries:
            record.per_seed.append(SeedResult(seed, error=errors.get(seed) or "missing"))
            continue
        T = 1 + max(i for i, _ in entries[seed])
        R = np.full((T, T), np.nan)
        for (i, j), acc in entries[seed].items():
            R[i, j] = acc
        record.per_seed.append(SeedResult(seed, R, acc_metric(R), bwt_metric(R)))
    aggregate(record)
    return record


# comparison


@dataclass
class Comparison:
    rows: list[tuple[str, float | None, float | None, float | None, float | None]]
    wins: dict[tuple[str, str], float] | None = None
    paired_seeds: int = 0

    HEADER = ("method", "acc_mean", "acc_std", "bwt_mean", "bwt_std")

    def to_csv(self) -> str:
        def fmt(v):
            return "" if v is None else f"{v:.6f}"

        lines = [",".join(self.HEADER)]
        lines += [",".join([m] + [fmt(v) for v in rest]) for m, *rest in self.rows]
        return "\n".join(lines) + "\n"

    def wins_csv(self) -> str:
        lines = ["method_a,method_b,wins_a_over_b,seeds"]
        for (a, b), w in (self.wins or {}).items():
            lines.append(f"{a},{b},{w:g},{self.paired_seeds}")
        return "\n".join(lines) + "\n"


def paired_wins(a: dict[int, float], b: dict[int, float]) -> float:
    """Seeds where ``a`` beats ``b``; a tie counts as half a win."""
    shared = sorted(set(a) & set(b))
    return sum(1.0 if a[s] > b[s] else 0.5 if a[s] == b[s] else 0.0 for s in shared)


def compare_records(
    records: list[ResultRecord],
    labels: list[str] | None = None,
) -> Comparison:
    labels = labels or [r.method for r in records]
    rows = [(lab, r.acc_mean, r.acc_std, r.bwt_mean, r.bwt_std) for lab, r in zip(labels, records)]
    comp = Comparison(rows)
    comp.wins = {}
    comp.paired_seeds = len(set.intersection(*(set(r.accs()) for r in records))) if records else 0
    for la, ra in zip(labels, records):
        for lb, rb in zip(labels, records):
            if la != lb:
                comp.wins[(la, lb)] = paired_wins(ra.accs(), rb.accs())
    return comp


def compare_methods(
    configs: list[ExperimentConfig],
    paired_seeds: bool = True,
    out_dir: str | Path | None = None,
) -> Comparison:
    """Run every config and tabulate ACC/BWT; with ``paired_seeds`` also per-seed win counts."""
    if paired_seeds and configs:
        ref = configs[0]
        for cfg in configs[1:]:
            if cfg.stream != ref.stream or tuple(cfg.experiment.seeds) != tuple(ref.experiment.seeds):
                raise ConfigError("paired comparison needs identical streams and seed lists")
    records, labels = [], []
    for i, cfg in enumerate(configs):
        label = cfg.strategy.method.value
        if label in labels:
            label = f"{label}#{i}"
        sub = None if out_dir is None else Path(out_dir) / f"{i:02d}_{label.replace('#', '_')}"
        records.append(run_experiment(cfg, sub, write=sub is not None))
        labels.append(label)
    comp = compare_records(records, labels)
    if not paired_seeds:
        comp.wins = None
    return comp


# checkpoints


def save_checkpoint(run: SeedRun, path: str | Path) -> None:
    learner = run.learner
    buf = learner.buffer
    batch = buf.as_batch(dim=learner.model.input_dim)
    arrays = {f"model__{k}": v for k, v in learner.model.state_dict().items()}
    arrays["buffer_x"] = batch.x
    arrays["buffer_y"] = batch.y
    arrays["buffer_task"] = batch.task_id
    if batch.logits is not None:
        arrays["buffer_logits"] = batch.logits
    arrays["buffer_meta"] = np.array([buf.capacity, buf.seen_count, run.result.seed])
    np.savez(path, **arrays)


def load_checkpoint(config: ExperimentConfig, path: str | Path) -> SeedRun:
    try:
        data = np.load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
    capacity, seen, seed = (int(v) for v in data["buffer_meta"])
    stream = make_gaussian_stream(config.stream)
    learner = build_learner(config, seed, stream.num_classes)
    learner.model.load_state_dict({k[len("model__"):]: data[k] for k in data.files if k.startswith("model__")})
    logits = data["buffer_logits"] if "buffer_logits" in data.files else None
    learner.buffer = ReplayBuffer(capacity, [
        BufferEntry(x.copy(), int(y), int(t), None if logits is None else logits[i].copy())
        for i, (x, y, t) in enumerate(zip(data["buffer_x"], data["buffer_y"], data["buffer_task"]))
    ], seen)
    learner.tasks_done = len(stream)
    result = SeedResult(seed)
    return SeedRun(result, stream, learner)


def format_table(comp: Comparison) -> str:
    def pct(v):
        return "   n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:6.2f}"

    width = max(len(r[0]) for r in comp.rows) if comp.rows else 6
    out = [f"{'method':<{width}}  ACC             BWT"]
    for m, am, asd, bm, bsd in comp.rows:
        out.append(f"{m:<{width}}  {pct(am)} ± {pct(asd).strip():>5}  {pct(bm)} ± {pct(bsd).strip():>5}")
    return "\n".join(out)
