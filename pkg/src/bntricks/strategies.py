"""Per-batch training steps for ER, DER++, iCaRL, their BN-Tricks variants and ablations.

Every step takes the batches it trains on explicitly, so the equivalences
between variants can be checked on identical inputs.  :class:`Learner`
drives the steps over a task: it draws the batches, offers samples to the
buffer and rebuilds iCaRL exemplars.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, Tensor, logit_mse_loss, sgd_step, sigmoid, sigmoid_bce_loss, softmax_ce_loss
from .model import MlpModel
from .normalization import INFERENCE, TRAIN, TRAIN_FROZEN, NormMode, ema_refresh_pass
from .replay import (
    Batch,
    ReplayBuffer,
    balance,
    icarl_rebuild_buffer,
    offer_batch,
    sample_buffer,
    sample_prev_only,
)
from .scenario import ConfigError, Task, iterate_offline_mixed, iterate_online


class Method(str, enum.Enum):
    SGD_only = "SGD_only"
    ER = "ER"
    ER_BalanceBatch = "ER_BalanceBatch"
    ER_CurBuf = "ER_CurBuf"
    ER_CurPrev = "ER_CurPrev"
    ER_BNT = "ER_BNT"
    ER_BalanceJointTrain = "ER_BalanceJointTrain"
    ER_BNT_NoSimulator = "ER_BNT_NoSimulator"
    ER_BNT_ImbalanceTracker = "ER_BNT_ImbalanceTracker"
    DERpp = "DERpp"
    DERpp_BNT = "DERpp_BNT"
    iCaRL = "iCaRL"
    iCaRL_Concat = "iCaRL_Concat"
    iCaRL_BNT = "iCaRL_BNT"
    iCaRL_BNT_NoSimulator = "iCaRL_BNT_NoSimulator"
    iCaRL_BNT_ImbalanceTracker = "iCaRL_BNT_ImbalanceTracker"

    @property
    def is_icarl(self) -> bool:
        return self.value.startswith("iCaRL")

    @property
    def is_derpp(self) -> bool:
        return self.value.startswith("DERpp")

    @property
    def is_bnt(self) -> bool:
        return self in _SEPARATE_EMA


# methods whose EMA is refreshed by a dedicated balanced pass
_SEPARATE_EMA = {
    Method.ER_BNT, Method.ER_BalanceJointTrain, Method.ER_BNT_NoSimulator,
    Method.DERpp_BNT, Method.iCaRL_BNT, Method.iCaRL_BNT_NoSimulator,
}


@dataclass
class StrategyConfig:
    method: Method = Method.ER
    lr: float = 0.03
    batch_size: int = 32
    derpp_alpha: float = 0.2
    derpp_beta: float = 0.5
    icarl_weight_decay: float = 1e-4
    # "batch" normalizes parameter-update passes of *-BNT by their own moments,
    # "running" by the frozen EMA
    bnt_train_stats: str = "batch"
    # compute iCaRL-BNT's buffer loss with EMA updating, as Alg. 2 reads literally
    icarl_literal_lb_update: bool = False

    def __post_init__(self):
        self.method = Method(self.method)
        if self.bnt_train_stats not in ("batch", "running"):
            raise ConfigError(f"strategy.bnt_train_stats must be 'batch' or 'running', got {self.bnt_train_stats!r}")
        if self.batch_size < 1:
            raise ConfigError("strategy.batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("strategy.lr must be positive")

    @property
    def frozen_mode(self) -> NormMode:
        return TRAIN_FROZEN if self.bnt_train_stats == "batch" else INFERENCE


@dataclass
class EmaAudit:
    """Counts parameter-update sections that were required to leave the EMA untouched."""

    checks: int = 0
    violations: int = 0

    def snapshot(self, model: MlpModel):
        return model.running_stats()

    def verify(self, model: MlpModel, before) -> None:
        self.checks += 1
        after = model.running_stats()
        for (m0, v0), (m1, v1) in zip(before, after):
            if not (np.array_equal(m0, m1) and np.array_equal(v0, v1)):
                self.violations += 1
                return


def _apply(model: MlpModel, loss: Tensor, lr: float, weight_decay: float = 0.0) -> float:
    loss.backward()
    sgd_step(model.parameters(), lr, weight_decay)
    return loss.item()


def _ce(model: MlpModel, batch: Batch, mode: NormMode) -> tuple[Tensor, Tensor]:
    logits = model(batch.x, mode)
    return softmax_ce_loss(logits, batch.y), logits


# ER family


def _concat_step(model: MlpModel, b_t: Batch, b_m: Batch, copies: int, lr: float) -> float:
    if b_m.empty:
        loss, _ = _ce(model, b_t, TRAIN)
        return _apply(model, loss, lr)
    batch = Batch.concat(b_t, *([b_m] * copies))
    logits = model(batch.x, TRAIN)
    if copies == 1:
        loss = softmax_ce_loss(logits, batch.y)
    else:
        weights = np.concatenate([np.ones(len(b_t)), np.full(copies * len(b_m), 1.0 / copies)])
        loss = softmax_ce_loss(logits, batch.y, weights=weights, normalizer=len(b_t) + len(b_m))
    return _apply(model, loss, lr)


def step_er(model: MlpModel, b_t: Batch, b_m: Batch, lr: float) -> float:
    """One forward of the concatenation ``b_t + b_m`` with EMA tracking, then SGD."""
    return _concat_step(model, b_t, b_m, 1, lr)


def step_er_balance_batch(model: MlpModel, b_t: Batch, b_m: Batch, t: int, lr: float) -> float:
    """ER with ``t - 1`` copies of the buffer batch in the forward pass.

    Copies carry loss weight ``1 / (t - 1)``, so the loss equals ER's and
    only the BN moments see the duplication.
    """
    if t < 1:
        raise ContractError(f"task index must be >= 1, got {t}")
    return _concat_step(model, b_t, b_m, max(t - 1, 1), lr)


def step_er_cur_x(model: MlpModel, b_t: Batch, b_other: Batch, lr: float) -> float:
    """Separate forwards of ``b_t`` and ``b_other``; each updates the EMA. Losses are summed."""
    loss, _ = _ce(model, b_t, TRAIN)
    if not b_other.empty:
        other, _ = _ce(model, b_other, TRAIN)
        loss = loss + other
    return _apply(model, loss, lr)


def _bnt_losses(model, batches, mode, audit):
    before = audit.snapshot(model) if audit is not None else None
    total, logits = None, []
    for batch in batches:
        if batch.empty:
            logits.append(None)
            continue
        loss, out = _ce(model, batch, mode)
        logits.append(out)
        total = loss if total is None else total + loss
    return total, logits, before


def step_er_bnt(
    model: MlpModel,
    b_t: Batch,
    b_m: Batch,
    rng: np.random.Generator,
    lr: float,
    mode: NormMode = TRAIN_FROZEN,
    audit: EmaAudit | None = None,
) -> float:
    """Refresh the EMA on a balanced batch, then train on ``b_t`` and ``b_m`` with the EMA frozen."""
    ema_refresh_pass(model, balance(b_t, b_m, rng).x)
    loss, _, before = _bnt_losses(model, [b_t, b_m], mode, audit)
    if audit is not None:
        audit.verify(model, before)
    return _apply(model, loss, lr)


def step_er_balance_joint_train(model, b_t, b_m, rng, lr, mode=TRAIN_FROZEN, audit=None) -> float:
    """Balanced EMA refresh; parameters trained on ``b_t + b_m`` concatenated and on ``b_m`` alone."""
    ema_refresh_pass(model, balance(b_t, b_m, rng).x)
    joint = Batch.concat(b_t, b_m) if not b_m.empty else b_t
    loss, _, before = _bnt_losses(model, [joint, b_m], mode, audit)
    if audit is not None:
        audit.verify(model, before)
    return _apply(model, loss, lr)


def step_er_bnt_no_simulator(model, b_t, b_m, current_classes, rng, lr, mode=TRAIN_FROZEN, audit=None) -> float:
    """ER-BNT with current-task samples removed from the buffer batch before training."""
    ema_refresh_pass(model, balance(b_t, b_m, rng).x)
    keep = np.flatnonzero(~np.isin(b_m.y, list(current_classes)))
    b_p = b_m.subset(keep)
    loss, _, before = _bnt_losses(model, [b_t, b_p], mode, audit)
    if audit is not None:
        audit.verify(model, before)
    return _apply(model, loss, lr)


# DER++


def _check_logits(batch: Batch, num_classes: int) -> None:
    if batch.empty:
        return
    if batch.logits is None:
        raise ContractError("buffer batch has no stored logits (entry 0)")
    bad = np.flatnonzero(~np.all(np.isfinite(batch.logits), axis=1))
    if bad.size:
        raise ContractError(f"stored logits of buffer entry {int(bad[0])} are not finite")
    if batch.logits.shape[1] != num_classes:
        raise ContractError(f"stored logits have {batch.logits.shape[1]} classes, model head has {num_classes}")


def step_derpp(
    model: MlpModel,
    b_t: Batch,
    b_m1: Batch,
    b_m2: Batch,
    alpha: float,
    beta: float,
    bnt: bool,
    lr: float,
    rng: np.random.Generator | None = None,
    mode: NormMode = TRAIN_FROZEN,
    audit: EmaAudit | None = None,
) -> tuple[float, np.ndarray]:
    """DER++ loss ``CE(b_t) + alpha * MSE(b_m1) + beta * CE(b_m2)``.

    With ``bnt`` the balanced EMA refresh runs first, ``b_m1`` serves both
    buffer terms (``b_m2`` is ignored) and all forwards keep the EMA frozen.
    Returns the loss and the logits of ``b_t``, which the caller stores with
    the samples it offers to the buffer.
    """
    _check_logits(b_m1, model.num_classes)
    if bnt:
        if rng is None:
            raise ContractError("DER++-BNT needs an rng for batch balancing")
        ema_refresh_pass(model, balance(b_t, b_m1, rng).x)
        before = audit.snapshot(model) if audit is not None else None
        loss, logits_t = _ce(model, b_t, mode)
        if not b_m1.empty:
            ce_m, logits_m = _ce(model, b_m1, mode)
            loss = loss + (alpha * logit_mse_loss(logits_m, b_m1.logits) + beta * ce_m)
        if audit is not None:
            audit.verify(model, before)
    else:
        _check_logits(b_m2, model.num_classes)
        loss, logits_t = _ce(model, b_t, TRAIN)
        if not b_m1.empty:
            loss = loss + alpha * logit_mse_loss(model(b_m1.x, TRAIN), b_m1.logits)
        if not b_m2.empty:
            ce_m, _ = _ce(model, b_m2, TRAIN)
            loss = loss + beta * ce_m
    stored = logits_t.data.copy()
    return _apply(model, loss, lr), stored


# iCaRL


def icarl_targets(
    teacher: MlpModel | None,
    batch: Batch,
    current_classes,
    previous_classes,
    num_classes: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Targets and the class columns they cover.

    Current classes get one-hot labels; previously seen classes get the
    teacher's sigmoid outputs.  Classes not yet seen are left out entirely.
    """
    current = sorted(current_classes)
    previous = sorted(previous_classes)
    targets = np.zeros((len(batch), num_classes))
    rows = np.arange(len(batch))
    is_current = np.isin(batch.y, current)
    targets[rows[is_current], batch.y[is_current]] = 1.0
    if previous:
        if teacher is None:
            raise ContractError("previous classes need a teacher snapshot for distillation targets")
        targets[:, previous] = sigmoid(teacher.predict_logits(batch.x))[:, previous]
    columns = np.array(previous + current, dtype=np.int64)
    return targets, columns


def _bce(model, teacher, batch, mode, current, previous):
    targets, cols = icarl_targets(teacher, batch, current, previous, model.num_classes)
    logits = model(batch.x, mode)
    return sigmoid_bce_loss(logits[:, cols], targets[:, cols])


def icarl_lambda(buffer_size: int, task_size: int) -> float:
    if task_size == 0:
        raise ConfigError("buffer weighting needs a non-empty task")
    return buffer_size / task_size


def step_icarl(
    model: MlpModel,
    teacher: MlpModel | None,
    b_t: Batch,
    current_classes,
    previous_classes,
    lr: float,
    weight_decay: float,
    method: Method = Method.iCaRL,
    b_m: Batch | None = None,
    lam: float = 0.0,
    rng: np.random.Generator | None = None,
    mode: NormMode = TRAIN_FROZEN,
    literal_lb_update: bool = False,
    audit: EmaAudit | None = None,
) -> float:
    """One iCaRL-family update.

    ``iCaRL`` trains on ``b_t`` as given (already a mixed loader batch).
    ``iCaRL_Concat`` trains on ``b_t + b_m`` concatenated.  The BNT variants
    compute ``L_t + lam * L_buf`` where the buffer-side batch is the balanced
    batch (BNT, Imbalance-Tracker) or ``b_m`` itself (No-Simulator).  Weight
    decay is applied by the optimizer as ``weight_decay * ||theta||^2``.
    """
    method = Method(method)
    b_m = b_m if b_m is not None else Batch.empty_like(b_t.x.shape[1])
    cur, prev = current_classes, previous_classes

    if method is Method.iCaRL:
        loss = _bce(model, teacher, b_t, TRAIN, cur, prev)
    elif method is Method.iCaRL_Concat:
        batch = Batch.concat(b_t, b_m) if not b_m.empty else b_t
        loss = _bce(model, teacher, batch, TRAIN, cur, prev)
    elif method is Method.iCaRL_BNT_ImbalanceTracker:
        b_b = balance(b_t, b_m, rng)
        loss = _bce(model, teacher, b_t, TRAIN, cur, prev)
        loss = loss + lam * _bce(model, teacher, b_b, TRAIN, cur, prev)
    elif method in (Method.iCaRL_BNT, Method.iCaRL_BNT_NoSimulator):
        b_b = balance(b_t, b_m, rng)
        ema_refresh_pass(model, b_b.x)
        side = b_b if method is Method.iCaRL_BNT else b_m
        if literal_lb_update and method is Method.iCaRL_BNT:
            l_b = _bce(model, teacher, side, TRAIN, cur, prev)
            before = audit.snapshot(model) if audit is not None else None
            loss = _bce(model, teacher, b_t, mode, cur, prev)
        else:
            before = audit.snapshot(model) if audit is not None else None
            l_b = None if side.empty else _bce(model, teacher, side, mode, cur, prev)
            loss = _bce(model, teacher, b_t, mode, cur, prev)
        if audit is not None:
            audit.verify(model, before)
        if l_b is not None:
            loss = loss + lam * l_b
    else:
        raise ContractError(f"{method.value} is not an iCaRL-family method")

    penalty = weight_decay * sum(float(np.sum(p.data * p.data)) for p in model.parameters())
    return _apply(model, loss, lr, weight_decay) + penalty


# task driver


@dataclass
class Learner:
    """Owns one run's model, buffer and rng and trains it task by task."""

    model: MlpModel
    config: StrategyConfig
    buffer: ReplayBuffer
    rng: np.random.Generator
    audit: EmaAudit = field(default_factory=EmaAudit)
    teacher: MlpModel | None = None
    seen_classes: list[int] = field(default_factory=list)
    steps: int = 0
    tasks_done: int = 0

    @property
    def method(self) -> Method:
        return self.config.method

    def run_task(self, task: Task, epochs: int) -> None:
        cfg = self.config
        method = self.method
        current = list(task.classes)
        previous = list(self.seen_classes)
        t = self.tasks_done + 1
        dim = task.train_x.shape[1]
        lam = 0.0
        if method.is_icarl:
            self.teacher = self.model.clone() if previous else None
            lam = icarl_lambda(len(self.buffer), len(task))

        for _ in range(epochs):
            if method is Method.iCaRL:
                batches = iterate_offline_mixed(task, self.buffer, cfg.batch_size, self.rng)
            else:
                batches = iterate_online(task, cfg.batch_size, self.rng)
            for b_t in batches:
                self._step(b_t, t, current, previous, dim, lam)
                self.steps += 1

        if method.is_icarl:
            icarl_rebuild_buffer(self.model, task.train_x, task.train_y, task.task_id, self.buffer)
        self.seen_classes = previous + current
        self.tasks_done += 1

    def _step(self, b_t: Batch, t: int, current, previous, dim: int, lam: float) -> None:
        cfg, model, rng, method = self.config, self.model, self.rng, self.method
        k = cfg.batch_size
        mode = cfg.frozen_mode
        offer_logits = None

        if method is Method.SGD_only:
            step_er(model, b_t, Batch.empty_like(dim), cfg.lr)
            return
        if method.is_icarl:
            b_m = Batch.empty_like(dim)
            if method is not Method.iCaRL:
                if method is Method.iCaRL_Concat:
                    b_m = sample_prev_only(self.buffer, current, k, rng, dim)
                else:
                    b_m = sample_buffer(self.buffer, k, rng, dim)
            step_icarl(
                model, self.teacher, b_t, current, previous, cfg.lr, cfg.icarl_weight_decay,
                method=method, b_m=b_m, lam=lam, rng=rng, mode=mode,
                literal_lb_update=cfg.icarl_literal_lb_update, audit=self.audit,
            )
            return

        if method is Method.DERpp:
            b_m1 = sample_buffer(self.buffer, k, rng, dim)
            b_m2 = sample_buffer(self.buffer, k, rng, dim)
            _, offer_logits = step_derpp(model, b_t, b_m1, b_m2, cfg.derpp_alpha, cfg.derpp_beta, False, cfg.lr)
        elif method is Method.DERpp_BNT:
            b_m = sample_buffer(self.buffer, k, rng, dim)
            _, offer_logits = step_derpp(
                model, b_t, b_m, b_m, cfg.derpp_alpha, cfg.derpp_beta, True, cfg.lr,
                rng=rng, mode=mode, audit=self.audit,
            )
        elif method is Method.ER_CurPrev:
            step_er_cur_x(model, b_t, sample_prev_only(self.buffer, current, k, rng, dim), cfg.lr)
        else:
            b_m = sample_buffer(self.buffer, k, rng, dim)
            if method is Method.ER:
                step_er(model, b_t, b_m, cfg.lr)
            elif method is Method.ER_BalanceBatch:
                step_er_balance_batch(model, b_t, b_m, t, cfg.lr)
            elif method in (Method.ER_CurBuf, Method.ER_BNT_ImbalanceTracker):
                step_er_cur_x(model, b_t, b_m, cfg.lr)
            elif method is Method.ER_BNT:
                step_er_bnt(model, b_t, b_m, rng, cfg.lr, mode, self.audit)
            elif method is Method.ER_BalanceJointTrain:
                step_er_balance_joint_train(model, b_t, b_m, rng, cfg.lr, mode, self.audit)
            elif method is Method.ER_BNT_NoSimulator:
                step_er_bnt_no_simulator(model, b_t, b_m, current, rng, cfg.lr, mode, self.audit)
            else:
                raise ContractError(f"no step defined for {method.value}")

        offered = Batch(b_t.x, b_t.y, b_t.task_id, offer_logits)
        offer_batch(self.buffer, offered, rng)
