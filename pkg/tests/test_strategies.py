import math

import numpy as np
import pytest

from bntricks.autodiff import ContractError, Tensor, sigmoid, sigmoid_bce_loss, softmax_ce_loss
from bntricks.model import MlpModel
from bntricks.normalization import TRAIN, TRAIN_FROZEN, batch_moments, ema_refresh_pass
from bntricks.replay import Batch, ReplayBuffer, balance
from bntricks.scenario import ConfigError, iterate_online
from bntricks.strategies import (
    EmaAudit,
    Learner,
    Method,
    StrategyConfig,
    icarl_lambda,
    icarl_targets,
    step_derpp,
    step_er,
    step_er_balance_batch,
    step_er_bnt,
    step_er_bnt_no_simulator,
    step_er_cur_x,
    step_icarl,
)

from conftest import random_batch

DIM, CLASSES = 6, 4


def _model(seed=7):
    return MlpModel(DIM, (8, 8), CLASSES, seed=seed)


def _same_params(a: MlpModel, b: MlpModel) -> bool:
    return all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))


def _same_stats(a: MlpModel, b: MlpModel) -> bool:
    return all(
        np.array_equal(m0, m1) and np.array_equal(v0, v1)
        for (m0, v0), (m1, v1) in zip(a.running_stats(), b.running_stats())
    )


def _grads(model, loss):
    model.zero_grad()
    loss.backward()
    out = [None if p.grad is None else p.grad.copy() for p in model.parameters()]
    model.zero_grad()
    return out


@pytest.fixture
def batches(rng):
    return random_batch(rng, 10, DIM, [2, 3], 1), random_batch(rng, 10, DIM, [0, 1, 2, 3], 0, logits_dim=CLASSES)


class TestErFamily:
    def test_empty_buffer_equals_plain_sgd(self, rng, batches):
        b_t, _ = batches
        a, b = _model(), _model()
        step_er(a, b_t, Batch.empty_like(DIM), 0.05)
        loss = softmax_ce_loss(b(b_t.x, TRAIN), b_t.y)
        loss.backward()
        for p in b.parameters():
            p.data -= 0.05 * p.grad
        assert _same_params(a, b)

    def test_er_ema_uses_concatenated_moments(self, batches):
        b_t, b_m = batches
        model = _model()
        step_er(model, b_t, b_m, 0.05)
        fresh = _model()
        x = np.concatenate([b_t.x, b_m.x])
        lin, _ = fresh.blocks[0]
        pre = lin(x).data
        m, v = batch_moments(pre)
        np.testing.assert_array_equal(model.bn_layers[0].running_mean, (1 - 0.9) * m)
        np.testing.assert_array_equal(model.bn_layers[0].running_var, 0.9 + (1 - 0.9) * v)

    def test_balance_batch_t2_is_er(self, batches):
        b_t, b_m = batches
        a, b = _model(), _model()
        la = step_er(a, b_t, b_m, 0.05)
        lb = step_er_balance_batch(b, b_t, b_m, 2, 0.05)
        assert la == lb and _same_params(a, b) and _same_stats(a, b)

    def test_balance_batch_composition(self, batches):
        b_t, b_m = batches
        model = _model()
        step_er_balance_batch(model, b_t, b_m, 3, 0.05)
        assert model.bn_layers[0].last_moments is not None
        # 10 + 2 * 10 rows were normalized together
        fresh = _model()
        x = np.concatenate([b_t.x, b_m.x, b_m.x])
        m, _ = batch_moments(fresh.blocks[0][0](x).data)
        np.testing.assert_allclose(model.bn_layers[0].running_mean, (1 - 0.9) * m, atol=1e-15)

    def test_balance_batch_loss_matches_er_loss_weighting(self, batches):
        # with every BN layer seeing identical moments, copies change nothing;
        # checked via the loss value for identical rows in B_t and B_M
        b_t, _ = batches
        a, b = _model(), _model()
        la = step_er(a, b_t, b_t, 0.05)
        lb = step_er_balance_batch(b, b_t, b_t, 4, 0.05)
        assert la == pytest.approx(lb, rel=1e-12)

    def test_bad_task_index(self, batches):
        with pytest.raises(ContractError):
            step_er_balance_batch(_model(), *batches, 0, 0.05)

    def test_cur_x_updates_ema_twice_in_order(self, batches):
        b_t, b_m = batches
        model = _model()
        step_er_cur_x(model, b_t, b_m, 0.05)
        fresh = _model()
        lin = fresh.blocks[0][0]
        m1, v1 = batch_moments(lin(b_t.x).data)
        m2, v2 = batch_moments(lin(b_m.x).data)
        a = 0.9
        mean = a * (a * 0.0 + (1 - a) * m1) + (1 - a) * m2
        var = a * (a * 1.0 + (1 - a) * v1) + (1 - a) * v2
        np.testing.assert_array_equal(model.bn_layers[0].running_mean, mean)
        np.testing.assert_array_equal(model.bn_layers[0].running_var, var)

    def test_cur_x_empty_other_single_update(self, batches):
        b_t, _ = batches
        model = _model()
        step_er_cur_x(model, b_t, Batch.empty_like(DIM), 0.05)
        m, _ = batch_moments(_model().blocks[0][0](b_t.x).data)
        np.testing.assert_array_equal(model.bn_layers[0].running_mean, (1 - 0.9) * m)

    @pytest.mark.parametrize("variant", ["cur_x", "bnt"])
    def test_gradient_additivity(self, rng, batches, variant):
        b_t, b_m = batches
        mode = TRAIN if variant == "cur_x" else TRAIN_FROZEN
        model = _model()
        if variant == "bnt":
            ema_refresh_pass(model, balance(b_t, b_m, rng).x)
        saved = model.running_stats()
        total = _grads(model, softmax_ce_loss(model(b_t.x, mode), b_t.y) + softmax_ce_loss(model(b_m.x, mode), b_m.y))
        model.load_running_stats(saved)
        g1 = _grads(model, softmax_ce_loss(model(b_t.x, mode), b_t.y))
        g2 = _grads(model, softmax_ce_loss(model(b_m.x, mode), b_m.y))
        for t, a, b in zip(total, g1, g2):
            np.testing.assert_allclose(t, a + b, rtol=0, atol=1e-10)

    def test_single_class_margin_grows(self, rng):
        model = _model()
        b = random_batch(rng, 16, DIM, [1], 0)
        margins = []
        for _ in range(100):
            logits = model.predict_logits(b.x)
            margins.append(np.mean(logits[:, 1] - np.delete(logits, 1, axis=1).max(axis=1)))
            step_er(model, b, Batch.empty_like(DIM), 0.05)
        assert margins[-1] > margins[0]
        assert np.mean(np.diff(margins) > 0) > 0.8


class TestErBnt:
    def test_ema_equals_refresh_alone(self, rng, batches):
        b_t, b_m = batches
        a, b = _model(), _model()
        step_er_bnt(a, b_t, b_m, np.random.default_rng(5), 0.05)
        ema_refresh_pass(b, balance(b_t, b_m, np.random.default_rng(5)).x)
        assert _same_stats(a, b)

    def test_first_task_single_layer(self, rng):
        model = MlpModel(DIM, (5,), CLASSES, seed=1)
        b_t = random_batch(rng, 12, DIM, [0, 1])
        m, _ = batch_moments(model.blocks[0][0](b_t.x).data)
        step_er_bnt(model, b_t, Batch.empty_like(DIM), rng, 0.05)
        np.testing.assert_allclose(model.bn_layers[0].running_mean, 0.1 * m, rtol=0, atol=1e-15)

    def test_audit_counts_and_catches(self, rng, batches):
        audit = EmaAudit()
        step_er_bnt(_model(), *batches, rng, 0.05, TRAIN_FROZEN, audit)
        assert (audit.checks, audit.violations) == (1, 0)
        # a mode that moves the EMA during parameter updates is caught
        step_er_bnt(_model(), *batches, rng, 0.05, TRAIN, audit)
        assert (audit.checks, audit.violations) == (2, 1)

    def test_no_simulator_drops_current_classes(self, rng, batches):
        b_t, b_m = batches
        current = {2, 3}
        a, b = _model(), _model()
        step_er_bnt_no_simulator(a, b_t, b_m, current, np.random.default_rng(1), 0.05)
        keep = ~np.isin(b_m.y, list(current))
        # same refresh batch, then an ER-BNT step on the filtered buffer batch
        r = np.random.default_rng(1)
        ema_refresh_pass(b, balance(b_t, b_m, r).x)
        loss = softmax_ce_loss(b(b_t.x, TRAIN_FROZEN), b_t.y) + softmax_ce_loss(b(b_m.x[keep], TRAIN_FROZEN), b_m.y[keep])
        loss.backward()
        for p in b.parameters():
            p.data -= 0.05 * p.grad
        assert _same_params(a, b) and _same_stats(a, b)


class TestDerpp:
    def test_alpha0_beta1_is_er_bnt(self, batches):
        b_t, b_m = batches
        a, b = _model(), _model()
        la = step_er_bnt(a, b_t, b_m, np.random.default_rng(9), 0.05)
        lb, _ = step_derpp(b, b_t, b_m, b_m, 0.0, 1.0, True, 0.05, rng=np.random.default_rng(9))
        assert la == lb and _same_params(a, b) and _same_stats(a, b)

    def test_matching_logits_zero_kd(self, batches):
        b_t, b_m = batches
        ref = _model()
        ce_t = softmax_ce_loss(ref(b_t.x, TRAIN), b_t.y).item()
        logits_m = ref(b_m.x, TRAIN)
        ce_m = softmax_ce_loss(logits_m, b_m.y).item()
        b_m = Batch(b_m.x, b_m.y, b_m.task_id, logits_m.data.copy())
        loss, _ = step_derpp(_model(), b_t, b_m, b_m, 0.2, 0.5, False, 0.05)
        assert loss == pytest.approx(ce_t + 0.5 * ce_m, rel=1e-14)

    def test_missing_logits(self, rng, batches):
        b_t, _ = batches
        no_logits = random_batch(rng, 4, DIM, [0, 1])
        with pytest.raises(ContractError, match="entry"):
            step_derpp(_model(), b_t, no_logits, no_logits, 0.2, 0.5, False, 0.05)

    def test_returns_pre_update_logits(self, batches):
        b_t, b_m = batches
        model = _model()
        expected = _model()(b_t.x, TRAIN).data
        _, stored = step_derpp(model, b_t, b_m, b_m, 0.2, 0.5, False, 0.05)
        np.testing.assert_array_equal(stored, expected)

    def test_defaults(self):
        cfg = StrategyConfig()
        assert (cfg.derpp_alpha, cfg.derpp_beta, cfg.lr, cfg.icarl_weight_decay) == (0.2, 0.5, 0.03, 1e-4)


class TestIcarl:
    def test_lambda(self):
        assert icarl_lambda(500, 1000) == 0.5
        with pytest.raises(ConfigError):
            icarl_lambda(10, 0)

    def test_targets(self, rng):
        teacher = _model()
        b = Batch(rng.standard_normal((3, DIM)), [2, 3, 0])
        targets, cols = icarl_targets(teacher, b, [2, 3], [0, 1], CLASSES)
        assert cols.tolist() == [0, 1, 2, 3]
        assert targets[0, 2] == 1.0 and targets[1, 3] == 1.0 and targets[2, 2:].tolist() == [0.0, 0.0]
        np.testing.assert_array_equal(targets[:, :2], sigmoid(teacher.predict_logits(b.x))[:, :2])

    def test_first_task_pure_classification(self, rng):
        model = _model()
        b = Batch(rng.standard_normal((4, DIM)), [0, 1, 1, 0])
        targets, cols = icarl_targets(None, b, [0, 1], [], CLASSES)
        assert cols.tolist() == [0, 1]
        assert targets[:, :2].tolist() == [[1, 0], [0, 1], [0, 1], [1, 0]]
        with pytest.raises(ContractError):
            icarl_targets(None, b, [2, 3], [0, 1], CLASSES)

    def test_teacher_equal_to_student_kd_at_minimum(self, rng):
        model = _model()
        b = Batch(rng.standard_normal((5, DIM)), [2] * 5)
        targets, _ = icarl_targets(model, b, [2, 3], [0, 1], CLASSES)
        logits = model.predict_logits(b.x)
        at_teacher = sigmoid_bce_loss(Tensor(logits[:, :2]), targets[:, :2]).item()
        for shift in (-0.1, 0.1):
            assert sigmoid_bce_loss(Tensor(logits[:, :2] + shift), targets[:, :2]).item() > at_teacher

    def test_bnt_audit_clean(self, rng, batches):
        b_t, b_m = batches
        audit = EmaAudit()
        model = _model()
        step_icarl(model, model.clone(), b_t, [2, 3], [0, 1], 0.05, 1e-4, Method.iCaRL_BNT, b_m, 0.5, rng, TRAIN_FROZEN, audit=audit)
        step_icarl(model, model.clone(), b_t, [2, 3], [0, 1], 0.05, 1e-4, Method.iCaRL_BNT_NoSimulator, b_m, 0.5, rng, TRAIN_FROZEN, audit=audit)
        assert (audit.checks, audit.violations) == (2, 0)

    def test_loss_includes_weight_penalty(self, rng, batches):
        b_t, _ = batches
        a, b = _model(), _model()
        la = step_icarl(a, None, b_t, [2, 3], [], 0.05, 0.0)
        lb = step_icarl(b, None, b_t, [2, 3], [], 0.05, 1e-2)
        penalty = 1e-2 * sum(float(np.sum(p.data ** 2)) for p in _model().parameters())
        assert lb == pytest.approx(la + penalty, rel=1e-12)

    def test_not_icarl(self, batches):
        with pytest.raises(ContractError):
            step_icarl(_model(), None, batches[0], [2, 3], [], 0.05, 0.0, Method.ER)


def _learner(method, seed=0, buffer=30, **kw):
    model = MlpModel(8, (16, 16), 6, seed=np.random.default_rng(seed))
    return Learner(model, StrategyConfig(method=method, batch_size=10, **kw), ReplayBuffer(buffer), np.random.default_rng(seed + 100))


class TestLearner:
    def test_step_count_and_seen_count(self, tiny_stream):
        learner = _learner("ER")
        task = tiny_stream[0]
        learner.run_task(task, 3)
        assert learner.steps == 3 * math.ceil(len(task) / 10)
        assert learner.buffer.seen_count == 3 * len(task)

    def test_icarl_quota(self, tiny_stream):
        learner = _learner("iCaRL", buffer=20)
        for t, task in enumerate(tiny_stream):
            learner.run_task(task, 1)
            seen = 2 * (t + 1)
            counts = np.bincount(learner.buffer.labels(), minlength=seen)
            assert set(counts.tolist()) == {20 // seen}

    def test_sgd_only_leaves_buffer_empty(self, tiny_stream):
        learner = _learner("SGD_only")
        learner.run_task(tiny_stream[0], 1)
        assert len(learner.buffer) == 0

    def test_first_task_parameter_trajectories(self, tiny_stream):
        task = tiny_stream[0]
        learners = [_learner(m) for m in ("ER", "ER_CurBuf", "ER_BNT")]
        learners.append(_learner("DERpp_BNT", derpp_alpha=0.0, derpp_beta=1.0))
        # the buffer fills during task 1, so compare the opening step on an empty buffer
        b_t = next(iter(iterate_online(task, 10, np.random.default_rng(0))))
        for lr in learners:
            lr._step(b_t, 1, list(task.classes), [], 8, 0.0)
        ref = learners[0].model
        for other in learners[1:]:
            assert _same_params(ref, other.model)

    @pytest.mark.parametrize("pair", [("ER_BNT_ImbalanceTracker", "ER_CurBuf"), ("ER_BalanceBatch", "ER")])
    def test_learner_equivalences(self, tiny_stream, pair):
        a, b = (_learner(m) for m in pair)
        tasks = tiny_stream.tasks if pair[0] != "ER_BalanceBatch" else tiny_stream.tasks[:2]
        for task in tasks:
            a.run_task(task, 2)
            b.run_task(task, 2)
        assert _same_params(a.model, b.model) and _same_stats(a.model, b.model)

    def test_derpp_bnt_collapse_over_run(self, tiny_stream):
        a = _learner("ER_BNT")
        b = _learner("DERpp_BNT", derpp_alpha=0.0, derpp_beta=1.0)
        for task in tiny_stream:
            a.run_task(task, 1)
            b.run_task(task, 1)
        assert _same_params(a.model, b.model) and _same_stats(a.model, b.model)

    @pytest.mark.parametrize("method", [m.value for m in Method if m.is_bnt])
    def test_frozen_discipline_over_run(self, tiny_stream, method):
        learner = _learner(method)
        for task in tiny_stream:
            learner.run_task(task, 1)
        assert learner.audit.checks > 0 and learner.audit.violations == 0

    @pytest.mark.parametrize("method", [m.value for m in Method])
    def test_every_method_trains(self, tiny_stream, method):
        learner = _learner(method)
        for task in tiny_stream.tasks[:2]:
            learner.run_task(task, 1)
        assert all(np.all(np.isfinite(p.data)) for p in learner.model.parameters())

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            StrategyConfig(bnt_train_stats="bogus")
        with pytest.raises(ValueError):
            StrategyConfig(method="NotAMethod")
