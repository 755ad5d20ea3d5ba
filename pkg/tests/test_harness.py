import json

import numpy as np
import pytest

from bntricks import harness
from bntricks.config import ExperimentConfig
from bntricks.harness import (
    OUT_DIR_ENV,
    compare_methods,
    compare_records,
    load_checkpoint,
    load_results,
    paired_wins,
    run_experiment,
    run_seed,
    save_checkpoint,
)
from bntricks.scenario import ConfigError, StreamConfig


def test_single_task_sgd_sanity(tmp_path):
    cfg = ExperimentConfig(stream=StreamConfig(num_tasks=1, train_per_class=200, mean_spread=8.0, within_scale=1.0))
    cfg = cfg.replace(**{"strategy.method": "SGD_only", "experiment.seeds": (0,), "experiment.epochs": 3})
    record = run_experiment(cfg, tmp_path)
    assert record.acc_mean >= 0.95 and record.bwt_mean is None
    assert record.per_seed[0].bwt is None


def test_files_and_schema(tiny_config, tmp_path):
    cfg = tiny_config.replace(**{"strategy.method": "ER_BNT"})
    record = run_experiment(cfg, tmp_path)
    lines = (tmp_path / "results.csv").read_text().splitlines()
    assert lines[0] == "seed,method,after_task,eval_task,accuracy"
    assert len(lines) == 1 + 2 * 6  # two seeds, lower triangle of a 3x3 matrix
    summary = json.loads((tmp_path / "summary.json").read_text())
    for key in ("method", "acc_mean", "acc_std", "bwt_mean", "bwt_std", "seeds", "fingerprint"):
        assert key in summary
    assert summary["acc_mean"] == pytest.approx(np.mean([r.acc for r in record.per_seed]), abs=1e-15)
    assert summary["per_seed"][0]["ema_violations"] == 0 and summary["per_seed"][0]["ema_checks"] > 0


def test_aggregates_recomputable_from_files(tiny_config, tmp_path):
    record = run_experiment(tiny_config, tmp_path)
    back = load_results(tmp_path)
    assert back.acc_mean == record.acc_mean and back.bwt_std == record.bwt_std
    for a, b in zip(record.per_seed, back.per_seed):
        assert np.array_equal(np.nan_to_num(a.R, nan=-1), np.nan_to_num(b.R, nan=-1))


def test_deterministic_payload(tiny_config, tmp_path):
    run_experiment(tiny_config, tmp_path / "a")
    run_experiment(tiny_config, tmp_path / "b")
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    sa = json.loads((tmp_path / "a" / "summary.json").read_text())
    sb = json.loads((tmp_path / "b" / "summary.json").read_text())
    sa.pop("wall_clock_s"), sb.pop("wall_clock_s")
    assert sa == sb


def test_seed_permutation(tiny_config):
    a = run_experiment(tiny_config.replace(**{"experiment.seeds": (0, 1, 2)}), write=False)
    b = run_experiment(tiny_config.replace(**{"experiment.seeds": (2, 0, 1)}), write=False)
    assert a.accs() == b.accs()
    assert a.acc_mean == b.acc_mean and a.acc_std == b.acc_std and a.bwt_mean == b.bwt_mean


def test_failing_seed_is_recorded(tiny_config, tmp_path, monkeypatch):
    real = harness.run_seed

    def flaky(config, seed, stream=None):
        if seed == 1:
            raise FloatingPointError("diverged")
        return real(config, seed, stream)

    monkeypatch.setattr(harness, "run_seed", flaky)
    record = run_experiment(tiny_config.replace(**{"experiment.seeds": (0, 1, 2)}), tmp_path)
    assert [r.error is None for r in record.per_seed] == [True, False, True]
    assert "diverged" in record.per_seed[1].error
    assert not record.failed and record.acc_mean == pytest.approx(np.mean([record.per_seed[i].acc for i in (0, 2)]))
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["per_seed"][1]["error"].startswith("FloatingPointError")


def test_fully_failed(tiny_config, monkeypatch):
    monkeypatch.setattr(harness, "run_seed", lambda *a, **k: (_ for _ in ()).throw(RuntimeError("boom")))
    record = run_experiment(tiny_config, write=False)
    assert record.failed and record.acc_mean is None


def test_out_dir_resolution(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path / "env"))
    assert harness.resolve_out_dir(tiny_config) == tmp_path / "env"
    assert harness.resolve_out_dir(tiny_config, str(tmp_path / "cli")) == tmp_path / "cli"
    monkeypatch.delenv(OUT_DIR_ENV)
    assert str(harness.resolve_out_dir(tiny_config)) == tiny_config.experiment.out_dir


class TestCompare:
    def test_identical_methods_tie(self, tiny_config):
        comp = compare_methods([tiny_config, tiny_config], paired_seeds=True)
        (a, ra), (b, rb) = [(r[0], r) for r in comp.rows]
        assert ra[1:] == rb[1:]
        assert comp.wins[(a, b)] / comp.paired_seeds == 0.5

    def test_rows_in_config_order_five_columns(self, tiny_config):
        methods = ["ER_BNT", "ER", "ER_CurBuf"]
        comp = compare_methods([tiny_config.replace(**{"strategy.method": m}) for m in methods])
        assert [r[0] for r in comp.rows] == methods
        csv_lines = comp.to_csv().splitlines()
        assert all(len(line.split(",")) == 5 for line in csv_lines)

    def test_paired_mismatch(self, tiny_config):
        other = tiny_config.replace(**{"stream.seed": 99})
        with pytest.raises(ConfigError):
            compare_methods([tiny_config, other], paired_seeds=True)
        with pytest.raises(ConfigError):
            compare_methods([tiny_config, tiny_config.replace(**{"experiment.seeds": (5,)})], paired_seeds=True)

    def test_paired_wins_ties(self):
        assert paired_wins({0: 0.5, 1: 0.7, 2: 0.1}, {0: 0.5, 1: 0.6, 2: 0.2}) == 1.5


def test_checkpoint_round_trip(tiny_config, tmp_path):
    cfg = tiny_config.replace(**{"strategy.method": "DERpp"})
    run = run_seed(cfg, 0)
    save_checkpoint(run, tmp_path / "c.npz")
    back = load_checkpoint(cfg, tmp_path / "c.npz")
    a, b = run.model.state_dict(), back.model.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert back.learner.buffer.seen_count == run.learner.buffer.seen_count
    assert np.array_equal(back.learner.buffer.as_batch().logits, run.learner.buffer.as_batch().logits)


def test_drift_probe_restores_model(tiny_config):
    cfg = tiny_config.replace(**{"strategy.method": "ER_BNT", "probe.drift_batches": 10})
    run = run_seed(cfg, 0)
    state = run.model.state_dict()
    out = harness.drift_probe(cfg, run, 0)
    after = run.model.state_dict()
    assert all(np.array_equal(state[k], after[k]) for k in state)
    assert len(out["before"]) == len(out["after_last_task"]) == len(out["after_balanced"]) == 3
