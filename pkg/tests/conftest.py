import numpy as np
import pytest

from bntricks.autodiff import Tensor
from bntricks.config import ExperimentConfig
from bntricks.model import MlpModel
from bntricks.replay import Batch
from bntricks.scenario import StreamConfig, make_gaussian_stream


def numeric_grad(loss_fn, tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``loss_fn()`` w.r.t. every entry of ``tensor``."""
    grad = np.zeros_like(tensor.data)
    it = np.nditer(tensor.data, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = tensor.data[i]
        tensor.data[i] = old + h
        up = loss_fn()
        tensor.data[i] = old - h
        down = loss_fn()
        tensor.data[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def random_batch(rng, n, dim, classes, task_id=0, logits_dim=None) -> Batch:
    logits = None if logits_dim is None else rng.standard_normal((n, logits_dim))
    return Batch(rng.standard_normal((n, dim)), rng.choice(classes, size=n), np.full(n, task_id), logits)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return MlpModel(6, (8, 8), 4, seed=7)


@pytest.fixture(scope="session")
def tiny_stream_config():
    return StreamConfig(num_tasks=3, classes_per_task=2, input_dim=8, train_per_class=40,
                        test_per_class=20, mean_spread=6.0, spread_decay=0.6, within_scale=0.5, seed=3)


@pytest.fixture(scope="session")
def tiny_stream(tiny_stream_config):
    return make_gaussian_stream(tiny_stream_config)


@pytest.fixture
def tiny_config(tiny_stream_config):
    base = ExperimentConfig(stream=tiny_stream_config)
    return base.replace(**{
        "model.hidden": (16, 16),
        "experiment.buffer_size": 30,
        "experiment.epochs": 1,
        "experiment.seeds": (0, 1),
        "strategy.batch_size": 10,
    })


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
