"""Batch normalization with decoupled statistics control.

Which moments normalize a forward pass and whether the running (EMA) moments
are updated by it are two separate switches, bundled in :class:`NormMode`.
Running moments change only through :func:`ema_update`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .autodiff import ContractError, DimensionError, DomainError, Tensor, as_tensor, make_node, no_grad

if TYPE_CHECKING:
    from .model import MlpModel


class EmptyBatchError(ValueError):
    """Raised when moments of a zero-row batch are requested."""


class StatsSource(enum.Enum):
    BATCH = "batch"
    RUNNING = "running"


class EmaUpdate(enum.Enum):
    UPDATE = "update"
    FROZEN = "frozen"


@dataclass(frozen=True)
class NormMode:
    stats_source: StatsSource
    ema_update: EmaUpdate

    def __post_init__(self):
        if self.stats_source is StatsSource.RUNNING and self.ema_update is EmaUpdate.UPDATE:
            raise ContractError("normalizing by running moments while updating them is not allowed")


TRAIN = NormMode(StatsSource.BATCH, EmaUpdate.UPDATE)
TRAIN_FROZEN = NormMode(StatsSource.BATCH, EmaUpdate.FROZEN)
INFERENCE = NormMode(StatsSource.RUNNING, EmaUpdate.FROZEN)


class BatchNormState:
    """Per-feature affine parameters plus running moments of one BN layer."""

    def __init__(self, num_features: int, momentum: float = 0.9, eps: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise DomainError(f"momentum must lie in (0, 1), got {momentum}")
        if eps < 0.0:
            raise DomainError(f"eps must be non-negative, got {eps}")
        self.num_features = num_features
        self.bn_scale = Tensor(np.ones(num_features), requires_grad=True, name="bn_scale")
        self.bn_shift = Tensor(np.zeros(num_features), requires_grad=True, name="bn_shift")
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.momentum = momentum
        self.eps = eps
        # moments of the most recent BATCH-sourced forward, kept for probes
        self.last_moments: tuple[np.ndarray, np.ndarray] | None = None

    def parameters(self) -> list[Tensor]:
        return [self.bn_scale, self.bn_shift]

    def running_stats(self) -> tuple[np.ndarray, np.ndarray]:
        return self.running_mean.copy(), self.running_var.copy()

    def load_running_stats(self, stats: tuple[np.ndarray, np.ndarray]) -> None:
        self.running_mean = stats[0].copy()
        self.running_var = stats[1].copy()


def batch_moments(x: Tensor | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and biased variance over the batch axis."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.shape[0] == 0:
        raise EmptyBatchError("batch moments of an empty batch are undefined")
    mu = data.mean(axis=0)
    var = ((data - mu) ** 2).mean(axis=0)
    return mu, var


def ema_update(state: BatchNormState, mu: np.ndarray, var: np.ndarray) -> None:
    """Blend batch moments into the running moments with momentum ``state.momentum``."""
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
        raise DomainError("ema_update needs finite moments")
    if np.any(var < 0.0):
        raise DomainError("ema_update got a negative variance")
    a = state.momentum
    state.running_mean = a * state.running_mean + (1.0 - a) * mu
    state.running_var = a * state.running_var + (1.0 - a) * var


def bn_forward(x: Tensor, state: BatchNormState, mode: NormMode) -> Tensor:
    """Standardize ``x`` by the moments ``mode`` selects, then apply scale and shift."""
    x = as_tensor(x)
    if not isinstance(mode, NormMode):
        raise ContractError(f"expected a NormMode, got {mode!r}")
    if x.data.ndim != 2 or x.shape[1] != state.num_features:
        raise DimensionError(f"bn_forward: input {x.shape} vs {state.num_features} features")
    gamma, beta = state.bn_scale, state.bn_shift
    batch = x.shape[0]
    if mode.stats_source is StatsSource.BATCH:
        mu, var = batch_moments(x)
        state.last_moments = (mu, var)
    else:
        mu, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    if mode.stats_source is StatsSource.BATCH:
        def grad_fn(g):
            dxhat = g * gamma.data
            dx = inv_std / batch * (
                batch * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)
    else:
        def grad_fn(g):
            return g * gamma.data * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0)

    node = make_node(out, (x, gamma, beta), grad_fn)
    if mode.ema_update is EmaUpdate.UPDATE:
        ema_update(state, mu, var)
    return node


def ema_refresh_pass(model: MlpModel, batch: np.ndarray) -> None:
    """Forward ``batch`` only to move every layer's running moments; nothing is trained."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise EmptyBatchError("ema_refresh_pass needs a non-empty batch")
    with no_grad():
        model.forward(batch, TRAIN)
