"""BN-equipped multilayer perceptron used as the backbone."""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np

from .autodiff import Tensor, linear_forward, no_grad, relu
from .normalization import INFERENCE, BatchNormState, NormMode, bn_forward


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        self.weight = Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True, name="weight")
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True, name="bias")

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(x, self.weight, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class MlpModel:
    """Linear -> BN -> ReLU blocks followed by a linear head over every class of the stream.

    The head size is fixed at construction; nothing grows or gets masked as
    tasks arrive.
    """

    def __init__(
        self,
        input_dim: int,
        hidden: Sequence[int],
        num_classes: int,
        seed: int | np.random.Generator = 0,
        momentum: float = 0.9,
        eps: float = 1e-5,
    ):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.input_dim = input_dim
        self.hidden = tuple(hidden)
        self.num_classes = num_classes
        self.blocks: list[tuple[Linear, BatchNormState]] = []
        width = input_dim
        for h in self.hidden:
            self.blocks.append((Linear(width, h, rng), BatchNormState(h, momentum, eps)))
            width = h
        self.feature_dim = width
        self.head = Linear(width, num_classes, rng)

    @property
    def bn_layers(self) -> list[BatchNormState]:
        return [bn for _, bn in self.blocks]

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for lin, bn in self.blocks:
            params += lin.parameters() + bn.parameters()
        return params + self.head.parameters()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def forward(self, x, mode: NormMode, return_features: bool = False):
        """Logits for a batch; with ``return_features`` also the penultimate activations."""
        h = x if isinstance(x, Tensor) else Tensor(x)
        for lin, bn in self.blocks:
            h = relu(bn_forward(lin(h), bn, mode))
        logits = self.head(h)
        return (logits, h) if return_features else logits

    __call__ = forward

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(x, INFERENCE).data

    def features(self, x: np.ndarray) -> np.ndarray:
        """Penultimate activations under inference normalization."""
        with no_grad():
            return self.forward(x, INFERENCE, return_features=True)[1].data

    # snapshots

    def running_stats(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [bn.running_stats() for bn in self.bn_layers]

    def load_running_stats(self, stats) -> None:
        for bn, s in zip(self.bn_layers, stats):
            bn.load_running_stats(s)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param_{i}": p.data.copy() for i, p in enumerate(self.parameters())}
        for i, bn in enumerate(self.bn_layers):
            state[f"running_mean_{i}"] = bn.running_mean.copy()
            state[f"running_var_{i}"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for i, p in enumerate(self.parameters()):
            p.data = np.array(state[f"param_{i}"], dtype=np.float64)
            p.grad = None
        for i, bn in enumerate(self.bn_layers):
            bn.running_mean = np.array(state[f"running_mean_{i}"], dtype=np.float64)
            bn.running_var = np.array(state[f"running_var_{i}"], dtype=np.float64)

    def clone(self) -> MlpModel:
        twin = copy.deepcopy(self)
        twin.zero_grad()
        return twin
