from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from layers import Parameter


@dataclass
class SgdMomentumState:
    """Velocity buffers plus the hyper-parameters of one SGD run"""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0001
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            msg = f"learning_rate must be positive, got {self.learning_rate}"
            raise ValueError(msg)


def sgd_momentum_step(params: Mapping[str, Parameter], state: SgdMomentumState) -> None:
    """
    One in-place update, then gradients are cleared.

    v <- μ·v + g + λ·θ
    θ <- θ − lr·v

    Raises:
        ValueError: A parameter has no gradient (names the parameter)
    """
    for name, param in params.items():
        if param.grad is None:
            msg = f"parameter '{name}' has no gradient; call zero_grad before backward"
            raise ValueError(msg)

    for name, param in params.items():
        velocity = state.velocity.get(name)
        if velocity is None:
            velocity = np.zeros_like(param.data)
        velocity = state.momentum * velocity + param.grad + state.weight_decay * param.data
        state.velocity[name] = velocity
        param.data -= state.learning_rate * velocity
        param.grad = None


class SGD:
    """Momentum SGD over a fixed set of named parameters"""

    def __init__(
        self,
        params: Mapping[str, Parameter],
        learning_rate: float,
        momentum: float = 0.9,
        weight_decay: float = 0.0001,
    ) -> None:
        self.params = dict(params)
        self.state = SgdMomentumState(learning_rate, momentum, weight_decay)

    @property
    def learning_rate(self) -> float:
        return self.state.learning_rate

    def set_learning_rate(self, learning_rate: float) -> None:
        self.state.learning_rate = learning_rate

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def step(self) -> None:
        sgd_momentum_step(self.params, self.state)


@dataclass
class MultiStepSchedule:
    """Learning rate multiplied by ``gamma`` after each milestone epoch (1-based)"""

    base_lr: float
    milestones: Sequence[int] = ()
    gamma: float = 0.1

    def lr_for_epoch(self, epoch: int) -> float:
        decays = sum(1 for milestone in self.milestones if epoch > milestone)
        return self.base_lr * self.gamma**decays
