"""Adam with bias correction and per-epoch exponential learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    decay: float = 1.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not (0.0 < self.decay <= 1.0):
            raise ConfigError(f"decay must lie in (0, 1], got {self.decay}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """base_lr * decay ** epoch."""
    if epoch < 0:
        raise ConfigError(f"epoch must be non-negative, got {epoch}")
    return schedule.base_lr * schedule.decay**epoch


class Adam:
    """Adam over named parameters; moments live per parameter name.

    Updates are applied in place on the leaf tensors, which the training
    loop owns exclusively between forward passes.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named_params: list[tuple[str, Tensor]], grads: list[np.ndarray], lr: float):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if len(named_params) != len(grads):
            raise ShapeError(f"{len(named_params)} parameters but {len(grads)} gradients")
        self.t += 1
        for (name, p), g in zip(named_params, grads):
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} does not match parameter {name!r} shape {p.data.shape}"
                )
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            m_hat = m / (1.0 - self.beta1**self.t)
            v_hat = v / (1.0 - self.beta2**self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.m.items():
            out[f"adam.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"adam.v.{name}"] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int):
        self.t = t
        self.m = {k[len("adam.m."):]: np.array(v) for k, v in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: np.array(v) for k, v in arrays.items() if k.startswith("adam.v.")}
