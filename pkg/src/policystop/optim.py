"""First-order optimizers over flat parameter vectors.

Plain SGD applies the literal update rule theta := theta - lr * grad; Adam is
the default for every trainer in this package. Both update in place, reuse
scratch buffers (training loops here take many small steps, so allocation
cost matters), and raise if parameters go non-finite.
"""

from __future__ import annotations

import math

import numpy as np

from .net import TrainingDiverged


def _check_finite(params: np.ndarray, step_count: int) -> None:
    # A single reduction: any nan/inf in params makes the sum non-finite.
    if not math.isfinite(float(params.sum())):
        raise TrainingDiverged(f"non-finite parameter after step {step_count}")


class Sgd:
    name = "sgd"

    def __init__(self, lr: float, n_params: int):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.step_count = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        params -= self.lr * grad
        self.step_count += 1
        _check_finite(params, self.step_count)


class Adam:
    name = "adam"

    def __init__(self, lr: float, n_params: int, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params, dtype=np.float64)
        self.v = np.zeros(n_params, dtype=np.float64)
        self._tmp = np.zeros(n_params, dtype=np.float64)
        self.step_count = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.step_count += 1
        t = self.step_count
        m, v, tmp = self.m, self.v, self._tmp

        m *= self.beta1
        np.multiply(grad, 1.0 - self.beta1, out=tmp)
        m += tmp

        v *= self.beta2
        np.multiply(grad, grad, out=tmp)
        tmp *= 1.0 - self.beta2
        v += tmp

        np.divide(v, 1.0 - self.beta2 ** t, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += self.eps
        np.divide(m, tmp, out=tmp)
        tmp *= self.lr / (1.0 - self.beta1 ** t)
        params -= tmp

        _check_finite(params, t)


OPTIMIZERS = {"sgd": Sgd, "adam": Adam}


def make_optimizer(name: str, lr: float, n_params: int):
    try:
        cls = OPTIMIZERS[name]
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}")
    return cls(lr, n_params)
