"""Dense layers, parameter initialization, and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, matmul


def init_uniform(rng, fan_in, shape):
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) leaf tensor."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class Dense:
    W: Tensor  # (fan_in, fan_out)
    b: Tensor  # (fan_out,)

    def __call__(self, x):
        return add(matmul(x, self.W), self.b)


def make_dense(rng, fan_in, fan_out, zero=False):
    if zero:
        W = Tensor(np.zeros((fan_in, fan_out)), requires_grad=True)
        b = Tensor(np.zeros(fan_out), requires_grad=True)
    else:
        W = init_uniform(rng, fan_in, (fan_in, fan_out))
        b = init_uniform(rng, fan_in, (fan_out,))
    return Dense(W, b)


class Adam:
    """Adaptive moment estimation over a name -> Tensor parameter dict."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1**self.t)
            vhat = self.v[k] / (1 - b2**self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self):
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state):
        self.t = int(state["t"])
        self.m = {k: np.asarray(v) for k, v in state["m"].items()}
        self.v = {k: np.asarray(v) for k, v in state["v"].items()}
