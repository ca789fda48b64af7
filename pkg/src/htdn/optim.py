"""Adam optimizer over lists of parameter tensors."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class Adam:
    """Adam with bias correction.  Updates parameters in place.

    Moment buffers are keyed by position in the parameter list, so the
    list must stay stable across steps.
    """

    def __init__(self, params: list[Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        if not 0 <= beta1 < 1 or not 0 <= beta2 < 1:
            raise ContractError(f"betas must lie in [0,1), got {beta1}, {beta2}")
        self.params = list(params)
        if not self.params:
            raise ContractError("optimizer needs at least one parameter")
        for p in self.params:
            if not p.requires_grad:
                raise ContractError("all optimized tensors must require grad")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"parameter {i} has no gradient; run backward() first")
            g = p.grad
            if g.shape != p.data.shape:
                raise ContractError(f"parameter {i}: gradient shape {g.shape} != {p.data.shape}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
