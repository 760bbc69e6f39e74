"""Adam with a linear learning-rate warm-up."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Bias-corrected Adam over named parameters, no weight decay.

    During the first ``warmup_epochs`` epochs the effective learning rate is
    ``lr * (epoch + 1) / warmup_epochs`` (0-based epochs), reaching the
    configured rate on the ramp's last epoch. Call ``set_epoch`` as training
    advances; the ramp applies to every parameter.

    ``lr_scales`` applies a per-parameter multiplier on top of the global
    rate, for parameter groups that must move slower than the rest.
    """

    def __init__(
        self,
        params,
        lr: float = 7e-5,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        warmup_epochs: int = 0,
        lr_scales: dict[str, float] | None = None,
    ):
        self.params: dict[str, Tensor] = dict(params)
        if not self.params:
            raise ValueError("optimizer received no parameters")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.warmup_epochs = warmup_epochs
        self.lr_scales = dict(lr_scales or {})
        unknown = set(self.lr_scales) - set(self.params)
        if unknown:
            raise ValueError(f"lr_scales for unknown parameters: {sorted(unknown)}")
        self.epoch = 0
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def effective_lr(self) -> float:
        if self.warmup_epochs > 0 and self.epoch < self.warmup_epochs:
            return self.lr * (self.epoch + 1) / self.warmup_epochs
        return self.lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        lr = self.effective_lr()
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter '{name}' has no gradient")
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = lr * self.lr_scales.get(name, 1.0)
            p.data -= step * (m / c1) / (np.sqrt(v / c2) + self.eps)
