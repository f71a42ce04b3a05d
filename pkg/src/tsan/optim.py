"""Initialization, Adam optimizer, and the two training-loop state machines."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def he_init(params, seed: int):
    """He initialization: weights ~ N(0, 2/fan_in), biases 0, scale/shift 1/0.

    ``params`` is an iterable of tagged tensors; the draw order follows the
    iteration order, so a fixed seed re-initializes bit-identically.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        if p.init_kind == "he":
            fan_in = p.data.shape[0] if p.data.ndim == 2 else int(np.prod(p.data.shape[1:]))
            p.data[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), p.data.shape)
        elif p.init_kind == "zero":
            p.data[...] = 0.0
        elif p.init_kind == "one":
            p.data[...] = 1.0
        else:
            raise ValueError(f"parameter {p.name!r} has no init tag")
        if p.grad is not None:
            p.grad[...] = 0.0


class Adam:
    """Adam with bias correction, optional L2 on decayable weights, and a
    per-step multiplicative learning-rate decay lr_t = lr / (1 + decay * t)."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0,
                 step_decay: float = 1e-6):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("optimizer parameters must have unique names")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_decay = step_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        lr_t = self.lr / (1.0 + self.step_decay * self.t)
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient for parameter {p.name!r}")
            if self.weight_decay > 0.0 and p.decay:
                g = g + self.weight_decay * p.data
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class PlateauSchedule:
    """Halve the learning rate after ``patience`` consecutive epochs without a
    new best training loss; the stall counter resets on each decay."""

    def __init__(self, init_lr: float, factor: float = 0.5, patience: int = 5):
        self.lr = init_lr
        self.factor = factor
        self.patience = patience
        self.best = np.inf
        self.stalled = 0

    def step(self, train_loss: float) -> float:
        if train_loss < self.best:
            self.best = train_loss
            self.stalled = 0
        else:
            self.stalled += 1
            if self.stalled >= self.patience:
                self.lr *= self.factor
                self.stalled = 0
        return self.lr


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a new best
    validation MAE; the best epoch's weights are the ones retained."""

    def __init__(self, patience: int = 20):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.stalled = 0

    def step(self, epoch: int, val_mae: float) -> bool:
        """Returns True when this epoch set a new best."""
        if val_mae < self.best:
            self.best = val_mae
            self.best_epoch = epoch
            self.stalled = 0
            return True
        self.stalled += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stalled >= self.patience
