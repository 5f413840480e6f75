"""Adam with bias correction and a cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


def cosine_lr(base_lr: float, epoch: int, period: int = 100) -> float:
    """Half-cosine decay from base_lr to 0 over `period` epochs, then flat 0."""
    if period <= 0:
        raise ConfigError(f"cosine period must be positive, got {period}")
    if epoch < 0:
        raise ConfigError(f"epoch must be non-negative, got {epoch}")
    t = min(epoch, period) / period
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


class Adam:
    """Adam over a named parameter dict; moments live in `self.state`.

    Defaults follow the training setup this codebase targets
    (beta1=0.5, beta2=0.9) rather than the common (0.9, 0.999).
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.5,
        beta2: float = 0.9,
        eps: float = 1e-8,
    ):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ConfigError(f"betas must lie in [0, 1), got ({beta1}, {beta2})")
        if lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {lr}")
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.state: dict[str, dict[str, np.ndarray]] = {
            name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            for name, p in params.items()
        }

    def step(self) -> None:
        """Apply one update from the gradients currently stored on the params."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            st = self.state[name]
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * p.grad
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * p.grad**2
            m_hat = st["m"] / c1
            v_hat = st["v"] / c2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- checkpoint plumbing -------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Flatten optimizer state into named arrays for serialization."""
        out: dict[str, np.ndarray] = {"__step__": np.array([float(self.step_count)])}
        for name, st in self.state.items():
            out[f"{name}.m"] = st["m"]
            out[f"{name}.v"] = st["v"]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.step_count = int(tensors["__step__"][0])
        for name in self.state:
            self.state[name]["m"] = tensors[f"{name}.m"].copy()
            self.state[name]["v"] = tensors[f"{name}.v"].copy()
