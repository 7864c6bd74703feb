"""AdamW with linear warmup into cosine decay.

Weight decay is decoupled (applied directly to the parameter, not the
gradient) and skipped for biases and norm affine parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Schedule:
    base_lr: float = 1e-3
    warmup_epochs: float = 5.0
    total_epochs: float = 30.0
    weight_decay: float = 0.03

    def lr(self, epoch: float) -> float:
        """Learning rate at a fractional epoch position."""
        if epoch < 0:
            raise ValueError("epoch must be >= 0")
        if self.warmup_epochs > 0 and epoch < self.warmup_epochs:
            return self.base_lr * epoch / self.warmup_epochs
        span = max(self.total_epochs - self.warmup_epochs, 1e-12)
        progress = min((epoch - self.warmup_epochs) / span, 1.0)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _decays(name: str) -> bool:
    return not (name.endswith(".b") or ".ln." in name or ".gn." in name)


@dataclass
class AdamW:
    schedule: Schedule
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             epoch: float) -> float:
        """One in-place update; returns the learning rate used."""
        for g in grads.values():
            if not np.isfinite(g).all():
                raise FloatingPointError("non-finite gradient")
        self.step_count += 1
        lr = self.schedule.lr(epoch)
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if _decays(name):
                update = update + self.schedule.weight_decay * p
            p -= lr * update
        return lr

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flatten optimizer state for checkpointing."""
        out: dict[str, np.ndarray] = {"optim.step": np.array([float(self.step_count)])}
        for name, arr in self.m.items():
            out[f"optim.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"optim.v.{name}"] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["optim.step"][0])
        self.m = {k[len("optim.m."):]: v.copy() for k, v in arrays.items()
                  if k.startswith("optim.m.")}
        self.v = {k[len("optim.v."):]: v.copy() for k, v in arrays.items()
                  if k.startswith("optim.v.")}
