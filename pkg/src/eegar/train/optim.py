"""AdamW with decoupled weight decay, and the warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..numkit import NonFiniteError, Tensor


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **hyper) -> "OptimState":
        st = cls(**hyper)
        for name, t in params.items():
            st.m[name] = np.zeros(t.shape)
            st.v[name] = np.zeros(t.shape)
        return st

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": a for k, a in self.m.items()}
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], hyper: dict) -> "OptimState":
        st = cls(**hyper)
        for key, a in arrays.items():
            kind, name = key.split("/", 1)
            getattr(st, kind)[name] = a.copy()
        return st


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState,
               lr: float | None = None) -> None:
    """One in-place AdamW update; ``lr`` overrides the state's base rate (for schedules)."""
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise ValueError(f"negative learning rate {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    c1 = 1 - state.beta1 ** state.step
    c2 = 1 - state.beta2 ** state.step
    for name, g in grads.items():
        m = state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        p = params[name].data
        p *= 1 - lr * state.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    total_steps: int
    warmup_ratio: float = 0.03

    @property
    def warmup_steps(self) -> int:
        return round(self.warmup_ratio * self.total_steps)

    def lr(self, step: int) -> float:
        """Rate for update number ``step`` (1-based); lr(0) = 0 and lr(total) = 0."""
        w, total = self.warmup_steps, self.total_steps
        if step <= 0:
            return 0.0
        if step <= w:
            return self.base_lr * (step / w)
        if step >= total:
            return 0.0
        return 0.5 * self.base_lr * (1 + math.cos(math.pi * (step - w) / (total - w)))
