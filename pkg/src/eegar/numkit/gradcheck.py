"""Central-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, NumkitError, Tensor, backward, no_grad

# Denominator floor for relative error so that near-zero gradients are judged
# on absolute error instead of blowing up.
REL_FLOOR = 1e-3


class DeterminismError(NumkitError):
    pass


@dataclass
class GradcheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-5

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst(self) -> str | None:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def merge(self, other: "GradcheckReport", prefix: str = "") -> None:
        for k, v in other.errors.items():
            self.errors[prefix + k] = v


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _scalarize(out: Tensor, weights: np.ndarray | None) -> Tensor:
    if out.ndim == 0:
        return out
    return (out * weights).sum()


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    tolerance: float = 1e-5,
    names: Sequence[str] | None = None,
    max_per_input: int | None = None,
    seed: int = 0,
    entries: dict[str, np.ndarray] | None = None,
) -> GradcheckReport:
    """Compare backward() against central differences for every entry of ``inputs``.

    Non-scalar outputs are reduced with a fixed random projection.  With
    ``max_per_input`` only that many randomly chosen entries of each input are
    probed; ``entries`` pins the flat indices probed for the named inputs.
    """
    if not 0 < eps <= 1e-3:
        raise ContractError(f"eps must lie in (0, 1e-3], got {eps}")
    names = list(names) if names is not None else [t.name or f"input{i}" for i, t in enumerate(inputs)]
    rng = np.random.default_rng(seed)

    with no_grad():
        probe = f(*inputs)
        again = f(*inputs)
    if not np.array_equal(probe.data, again.data):
        raise DeterminismError("two forward passes with identical inputs disagree")
    weights = None if probe.ndim == 0 else rng.standard_normal(probe.shape)

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = _scalarize(f(*inputs), weights)
    analytic = backward(loss, params=inputs)

    def value() -> float:
        with no_grad():
            return float(_scalarize(f(*inputs), weights).data)

    report = GradcheckReport(tolerance=tolerance)
    for name, t in zip(names, inputs):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if entries is not None and name in entries:
            idx = np.asarray(entries[name], dtype=np.intp)
        elif max_per_input is not None and flat.size > max_per_input:
            idx = np.sort(rng.choice(flat.size, size=max_per_input, replace=False))
        ana = analytic[t].reshape(-1)[idx]
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            hi = value()
            flat[i] = orig - eps
            lo = value()
            flat[i] = orig
            num[j] = (hi - lo) / (2 * eps)
        report.errors[name] = float(relative_error(ana, num).max()) if len(idx) else 0.0
    return report
