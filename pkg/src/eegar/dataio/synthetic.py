"""Seeded AR(2) EEG stand-in corpora.

PRNG contract: every electrode draws from its own PCG64 stream seeded by
``SeedSequence(seed, spawn_key=(vocab_index,))``, so an electrode's series does
not depend on which other electrodes are generated or in what order.  Labels
come from a separate stream with ``spawn_key=(LABEL_STREAM,)``.

Label rule ``energy_window``: the window is cut into ``num_classes`` equal
spans; sample i boosts innovation noise by ``task_gain`` inside span k_i on
every electrode, and its label is the argmax over spans of the electrode-summed
signal energy (which is order-dependent by construction).

Label rule ``rhythm_window``: inside span k_i every electrode switches from
(a1, a2) to the spectrally mirrored process (-a1, a2), carrying its state across
the switch.  Both processes have the same stationary variance, so the label k_i
is visible only in the temporal correlation structure, not in the energy.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import lfilter, lfiltic

from ..electrodes import VOCAB_SIZE, electrode_index, validate_names
from .preprocess import token_geometry, tokenize_window, window_samples, zscore_tokens
from .records import ConfigurationError, Dataset

LABEL_STREAM = VOCAB_SIZE
TASK_RULES = ("energy_window", "rhythm_window")


def is_stationary(a1: float, a2: float) -> bool:
    """Roots of 1 - a1 z - a2 z^2 lie outside the unit circle."""
    return abs(a2) < 1 and a1 + a2 < 1 and a2 - a1 < 1


def default_coefficients(name: str) -> tuple[float, float]:
    """Damped oscillator whose frequency is spread over electrodes by golden-ratio hashing."""
    k = electrode_index(name)
    r = 0.95
    omega = math.pi * (0.05 + 0.25 * ((k * 0.6180339887) % 1.0))
    return 2 * r * math.cos(omega), -r * r


def yule_walker_acf(a1: float, a2: float) -> tuple[float, float]:
    rho1 = a1 / (1 - a2)
    return rho1, a1 * rho1 + a2


def electrode_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(electrode_index(name),))))


def ar2_series(a1: float, a2: float, innovations: np.ndarray, init=(0.0, 0.0)) -> np.ndarray:
    """x[0], x[1] = init; x[t] = a1 x[t-1] + a2 x[t-2] + innovations[t] for t >= 2 (last axis)."""
    innovations = np.asarray(innovations, dtype=np.float64)
    n = innovations.shape[-1]
    out = np.empty_like(innovations)
    out[..., 0] = init[0]
    if n > 1:
        out[..., 1] = init[1]
    if n > 2:
        den = [1.0, -a1, -a2]
        zi = lfiltic([1.0], den, y=[init[1], init[0]])
        zi = np.broadcast_to(zi, (*innovations.shape[:-1], 2))
        out[..., 2:], _ = lfilter([1.0], den, innovations[..., 2:], axis=-1, zi=zi)
    return out


@dataclass
class SyntheticSpec:
    seed: int
    electrodes: tuple[str, ...]
    num_samples: int
    coefficients: dict[str, tuple[float, float]] = field(default_factory=dict)
    noise_std: float = 1.0
    task_rule: str | None = None
    num_classes: int = 2
    task_gain: float = 2.0
    task_id: str | None = None
    name: str = "synthetic"
    sample_rate: int = 256
    window_s: float = 4.0
    token_len: int = 256
    overlap: float = 0.875
    burn_in: int = 256
    num_subjects: int = 10

    def __post_init__(self):
        self.electrodes = validate_names(self.electrodes)
        self.coefficients = {k: tuple(v) for k, v in self.coefficients.items()}
        for name in self.electrodes:
            a1, a2 = self.coeffs_for(name)
            if not is_stationary(a1, a2):
                raise ConfigurationError(f"non-stationary coefficients for {name}: ({a1}, {a2})")
        if self.num_samples <= 0:
            raise ConfigurationError("num_samples must be positive")
        if self.task_rule is not None and self.task_rule not in TASK_RULES:
            raise ConfigurationError(f"unknown task rule {self.task_rule!r}; known: {TASK_RULES}")
        if self.task_rule is not None and self.num_classes < 2:
            raise ConfigurationError("a labelled task needs at least two classes")

    def coeffs_for(self, name: str) -> tuple[float, float]:
        for key, val in self.coefficients.items():
            if key.upper() == name.upper():
                return tuple(val)
        return default_coefficients(name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["electrodes"] = list(self.electrodes)
        d["coefficients"] = {k: list(v) for k, v in self.coefficients.items()}
        return d


def _class_envelope(spec: SyntheticSpec, n_window: int, classes: np.ndarray | None) -> np.ndarray:
    env = np.ones((spec.num_samples, spec.burn_in + n_window))
    if classes is None:
        return env
    bounds = np.linspace(0, n_window, spec.num_classes + 1).astype(int) + spec.burn_in
    for i, k in enumerate(classes):
        env[i, bounds[k]:bounds[k + 1]] = spec.task_gain
    return env


def stationary_variance(a1: float, a2: float) -> float:
    """Variance of a stationary AR(2) driven by unit-variance innovations."""
    return (1 - a2) / ((1 + a2) * ((1 - a2) ** 2 - a1 * a1))


def _continue_ar2(a1: float, a2: float, history: np.ndarray, innovations: np.ndarray) -> np.ndarray:
    """Run the recursion on ``innovations`` (B, n) given the last two outputs ``history`` (B, 2)."""
    den = [1.0, -a1, -a2]
    zi = np.stack([lfiltic([1.0], den, y=[h[1], h[0]]) for h in history])
    out, _ = lfilter([1.0], den, innovations, axis=-1, zi=zi)
    return out


def _rhythm_series(a1: float, a2: float, eps: np.ndarray, start: int, stop: int) -> np.ndarray:
    """Base dynamics everywhere except [start, stop), where (-a1, a2) takes over."""
    x = ar2_series(a1, a2, eps[:, :start])
    mid = _continue_ar2(-a1, a2, x[:, -2:], eps[:, start:stop])
    tail = _continue_ar2(a1, a2, mid[:, -2:], eps[:, stop:]) if stop < eps.shape[1] else mid[:, :0]
    return np.concatenate([x, mid, tail], axis=1)


def generate_raw(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray | None]:
    """Raw windows (N, E, W) and the drawn classes (or None)."""
    w = window_samples(spec.window_s, spec.sample_rate)
    classes = None
    if spec.task_rule is not None:
        label_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed, spawn_key=(LABEL_STREAM,))))
        classes = label_rng.integers(spec.num_classes, size=spec.num_samples)
    env = _class_envelope(spec, w, classes if spec.task_rule == "energy_window" else None)
    bounds = np.linspace(0, w, spec.num_classes + 1).astype(int) + spec.burn_in
    raw = np.empty((spec.num_samples, len(spec.electrodes), w))
    for j, name in enumerate(spec.electrodes):
        a1, a2 = spec.coeffs_for(name)
        rng = electrode_rng(spec.seed, name)
        eps = rng.standard_normal((spec.num_samples, spec.burn_in + w)) * spec.noise_std * env
        if spec.task_rule != "rhythm_window":
            raw[:, j] = ar2_series(a1, a2, eps)[:, spec.burn_in:]
            continue
        for k in range(spec.num_classes):
            rows = np.flatnonzero(classes == k)
            if len(rows):
                raw[rows, j] = _rhythm_series(a1, a2, eps[rows], bounds[k], bounds[k + 1])[:, spec.burn_in:]
    return raw, classes


def energy_window_labels(raw: np.ndarray, num_classes: int) -> np.ndarray:
    bounds = np.linspace(0, raw.shape[-1], num_classes + 1).astype(int)
    energy = np.stack([(raw[..., a:b] ** 2).sum(axis=(1, 2)) / (b - a) for a, b in zip(bounds[:-1], bounds[1:])], axis=1)
    return energy.argmax(axis=1)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    raw, classes = generate_raw(spec)
    stride, _ = token_geometry(raw.shape[-1], spec.token_len, spec.overlap)
    tokens = np.stack([tokenize_window(window, spec.token_len, stride) for window in raw])
    tokens = zscore_tokens(tokens)
    labels = None
    if spec.task_rule == "energy_window":
        labels = energy_window_labels(raw, spec.num_classes)
    elif spec.task_rule == "rhythm_window":
        labels = classes
    subjects = [f"S{i % spec.num_subjects:03d}" for i in range(spec.num_samples)]
    return Dataset(
        spec.name, spec.sample_rate, spec.electrodes, tokens, labels=labels,
        num_classes=spec.num_classes if labels is not None else None,
        task_id=spec.task_id, subject_ids=subjects, extra={"synthetic": spec.to_dict()},
    )
