"""Recording, sample and dataset containers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from ..electrodes import validate_names

DEFAULT_RATE = 256
DEFAULT_TOKENS = 25
DEFAULT_TOKEN_LEN = 256


class DataError(Exception):
    """Malformed or missing data."""


class ConfigurationError(ValueError):
    pass


@dataclass
class EegRecording:
    electrode_names: tuple[str, ...]
    sample_rate: int
    signal: np.ndarray  # (E, total_samples), microvolts
    subject_id: str = ""

    def __post_init__(self):
        self.electrode_names = validate_names(self.electrode_names)
        self.signal = np.asarray(self.signal, dtype=np.float64)
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ConfigurationError(f"sample rate must be a positive integer, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if self.signal.ndim != 2 or self.signal.shape[0] != len(self.electrode_names):
            raise DataError(
                f"signal shape {self.signal.shape} does not match {len(self.electrode_names)} electrodes")

    @property
    def num_samples(self) -> int:
        return self.signal.shape[1]


@dataclass
class EegSample:
    electrodes: tuple[str, ...]
    tokens: np.ndarray  # (E, T, C)
    label: int | None = None
    task_id: str | None = None
    subject_id: str = ""

    def __post_init__(self):
        self.electrodes = validate_names(self.electrodes)
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 3 or self.tokens.shape[0] != len(self.electrodes):
            raise DataError(f"tokens shape {self.tokens.shape} does not match {len(self.electrodes)} electrodes")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.tokens.shape

    def is_normalized(self, tol: float = 1e-6) -> bool:
        """Per-electrode mean ~0 and std ~1 (constant electrodes must be all-zero)."""
        flat = self.tokens.reshape(self.tokens.shape[0], -1)
        mu = flat.mean(axis=1)
        sd = flat.std(axis=1)
        const = ~flat.any(axis=1)
        return bool(np.all(np.abs(mu) < tol) and np.all(const | (np.abs(sd - 1.0) < tol)))


@dataclass
class Dataset:
    """A homogeneous set of samples: one montage, one token geometry, one task."""

    name: str
    sample_rate: int
    electrode_names: tuple[str, ...]
    tokens: np.ndarray  # (N, E, T, C)
    labels: np.ndarray | None = None
    num_classes: int | None = None
    task_id: str | None = None
    subject_ids: list[str] | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.electrode_names = validate_names(self.electrode_names)
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 4 or self.tokens.shape[1] != len(self.electrode_names):
            raise DataError(f"dataset tokens {self.tokens.shape} do not match {len(self.electrode_names)} electrodes")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.tokens),):
                raise DataError(f"{len(self.labels)} labels for {len(self.tokens)} samples")
            if self.num_classes is None:
                self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
            elif len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise DataError(f"labels outside [0, {self.num_classes})")
        if self.subject_ids is not None and len(self.subject_ids) != len(self.tokens):
            raise DataError(f"{len(self.subject_ids)} subject ids for {len(self.tokens)} samples")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.tokens.shape[1:])

    def sample(self, i: int) -> EegSample:
        return EegSample(
            self.electrode_names,
            self.tokens[i],
            label=None if self.labels is None else int(self.labels[i]),
            task_id=self.task_id,
            subject_id="" if self.subject_ids is None else self.subject_ids[i],
        )

    def __iter__(self) -> Iterator[EegSample]:
        return (self.sample(i) for i in range(len(self)))

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.intp)
        return Dataset(
            self.name, self.sample_rate, self.electrode_names, self.tokens[index],
            labels=None if self.labels is None else self.labels[index],
            num_classes=self.num_classes, task_id=self.task_id,
            subject_ids=None if self.subject_ids is None else [self.subject_ids[i] for i in index],
            extra=dict(self.extra),
        )

    @classmethod
    def from_samples(cls, name: str, sample_rate: int, samples: list[EegSample], num_classes: int | None = None) -> "Dataset":
        if not samples:
            raise DataError("no samples")
        names = samples[0].electrodes
        if any(s.electrodes != names for s in samples):
            raise DataError("samples of one dataset must share an electrode list")
        labels = None
        if samples[0].label is not None:
            labels = np.array([s.label for s in samples])
        return cls(name, sample_rate, names, np.stack([s.tokens for s in samples]), labels=labels,
                   num_classes=num_classes, task_id=samples[0].task_id,
                   subject_ids=[s.subject_id for s in samples])
