"""Resampling, windowing into overlapping tokens, and z-scoring."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .records import ConfigurationError, DataError, EegRecording, EegSample

ZSCORE_FLOOR = 1e-8


def resample(rec: EegRecording, target_hz: int) -> EegRecording:
    """Linear-interpolation resampling; the last output samples may extrapolate."""
    if target_hz <= 0:
        raise ConfigurationError(f"target rate must be positive, got {target_hz}")
    n = rec.num_samples
    if n == 0:
        raise DataError("cannot resample an empty signal")
    if target_hz == rec.sample_rate:
        return EegRecording(rec.electrode_names, rec.sample_rate, rec.signal.copy(), rec.subject_id)
    if n < 2:
        raise DataError("resampling needs at least two samples")
    n_out = max(1, int(round(n * target_hz / rec.sample_rate)))
    pos = np.arange(n_out) * (rec.sample_rate / target_hz)
    left = np.clip(np.floor(pos).astype(np.intp), 0, n - 2)
    frac = pos - left
    sig = rec.signal
    out = sig[:, left] + (sig[:, left + 1] - sig[:, left]) * frac
    return EegRecording(rec.electrode_names, target_hz, out, rec.subject_id)


def bandpass_hook(rec: EegRecording) -> EegRecording:
    """Placeholder for 0.1-100 Hz filtering; returns the recording unchanged."""
    return rec


def token_geometry(window_samples: int, token_len: int, overlap: float) -> tuple[int, int]:
    """(stride, token count) for one window; stride must come out integral."""
    stride_f = token_len * (1.0 - overlap)
    stride = int(round(stride_f))
    if stride <= 0 or not math.isclose(stride, stride_f, abs_tol=1e-9):
        raise ConfigurationError(f"stride {stride_f} = {token_len} * (1 - {overlap}) is not a positive integer")
    if window_samples < token_len:
        raise ConfigurationError(f"window of {window_samples} samples is shorter than a {token_len}-sample token")
    return stride, (window_samples - token_len) // stride + 1


def window_samples(window_s: float, rate: int) -> int:
    w = window_s * rate
    if not math.isclose(w, round(w), abs_tol=1e-9):
        raise ConfigurationError(f"{window_s} s at {rate} Hz is not a whole number of samples")
    return int(round(w))


def tokenize_window(signal: np.ndarray, token_len: int, stride: int) -> np.ndarray:
    """(E, W) window -> (E, T, token_len) tokens; token t starts at sample t*stride."""
    return sliding_window_view(signal, token_len, axis=-1)[:, ::stride].copy()


def segment_and_tokenize(rec: EegRecording, window_s: float = 4, token_len: int = 256,
                         overlap: float = 0.875, label: int | None = None,
                         task_id: str | None = None) -> list[EegSample]:
    """Cut ``rec`` into back-to-back windows and each window into overlapping tokens.

    A trailing partial window is dropped.  Samples are not normalised here.
    """
    w = window_samples(window_s, rec.sample_rate)
    stride, _ = token_geometry(w, token_len, overlap)
    out = []
    for start in range(0, rec.num_samples - w + 1, w):
        tokens = tokenize_window(rec.signal[:, start:start + w], token_len, stride)
        out.append(EegSample(rec.electrode_names, tokens, label=label, task_id=task_id, subject_id=rec.subject_id))
    return out


def zscore_tokens(tokens: np.ndarray) -> np.ndarray:
    """Normalise each electrode's (T, C) block of an (..., E, T, C) array.

    Blocks with std below ZSCORE_FLOOR (constant electrodes) become exact zeros.
    """
    mu = tokens.mean(axis=(-2, -1), keepdims=True)
    sd = tokens.std(axis=(-2, -1), keepdims=True)
    flat = sd < ZSCORE_FLOOR
    out = (tokens - mu) / np.where(flat, 1.0, sd)
    return np.where(flat, 0.0, out)


def zscore(sample: EegSample) -> EegSample:
    return EegSample(sample.electrodes, zscore_tokens(sample.tokens), sample.label, sample.task_id, sample.subject_id)


def preprocess(rec: EegRecording, target_hz: int = 256, window_s: float = 4, token_len: int = 256,
               overlap: float = 0.875, label: int | None = None, task_id: str | None = None) -> list[EegSample]:
    """resample -> band-pass hook -> segment/tokenize -> z-score."""
    rec = bandpass_hook(resample(rec, target_hz))
    samples = [zscore(s) for s in segment_and_tokenize(rec, window_s, token_len, overlap, label, task_id)]
    for s in samples:
        if not s.is_normalized():
            raise DataError("sample failed z-score invariant after preprocessing")
    return samples
