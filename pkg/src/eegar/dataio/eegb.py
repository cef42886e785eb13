"""EEGB container: ``manifest.json`` + ``data.bin`` (+ optional ``labels.bin``).

``data.bin`` holds little-endian float32 samples back to back, each row-major
(E, T, C); ``labels.bin`` holds one little-endian uint32 per sample.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..electrodes import VocabularyError, validate_names
from .records import DataError, Dataset

FORMAT_VERSION = 1
DTYPE = "f32le"

_REQUIRED = ("version", "name", "sample_rate", "electrode_names", "num_samples", "dtype", "shape")


class ManifestVersionError(DataError):
    pass


class TruncatedDataError(DataError):
    pass


def manifest_for(ds: Dataset) -> dict:
    m = {
        "version": FORMAT_VERSION,
        "name": ds.name,
        "sample_rate": int(ds.sample_rate),
        "electrode_names": list(ds.electrode_names),
        "num_samples": len(ds),
        "num_classes": ds.num_classes,
        "dtype": DTYPE,
        "shape": list(ds.sample_shape),
    }
    if ds.task_id is not None:
        m["task_id"] = ds.task_id
    if ds.subject_ids is not None:
        m["subject_ids"] = list(ds.subject_ids)
    if ds.extra:
        m["extra"] = ds.extra
    return m


def write_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ds.tokens.astype("<f4").tofile(path / "data.bin")
    if ds.labels is not None:
        ds.labels.astype("<u4").tofile(path / "labels.bin")
    elif (path / "labels.bin").exists():
        (path / "labels.bin").unlink()
    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest_for(ds), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise DataError(f"no manifest.json in {path}")
    with open(mpath, encoding="utf-8") as fh:
        m = json.load(fh)
    missing = [k for k in _REQUIRED if k not in m]
    if missing:
        raise DataError(f"manifest missing keys {missing}")
    if m["version"] != FORMAT_VERSION:
        raise ManifestVersionError(f"unsupported manifest version {m['version']} (expected {FORMAT_VERSION})")
    if m["dtype"] != DTYPE:
        raise DataError(f"unsupported dtype {m['dtype']!r}")
    try:
        validate_names(m["electrode_names"])
    except VocabularyError as exc:
        raise VocabularyError(f"manifest {mpath}: {exc}") from None
    if len(m["shape"]) != 3 or m["shape"][0] != len(m["electrode_names"]):
        raise DataError(f"manifest shape {m['shape']} inconsistent with electrode list")
    return m


def _read_exact(path: Path, dtype: str, count: int) -> np.ndarray:
    expected = count * np.dtype(dtype).itemsize
    actual = path.stat().st_size if path.exists() else 0
    if actual < expected:
        raise TruncatedDataError(f"{path.name}: expected {expected} bytes, found {actual}")
    if actual > expected:
        raise DataError(f"{path.name}: expected {expected} bytes, found {actual}")
    return np.fromfile(path, dtype=dtype, count=count)


def read_dataset(path) -> Dataset:
    path = Path(path)
    m = read_manifest(path)
    n = int(m["num_samples"])
    shape = tuple(int(s) for s in m["shape"])
    data = _read_exact(path / "data.bin", "<f4", n * int(np.prod(shape)))
    labels = None
    if (path / "labels.bin").exists():
        labels = _read_exact(path / "labels.bin", "<u4", n).astype(np.int64)
    return Dataset(
        m["name"], m["sample_rate"], tuple(m["electrode_names"]),
        data.astype(np.float64).reshape((n, *shape)),
        labels=labels, num_classes=m.get("num_classes"), task_id=m.get("task_id"),
        subject_ids=m.get("subject_ids"), extra=m.get("extra", {}),
    )
