"""Named-tensor checkpoints: ``index.json`` + ``params.bin`` (<f8) + ``config.json``."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dataio.records import DataError
from .ete import EteConfig, EteModel
from .numkit import Tensor
from .teg import TegModel
from .tokenizer import ElectrodeVocabulary

CHECKPOINT_VERSION = 1


class CheckpointError(DataError):
    pass


def _dump_json(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_arrays(path, arrays: dict[str, np.ndarray], config: dict) -> Path:
    """Write arrays in sorted-name order; identical inputs give identical bytes."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index, offset = {}, 0
    with open(path / "params.bin", "wb") as fh:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            index[name] = {"shape": list(arr.shape), "offset": offset}
            fh.write(arr.tobytes())
            offset += arr.nbytes
    _dump_json({"format_version": CHECKPOINT_VERSION, "params": index, "total_bytes": offset}, path / "index.json")
    _dump_json(config, path / "config.json")
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    for f in ("index.json", "params.bin", "config.json"):
        if not (path / f).is_file():
            raise CheckpointError(f"checkpoint file missing: {path / f}")
    index = json.loads((path / "index.json").read_text(encoding="utf-8"))
    if index.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {index.get('format_version')!r}")
    blob = (path / "params.bin").read_bytes()
    if len(blob) != index["total_bytes"]:
        raise CheckpointError(f"{path / 'params.bin'}: expected {index['total_bytes']} bytes, found {len(blob)}")
    arrays = {}
    for name, meta in index["params"].items():
        count = int(np.prod(meta["shape"], dtype=np.int64))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=meta["offset"]).reshape(meta["shape"]).astype(np.float64)
    return arrays, json.loads((path / "config.json").read_text(encoding="utf-8"))


def _fill(params: dict[str, Tensor], arrays: dict[str, np.ndarray], where: Path) -> None:
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise CheckpointError(f"{where}: missing parameters {missing[:5]}")
    for name, t in params.items():
        if arrays[name].shape != t.shape:
            raise CheckpointError(f"{where}: {name} has shape {arrays[name].shape}, expected {t.shape}")
        t.data[...] = arrays[name]


def save_encoder(path, ete: EteModel, vocab: ElectrodeVocabulary | None = None, extra: dict | None = None) -> Path:
    arrays = {k: t.data for k, t in ete.params.items()}
    if vocab is not None:
        arrays.update({k: t.data for k, t in vocab.named_parameters().items()})
    config = {"kind": "ete", "model": ete.config.to_dict(), "causal": ete.causal, "has_vocab": vocab is not None}
    if extra:
        config["extra"] = extra
    return save_arrays(path, arrays, config)


def load_encoder(path) -> tuple[EteModel, ElectrodeVocabulary | None, dict]:
    arrays, config = load_arrays(path)
    if config.get("kind") != "ete":
        raise CheckpointError(f"{path}: not an encoder checkpoint")
    ete = EteModel(EteConfig.from_dict(config["model"]), causal=config["causal"])
    _fill(ete.params, arrays, Path(path))
    vocab = None
    if config.get("has_vocab"):
        vocab = ElectrodeVocabulary(ete.config.token_width)
        _fill(vocab.named_parameters(), arrays, Path(path))
    return ete, vocab, config


def save_graph(path, teg: TegModel, extra: dict | None = None) -> Path:
    config = {"kind": "teg", "model": teg.config.to_dict(), "tasks": dict(teg.tasks)}
    if extra:
        config["extra"] = extra
    return save_arrays(path, {k: t.data for k, t in teg.params.items()}, config)


def load_graph(path) -> tuple[TegModel, dict]:
    arrays, config = load_arrays(path)
    if config.get("kind") != "teg":
        raise CheckpointError(f"{path}: not a graph checkpoint")
    teg = TegModel(EteConfig.from_dict(config["model"]), config["tasks"])
    _fill(teg.params, arrays, Path(path))
    return teg, config
