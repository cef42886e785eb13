"""Electrode-wise regrouping of datasets and sequence assembly.

Pretraining sequences put the electrode's condition embedding in front of its
T signal tokens; fine-tuning sequences put the shared summary token after them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkit as nk
from .dataio.records import Dataset, EegSample
from .electrodes import VOCAB_SIZE, canonical_names, electrode_index
from .numkit import DimensionError, Tensor


class ElectrodeVocabulary:
    """The 138 canonical electrodes and one trainable width-C embedding each."""

    def __init__(self, width: int, rng: np.random.Generator | None = None, init_std: float = 0.02):
        rng = rng or np.random.default_rng(0)
        self.names = canonical_names()
        self.embeddings = Tensor(rng.standard_normal((VOCAB_SIZE, width)) * init_std,
                                 requires_grad=True, name="vocab.embeddings")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def width(self) -> int:
        return self.embeddings.shape[1]

    def index(self, name: str) -> int:
        return electrode_index(name)

    def named_parameters(self) -> dict[str, Tensor]:
        return {"vocab.embeddings": self.embeddings}


@dataclass
class ElectrodeSequence:
    electrode_id: int
    tokens: Tensor  # (T+1, C); row 0 is the condition embedding
    source_sample: tuple[int, int] | None = None


@dataclass
class GroupedCorpus:
    """Per-electrode token blocks D_e plus the provenance needed to undo the grouping.

    ``blocks[e]`` is (n_e, T, C); ``provenance[e]`` rows are
    (source index, sample index, electrode position within the sample).
    """

    blocks: dict[int, np.ndarray]
    provenance: dict[int, np.ndarray]
    sources: list[Dataset] = field(repr=False)

    def __len__(self) -> int:
        return len(self.blocks)

    def counts(self) -> dict[str, int]:
        names = canonical_names()
        return {names[e]: len(b) for e, b in self.blocks.items()}

    @property
    def num_sequences(self) -> int:
        return sum(len(b) for b in self.blocks.values())

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        """(electrode ids (M,), blocks (M, T, C)) in ascending electrode order."""
        keys = sorted(self.blocks)
        ids = np.concatenate([np.full(len(self.blocks[e]), e, dtype=np.intp) for e in keys])
        return ids, np.concatenate([self.blocks[e] for e in keys])

    def subset(self, keep) -> "GroupedCorpus":
        """Keep the flat positions ``keep`` (indices into ``flat()`` order)."""
        keep = np.sort(np.asarray(keep, dtype=np.intp))
        keys = sorted(self.blocks)
        offsets = np.cumsum([0] + [len(self.blocks[e]) for e in keys])
        blocks, prov = {}, {}
        for k, e in enumerate(keys):
            local = keep[(keep >= offsets[k]) & (keep < offsets[k + 1])] - offsets[k]
            if len(local):
                blocks[e] = self.blocks[e][local]
                prov[e] = self.provenance[e][local]
        return GroupedCorpus(blocks, prov, self.sources)


def _as_sources(data) -> list[Dataset]:
    if isinstance(data, Dataset):
        return [data]
    items = list(data)
    if items and isinstance(items[0], EegSample):
        return [Dataset.from_samples(f"sample{i}", 256, [s]) for i, s in enumerate(items)]
    return items


def reorganize(data: Dataset | Sequence[Dataset] | Sequence[EegSample]) -> GroupedCorpus:
    """Group every electrode stream of every sample by electrode identity."""
    sources = _as_sources(data)
    blocks: dict[int, list[np.ndarray]] = {}
    prov: dict[int, list[tuple[int, int, int]]] = {}
    for s_idx, ds in enumerate(sources):
        for pos, name in enumerate(ds.electrode_names):
            e = electrode_index(name)
            blocks.setdefault(e, []).append(ds.tokens[:, pos])
            prov.setdefault(e, []).extend((s_idx, i, pos) for i in range(len(ds)))
    return GroupedCorpus(
        {e: np.concatenate(b) for e, b in sorted(blocks.items())},
        {e: np.asarray(p, dtype=np.intp).reshape(-1, 3) for e, p in sorted(prov.items())},
        sources,
    )


def restore(corpus: GroupedCorpus) -> list[Dataset]:
    """Inverse of :func:`reorganize`: rebuild every source dataset sample for sample."""
    out = []
    for s_idx, ds in enumerate(corpus.sources):
        tokens = np.full(ds.tokens.shape, np.nan)
        for e, rows in corpus.provenance.items():
            mine = rows[:, 0] == s_idx
            tokens[rows[mine, 1], rows[mine, 2]] = corpus.blocks[e][mine]
        out.append(Dataset(ds.name, ds.sample_rate, ds.electrode_names, tokens, labels=ds.labels,
                           num_classes=ds.num_classes, task_id=ds.task_id, subject_ids=ds.subject_ids))
    return out


def assemble_pretrain(block, electrode_id: int, vocab: ElectrodeVocabulary) -> ElectrodeSequence:
    block = np.asarray(block.data if isinstance(block, Tensor) else block, dtype=np.float64)
    if block.ndim != 2 or block.shape[1] != vocab.width:
        raise DimensionError(f"block of shape {block.shape} does not match embedding width {vocab.width}")
    seq = assemble_pretrain_batch(block[None], np.array([electrode_id]), vocab)
    return ElectrodeSequence(int(electrode_id), nk.reshape(seq, seq.shape[1:]))


def assemble_pretrain_batch(blocks: np.ndarray, ids: np.ndarray, vocab: ElectrodeVocabulary) -> Tensor:
    """(B, T, C) blocks and (B,) electrode ids -> (B, T+1, C) with the embedding at position 0."""
    if blocks.ndim != 3 or blocks.shape[2] != vocab.width:
        raise DimensionError(f"blocks of shape {blocks.shape} do not match embedding width {vocab.width}")
    cond = nk.take_rows(vocab.embeddings, np.asarray(ids).reshape(-1, 1))
    return nk.concat([cond, Tensor(blocks)], axis=1)


def assemble_finetune(sample, special: Tensor) -> Tensor:
    """(E, T, C) sample tokens -> (E, T+1, C) with ``special`` appended to every stream."""
    tokens = sample.tokens if isinstance(sample, EegSample) else np.asarray(sample, dtype=np.float64)
    return assemble_finetune_batch(tokens, special)


def assemble_finetune_batch(tokens: np.ndarray, special: Tensor) -> Tensor:
    """(..., T, C) token streams -> (..., T+1, C) with ``special`` appended last."""
    if special.ndim != 1 or tokens.shape[-1] != special.shape[0]:
        raise DimensionError(f"special token of shape {special.shape} does not fit tokens {tokens.shape}")
    lead = tokens.shape[:-2]
    c = nk.broadcast_to(nk.reshape(special, (1,) * (len(lead) + 1) + special.shape), (*lead, 1, special.shape[0]))
    return nk.concat([Tensor(tokens), c], axis=-2)
