from __future__ import annotations

import numpy as np

from .records import DataError, Dataset


def subject_split(ds: Dataset, ratios=(8, 1, 1), seed: int = 0) -> dict[str, Dataset]:
    """Train/val/test split with no subject in more than one part.

    Subjects are shuffled with ``seed`` and dealt out by the given ratios.
    Without subject ids every sample counts as its own subject.
    """
    subjects = ds.subject_ids if ds.subject_ids is not None else [str(i) for i in range(len(ds))]
    unique = sorted(set(subjects))
    if len(unique) < len(ratios):
        raise DataError(f"{len(unique)} subjects cannot fill {len(ratios)} disjoint splits")
    order = np.random.default_rng(seed).permutation(len(unique))
    total = float(sum(ratios))
    cuts = np.round(np.cumsum(ratios)[:-1] / total * len(unique)).astype(int)
    groups = np.split(order, cuts)
    out = {}
    for split, group in zip(("train", "val", "test"), groups):
        chosen = {unique[i] for i in group}
        idx = [i for i, s in enumerate(subjects) if s in chosen]
        if not idx:
            raise DataError(f"empty {split} split")
        out[split] = ds.subset(idx)
    return out
