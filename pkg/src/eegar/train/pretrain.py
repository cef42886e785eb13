"""Self-supervised pretraining of the temporal encoder (next-token or masked reconstruction)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import numkit as nk
from ..checkpoint import load_arrays, load_encoder, save_arrays, save_encoder
from ..dataio.records import DataError
from ..ete import EteModel, ar_loss, choose_mask_positions, mae_loss
from ..numkit import NonFiniteError, no_grad
from ..tokenizer import ElectrodeVocabulary, GroupedCorpus, assemble_pretrain_batch
from .optim import OptimState, Schedule, adamw_step
from .runlog import MetricsLog

PRETRAIN_COLUMNS = ("step", "lr", "loss", "heldout_loss")


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, last_checkpoint: Path | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    warmup_ratio: float = 0.03
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    objective: str = "ar"
    metric: str = "l2"
    mask_ratio: float = 0.5
    holdout_fraction: float = 0.1
    eval_every: int = 100
    log_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.objective not in ("ar", "mae"):
            raise ValueError(f"objective must be 'ar' or 'mae', got {self.objective!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in (0, 1)")


@dataclass
class TrainRun:
    mode: str
    seed: int
    config: dict
    metrics: MetricsLog
    run_dir: Path | None = None
    summary: dict = field(default_factory=dict)


def holdout_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, held-out) partition of sequence positions; both sorted."""
    if n < 2:
        raise DataError("need at least two sequences to hold some out")
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    k = min(max(1, round(fraction * n)), n - 1)
    return np.sort(order[k:]), np.sort(order[:k])


def batch_indices(n: int, batch: int, step: int, seed: int) -> np.ndarray:
    """Rows for update ``step`` (1-based): consecutive slices of per-epoch shuffles.

    A pure function of (n, batch, step, seed), so a resumed run draws the same
    batches as an uninterrupted one.
    """
    start = (step - 1) * batch
    rows = []
    while len(rows) < batch:
        epoch, offset = divmod(start + len(rows), n)
        perm = np.random.default_rng([seed, 1, epoch]).permutation(n)
        rows.extend(perm[offset:offset + batch - len(rows)])
    return np.asarray(rows)


def _objective(ete, seq, cfg: PretrainConfig, positions=None):
    if cfg.objective == "ar":
        return ar_loss(ete, seq, cfg.metric)
    return mae_loss(ete, seq, cfg.mask_ratio, cfg.metric, positions=positions)


def _mask_positions(cfg: PretrainConfig, batch: int, num_signal: int, seed: int, step: int):
    if cfg.objective != "mae":
        return None
    return choose_mask_positions(batch, num_signal, cfg.mask_ratio, np.random.default_rng([seed, 2, step]))


def heldout_loss(ete: EteModel, vocab: ElectrodeVocabulary, ids: np.ndarray, blocks: np.ndarray,
                 cfg: PretrainConfig, seed: int = 0, chunk: int = 256) -> float:
    """Mean loss over held-out sequences (fixed masks for the masked objective)."""
    total = 0.0
    with no_grad():
        for s in range(0, len(ids), chunk):
            b = blocks[s:s + chunk]
            pos = _mask_positions(cfg, len(b), b.shape[1], seed, 10**9 + s)
            seq = assemble_pretrain_batch(b, ids[s:s + chunk], vocab)
            total += _objective(ete, seq, cfg, pos).item() * len(b)
    return total / len(ids)


def _params(ete, vocab):
    params = dict(ete.params)
    params.update(vocab.named_parameters())
    return params


def _save(run_dir: Path, name: str, ete, vocab, state: OptimState, step: int) -> Path:
    path = run_dir / "checkpoints" / name
    save_encoder(path, ete, vocab, extra={"step": step})
    save_arrays(path / "optim", state.arrays(), state.hyper())
    return path


def pretrain(corpus: GroupedCorpus, ete: EteModel, vocab: ElectrodeVocabulary, cfg: PretrainConfig,
             seed: int = 0, run_dir=None, resume_from=None) -> TrainRun:
    """Train ``ete`` and ``vocab`` in place on the grouped corpus; returns the run record."""
    if corpus.num_sequences == 0:
        raise DataError("empty pretraining corpus")
    if cfg.objective == "ar" and not ete.causal:
        raise ValueError("next-token pretraining needs a causal encoder")
    if cfg.objective == "mae" and ete.causal:
        raise ValueError("masked reconstruction needs a bidirectional encoder")
    ids, blocks = corpus.flat()
    train_rows, held_rows = holdout_split(len(ids), cfg.holdout_fraction, seed)
    tr_ids, tr_blocks = ids[train_rows], blocks[train_rows]
    ho_ids, ho_blocks = ids[held_rows], blocks[held_rows]
    run_dir = Path(run_dir) if run_dir is not None else None

    params = _params(ete, vocab)
    sched = Schedule(cfg.lr, cfg.steps, cfg.warmup_ratio)
    state = OptimState.for_params(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                                  weight_decay=cfg.weight_decay)
    if resume_from is not None:
        loaded, loaded_vocab, _ = load_encoder(resume_from)
        for k, t in loaded.params.items():
            ete.params[k].data[...] = t.data
        vocab.embeddings.data[...] = loaded_vocab.embeddings.data
        arrays, hyper = load_arrays(Path(resume_from) / "optim")
        state = OptimState.from_arrays(arrays, hyper)
        log = MetricsLog.load(run_dir, PRETRAIN_COLUMNS) if run_dir is not None else MetricsLog(None, PRETRAIN_COLUMNS)
        log.truncate(state.step)
    else:
        log = MetricsLog(run_dir, PRETRAIN_COLUMNS)

    initial = heldout_loss(ete, vocab, ho_ids, ho_blocks, cfg, seed)
    if state.step == 0:
        log.append({"step": 0, "lr": 0.0, "loss": None, "heldout_loss": initial})
    last_ckpt = None
    heldout = log.last("heldout_loss")
    for step in range(state.step + 1, cfg.steps + 1):
        rows = batch_indices(len(tr_ids), cfg.batch_size, step, seed)
        pos = _mask_positions(cfg, len(rows), tr_blocks.shape[1], seed, step)
        try:
            seq = assemble_pretrain_batch(tr_blocks[rows], tr_ids[rows], vocab)
            loss = _objective(ete, seq, cfg, pos)
            grads = nk.backward(loss, list(params.values()))
            lr = sched.lr(step)
            adamw_step(params, {k: grads[t] for k, t in params.items()}, state, lr)
        except NonFiniteError as exc:
            raise DivergenceError(f"diverged at step {step}: {exc}", last_ckpt) from None
        _clear(params)
        row = None
        if step % cfg.log_every == 0 or step == cfg.steps:
            row = {"step": step, "lr": lr, "loss": loss.item(), "heldout_loss": None}
        if step % cfg.eval_every == 0 or step == cfg.steps:
            heldout = heldout_loss(ete, vocab, ho_ids, ho_blocks, cfg, seed)
            row = row or {"step": step, "lr": lr, "loss": loss.item()}
            row["heldout_loss"] = heldout
        if row:
            log.append(row)
        if run_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            last_ckpt = _save(run_dir, f"step_{step:06d}", ete, vocab, state, step)

    if run_dir is not None:
        _save(run_dir, "final", ete, vocab, state, state.step)
    final = heldout if cfg.steps > 0 else initial
    summary = {"initial_heldout": initial, "final_heldout": final, "steps": cfg.steps,
               "train_sequences": int(len(tr_ids)), "heldout_sequences": int(len(ho_ids)),
               "signal_tokens": int(tr_blocks.shape[0] * tr_blocks.shape[1])}
    return TrainRun(f"pretrain-{cfg.objective}", seed, asdict(cfg), log, run_dir, summary)


def _clear(params) -> None:
    for t in params.values():
        t.grad = None
