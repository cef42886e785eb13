"""Multi-task fine-tuning of the electrode graph on top of a frozen encoder."""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import numkit as nk
from ..checkpoint import save_graph
from ..dataio.records import DataError, Dataset
from ..dataio.splits import subject_split
from ..ete import EteModel
from ..numkit import NonFiniteError, Tensor, no_grad
from ..teg import FrozenEncoder, SubgraphActivation, TegModel, batch_forward
from .optim import OptimState, Schedule, adamw_step
from .pretrain import DivergenceError, TrainRun, batch_indices
from .runlog import MetricsLog


@dataclass
class FinetuneConfig:
    mode: str = "joint"
    steps: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 50
    log_every: int = 10
    split_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("joint", "separate"):
            raise ValueError(f"mode must be 'joint' or 'separate', got {self.mode!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass
class TaskSplit:
    task_id: str
    num_classes: int
    activation: SubgraphActivation
    train: Dataset
    val: Dataset
    test: Dataset

    def part(self, split: str) -> Dataset:
        if split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {split!r}")
        return getattr(self, split)


def prepare_tasks(datasets: Sequence[Dataset], split_seed: int = 0) -> list[TaskSplit]:
    """Subject-disjoint 8:1:1 splits and the electrode activation of every task."""
    out, seen = [], set()
    for ds in datasets:
        if ds.task_id is None or ds.labels is None or ds.num_classes is None:
            raise DataError(f"dataset {ds.name!r} must declare task_id, labels and num_classes")
        if ds.task_id in seen:
            raise DataError(f"task {ds.task_id!r} appears twice")
        seen.add(ds.task_id)
        parts = subject_split(ds, seed=split_seed)
        out.append(TaskSplit(ds.task_id, int(ds.num_classes), SubgraphActivation.from_names(ds.electrode_names),
                             parts["train"], parts["val"], parts["test"]))
    return out


def plan_joint_batches(sizes: Sequence[int], steps: int, batch: int, seed: int) -> list[np.ndarray]:
    """Per-step (task, sample) pairs drawn from the pooled training sets (proportional mixing)."""
    if min(sizes, default=0) < 1:
        raise DataError("every task needs at least one training sample")
    offsets = np.cumsum([0, *sizes])
    plan = []
    for step in range(1, steps + 1):
        rows = batch_indices(int(offsets[-1]), batch, step, seed)
        task = np.searchsorted(offsets, rows, side="right") - 1
        plan.append(np.stack([task, rows - offsets[task]], axis=1))
    return plan


def matched_budgets(plan: Sequence[np.ndarray], num_tasks: int, batch: int) -> list[int]:
    """Steps a stand-alone model gets per task: the joint run's task samples divided by batch size."""
    seen = np.zeros(num_tasks, dtype=np.int64)
    for b in plan:
        seen += np.bincount(b[:, 0], minlength=num_tasks)
    return [int(round(s / batch)) for s in seen]


def param_checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


@contextmanager
def frozen(*param_dicts):
    saved = [(t, t.requires_grad) for d in param_dicts for t in d.values()]
    for t, _ in saved:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag


def batch_loss(teg: TegModel, tasks: Sequence[TaskSplit], encoders: Sequence[FrozenEncoder],
               pairs: np.ndarray) -> Tensor:
    """Cross-entropy with uniform per-sample weighting over a (task, sample) batch."""
    zs: list = [None] * len(pairs)
    for t in sorted(set(pairs[:, 0].tolist())):
        rows = np.flatnonzero(pairs[:, 0] == t)
        for r, z in zip(rows, encoders[t].encode(teg.special, pairs[rows, 1])):
            zs[r] = z
    logits = batch_forward(teg, [(z, tasks[t].activation, tasks[t].task_id) for z, (t, _) in zip(zs, pairs)])
    total = None
    for t in sorted(set(pairs[:, 0].tolist())):
        rows = np.flatnonzero(pairs[:, 0] == t)
        labels = tasks[t].train.labels[pairs[rows, 1]]
        term = nk.cross_entropy(nk.stack([logits[r] for r in rows]), labels) * (len(rows) / len(pairs))
        total = term if total is None else total + term
    return total


def predict(teg: TegModel, encoder: FrozenEncoder, activation: SubgraphActivation, task_id: str,
            chunk: int = 64) -> np.ndarray:
    preds = []
    with no_grad():
        for s in range(0, len(encoder), chunk):
            zs = encoder.encode(teg.special, np.arange(s, min(s + chunk, len(encoder))))
            logits = batch_forward(teg, [(z, activation, task_id) for z in zs])
            preds.extend(int(np.argmax(l.data)) for l in logits)
    return np.asarray(preds, dtype=np.int64)


def accuracy_report(preds: np.ndarray, labels: np.ndarray, num_classes: int) -> dict:
    if len(labels) == 0:
        raise DataError("cannot evaluate an empty split")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    correct = int(np.trace(confusion))
    return {"accuracy": correct / len(labels), "correct": correct, "total": int(len(labels)),
            "confusion": confusion.tolist()}


def evaluate(models: tuple[EteModel, TegModel], task: TaskSplit, split: str = "test",
             encoder: FrozenEncoder | None = None) -> dict:
    """Accuracy (and confusion matrix) of an encoder/graph pair on one task split."""
    ete, teg = models
    ds = task.part(split)
    if len(ds) == 0:
        raise DataError(f"empty {split} split for task {task.task_id!r}")
    encoder = encoder or FrozenEncoder(ete, ds.tokens)
    return accuracy_report(predict(teg, encoder, task.activation, task.task_id), ds.labels, task.num_classes)


@dataclass
class _Loop:
    ete: EteModel
    teg: TegModel
    tasks: list[TaskSplit]
    encoders: dict
    cfg: FinetuneConfig
    log: MetricsLog

    def run(self, steps: int, batches) -> None:
        params = self.teg.named_parameters()
        state = OptimState.for_params(params, lr=self.cfg.lr, beta1=self.cfg.beta1, beta2=self.cfg.beta2,
                                      eps=self.cfg.eps, weight_decay=self.cfg.weight_decay)
        sched = Schedule(self.cfg.lr, steps, self.cfg.warmup_ratio)
        for step in range(1, steps + 1):
            try:
                loss = batch_loss(self.teg, self.tasks, [self.encoders[t.task_id, 'train'] for t in self.tasks],
                                  batches(step))
                grads = nk.backward(loss, list(params.values()))
                lr = sched.lr(step)
                adamw_step(params, {k: grads[t] for k, t in params.items()}, state, lr)
            except NonFiniteError as exc:
                raise DivergenceError(f"fine-tuning diverged at step {step}: {exc}") from None
            for t in params.values():
                t.grad = None
            row = None
            if step % self.cfg.log_every == 0 or step == steps:
                row = {"step": step, "lr": lr, "loss": loss.item()}
            if step % self.cfg.eval_every == 0 or step == steps:
                row = row or {"step": step, "lr": lr, "loss": loss.item()}
                for task in self.tasks:
                    row[f"val_acc.{task.task_id}"] = evaluate((self.ete, self.teg), task, "val",
                                                               self.encoders[task.task_id, "val"])["accuracy"]
            if row:
                self.log.append(row)


def finetune(datasets: Sequence[Dataset] | Sequence[TaskSplit], ete: EteModel, cfg: FinetuneConfig,
             seed: int = 0, run_dir=None, teg_config=None) -> TrainRun:
    """Train graph model(s) on frozen encoder features; the encoder is verified untouched."""
    tasks = list(datasets) if datasets and isinstance(datasets[0], TaskSplit) else prepare_tasks(datasets, cfg.split_seed)
    if not tasks:
        raise DataError("no tasks to fine-tune")
    teg_config = teg_config or ete.config
    run_dir = Path(run_dir) if run_dir is not None else None
    before = param_checksum(ete.params)
    plan = plan_joint_batches([len(t.train) for t in tasks], cfg.steps, cfg.batch_size, seed)
    budgets = matched_budgets(plan, len(tasks), cfg.batch_size)
    columns = ("step", "lr", "loss") + tuple(f"val_acc.{t.task_id}" for t in tasks)
    models: dict[str, TegModel] = {}
    results: dict[str, dict] = {}
    with frozen(ete.params):
        encoders = {(t.task_id, s): FrozenEncoder(ete, t.part(s).tokens) for t in tasks for s in ("train", "val", "test")}
        if cfg.mode == "joint":
            teg = TegModel(teg_config, {t.task_id: t.num_classes for t in tasks}, seed=seed)
            log = MetricsLog(run_dir, columns)
            _Loop(ete, teg, tasks, encoders, cfg, log).run(cfg.steps, lambda s: plan[s - 1])
            logs = {"joint": log}
            for t in tasks:
                models[t.task_id] = teg
            if run_dir is not None:
                save_graph(run_dir / "teg", teg)
        else:
            logs = {}
            for k, t in enumerate(tasks):
                teg = TegModel(teg_config, {t.task_id: t.num_classes}, seed=seed)
                sub = run_dir / t.task_id if run_dir is not None else None
                log = MetricsLog(sub, ("step", "lr", "loss", f"val_acc.{t.task_id}"))
                n = len(t.train)
                _Loop(ete, teg, [t], encoders, cfg, log).run(
                    budgets[k], lambda s, n=n: np.stack([np.zeros(cfg.batch_size, dtype=np.int64),
                                                          batch_indices(n, cfg.batch_size, s, seed)], axis=1))
                logs[t.task_id] = log
                models[t.task_id] = teg
                if sub is not None:
                    save_graph(sub / "teg", teg)
        for t in tasks:
            results[t.task_id] = {s: evaluate((ete, models[t.task_id]), t, s, encoders[t.task_id, s])["accuracy"]
                                 for s in ("val", "test")}
    after = param_checksum(ete.params)
    if before != after:
        raise RuntimeError("encoder parameters changed during fine-tuning")
    summary = {"mode": cfg.mode, "budgets": dict(zip([t.task_id for t in tasks], budgets)),
               "joint_steps": cfg.steps, "accuracy": results, "encoder_checksum": after}
    run = TrainRun(f"finetune-{cfg.mode}", seed, asdict(cfg), logs.get("joint") or next(iter(logs.values())),
                   run_dir, summary)
    run.models = models
    run.logs = logs
    return run
