"""Paired-seed experiment drivers that emit plot- and table-ready rows."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from ..dataio.records import Dataset
from ..dataio.synthetic import SyntheticSpec, generate_synthetic
from ..electrodes import canonical_names
from ..ete import EteConfig, EteModel, count_parameters
from ..tokenizer import ElectrodeVocabulary, GroupedCorpus, reorganize
from .finetune import FinetuneConfig, TaskSplit, finetune, prepare_tasks
from .pretrain import PretrainConfig, pretrain

BUDGET_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def multi_seed(run: Callable[[int], dict[str, float]], seeds: Sequence[int]) -> dict[str, dict]:
    """Run ``run(seed) -> {key: value}`` per seed; summarise every key as mean +- std."""
    per_seed = [run(s) for s in seeds]
    out = {}
    for key in per_seed[0]:
        vals = [r[key] for r in per_seed]
        m, sd = mean_std(vals)
        out[key] = {"mean": m, "std": sd, "values": vals}
    return out


def _pct(m: float, sd: float) -> str:
    return f"{100 * m:.1f} ± {100 * sd:.1f}"


def markdown_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows([[repr(c) if isinstance(c, float) else c for c in r] for r in rows])
    return buf.getvalue()


# -- synthetic workloads -------------------------------------------------------

@dataclass(frozen=True)
class DeskProfile:
    """Token geometry used by all desk-scale experiments."""

    window_s: float = 0.5
    token_len: int = 32
    overlap: float = 0.875


def pretraining_corpus(seed: int, electrodes: int = 32, samples: int = 64,
                       profile: DeskProfile = DeskProfile(), rule: str | None = None,
                       spans: int = 4) -> GroupedCorpus:
    """Unlabelled corpus; with ``rule`` set, windows carry that rule's events but labels are never read."""
    names = tuple(canonical_names()[:electrodes])
    spec = SyntheticSpec(seed=seed, electrodes=names, num_samples=samples, window_s=profile.window_s,
                         token_len=profile.token_len, overlap=profile.overlap, name="pretrain",
                         task_rule=rule, num_classes=spans)
    return reorganize(generate_synthetic(spec))


def overlapping_tasks(seed: int, samples: int = 300, gain: float = 2.0,
                      profile: DeskProfile = DeskProfile(), rule: str = "energy_window") -> list[Dataset]:
    """Two labelled tasks whose electrode sets share four electrodes."""
    names = canonical_names()
    specs = [
        SyntheticSpec(seed=seed + 101, electrodes=tuple(names[0:8]), num_samples=samples, task_rule=rule,
                      num_classes=2, task_gain=gain, task_id="task_a", name="task_a", window_s=profile.window_s,
                      token_len=profile.token_len, overlap=profile.overlap),
        SyntheticSpec(seed=seed + 202, electrodes=tuple(names[4:12]), num_samples=samples, task_rule=rule,
                      num_classes=3, task_gain=gain, task_id="task_b", name="task_b", window_s=profile.window_s,
                      token_len=profile.token_len, overlap=profile.overlap),
    ]
    return [generate_synthetic(s) for s in specs]


def rhythm_task(seed: int, samples: int = 600, num_classes: int = 3, electrodes: int = 8,
                profile: DeskProfile = DeskProfile()) -> Dataset:
    """One labelled task whose class is the span where the electrodes' rhythm flips."""
    spec = SyntheticSpec(seed=seed + 303, electrodes=tuple(canonical_names()[:electrodes]), num_samples=samples,
                         task_rule="rhythm_window", num_classes=num_classes, task_id="rhythm", name="rhythm",
                         window_s=profile.window_s, token_len=profile.token_len, overlap=profile.overlap)
    return generate_synthetic(spec)


# -- pretraining objective comparison --------------------------------------------

def ar_vs_mae(model_cfg: EteConfig, corpus: GroupedCorpus, tasks: Sequence[Dataset] | Sequence[TaskSplit],
              pre_cfg: PretrainConfig, ft_cfg: FinetuneConfig, seeds: Sequence[int]) -> dict:
    """Pretrain with each objective under the same budget, fine-tune the graph, compare test accuracy."""
    splits = tasks if tasks and isinstance(tasks[0], TaskSplit) else prepare_tasks(tasks, ft_cfg.split_seed)
    rows = []
    for seed in seeds:
        for objective in ("ar", "mae"):
            ete = EteModel(model_cfg, seed=seed, causal=objective == "ar")
            vocab = ElectrodeVocabulary(model_cfg.token_width, np.random.default_rng([seed, 7]), model_cfg.init_std)
            pre = pretrain(corpus, ete, vocab, replace(pre_cfg, objective=objective), seed=seed)
            ft = finetune(splits, ete, replace(ft_cfg, mode="joint"), seed=seed)
            acc = {t.task_id: ft.summary["accuracy"][t.task_id]["test"] for t in splits}
            rows.append({"seed": seed, "objective": objective, "metric": pre_cfg.metric,
                         "pretrain_loss": pre.summary["final_heldout"], **acc,
                         "mean_acc": float(np.mean(list(acc.values())))})
    task_ids = [t.task_id for t in splits]
    wins = 0
    for seed in seeds:
        ar = next(r for r in rows if r["seed"] == seed and r["objective"] == "ar")
        mae = next(r for r in rows if r["seed"] == seed and r["objective"] == "mae")
        wins += ar["mean_acc"] >= mae["mean_acc"]
    table_rows = []
    for objective in ("mae", "ar"):
        mine = [r for r in rows if r["objective"] == objective]
        table_rows.append([objective.upper(), pre_cfg.metric] + [_pct(*mean_std([r[t] for r in mine])) for t in task_ids]
                          + [_pct(*mean_std([r["mean_acc"] for r in mine]))])
    table = markdown_table(["Objective", "Metric", *task_ids, "Avg."], table_rows)
    return {"rows": rows, "ar_wins": wins, "seeds": list(seeds), "table": table}


# -- joint vs separate ---------------------------------------------------------

def joint_vs_separate(ete: EteModel, tasks: Sequence[Dataset] | Sequence[TaskSplit], ft_cfg: FinetuneConfig,
                      seeds: Sequence[int]) -> dict:
    """Both fine-tuning modes on the same frozen encoder and splits, paired by seed."""
    splits = tasks if tasks and isinstance(tasks[0], TaskSplit) else prepare_tasks(tasks, ft_cfg.split_seed)
    task_ids = [t.task_id for t in splits]
    rows, budgets = [], []
    for seed in seeds:
        res = {}
        for mode in ("joint", "separate"):
            run = finetune(splits, ete, replace(ft_cfg, mode=mode), seed=seed)
            res[mode] = run.summary
        budgets.append(res["separate"]["budgets"])
        for t in task_ids:
            j, s = res["joint"]["accuracy"][t]["test"], res["separate"]["accuracy"][t]["test"]
            rows.append({"seed": seed, "task": t, "joint": j, "separate": s, "delta": j - s,
                         "separate_steps": res["separate"]["budgets"][t], "joint_steps": ft_cfg.steps})
    table_rows = []
    for mode in ("separate", "joint"):
        table_rows.append([mode] + [_pct(*mean_std([r[mode] for r in rows if r["task"] == t])) for t in task_ids])
    table_rows.append(["delta"] + [f"{100 * np.mean([r['delta'] for r in rows if r['task'] == t]):+.1f}"
                                   for t in task_ids])
    return {"rows": rows, "budgets": budgets, "table": markdown_table(["Setting", *task_ids], table_rows)}


# -- scaling ----------------------------------------------------------------------

SCALING_HEADER = ("config", "parameters", "fraction", "tokens", "seed", "loss", "accuracy")


def scaling_harness(ladder: dict[str, EteConfig], corpus: GroupedCorpus,
                    tasks: Sequence[Dataset] | Sequence[TaskSplit], pre_cfg: PretrainConfig,
                    ft_cfg: FinetuneConfig, seeds: Sequence[int],
                    fractions: Sequence[float] = BUDGET_FRACTIONS) -> dict:
    """Grid over model sizes and token budgets.

    A budget fraction f keeps the first f of a seeded shuffle of the corpus and
    scales the step count by f, so the number of passes over the data is fixed.
    f = 0 is the no-pretraining baseline: the random encoder is frozen as is.
    """
    if len(ladder) < 3 or len(fractions) < 3:
        raise ValueError("scaling needs at least three configs and three budgets")
    splits = tasks if tasks and isinstance(tasks[0], TaskSplit) else prepare_tasks(tasks, ft_cfg.split_seed)
    rows = []
    for name, cfg in ladder.items():
        for frac in fractions:
            for seed in seeds:
                ete = EteModel(cfg, seed=seed)
                vocab = ElectrodeVocabulary(cfg.token_width, np.random.default_rng([seed, 7]), cfg.init_std)
                keep = np.random.default_rng([seed, 3]).permutation(corpus.num_sequences)
                keep = keep[:max(2, round(frac * corpus.num_sequences))]
                sub = corpus.subset(keep)
                steps = round(frac * pre_cfg.steps)
                run = pretrain(sub if frac > 0 else corpus, ete, vocab, replace(pre_cfg, steps=steps), seed=seed)
                tokens = 0 if frac == 0 else run.summary["signal_tokens"]
                ft = finetune(splits, ete, replace(ft_cfg, mode="joint"), seed=seed)
                acc = float(np.mean([ft.summary["accuracy"][t.task_id]["test"] for t in splits]))
                loss = run.summary["final_heldout"]
                rows.append([name, count_parameters(cfg), float(frac), tokens, seed, loss, acc])
    return {"header": SCALING_HEADER, "rows": rows, "csv": csv_text(SCALING_HEADER, rows)}


def gnuplot_blocks(rows: Sequence[Sequence]) -> str:
    """Per-config blocks of "tokens loss_mean loss_std acc_mean acc_std", separated by blank lines."""
    out = ["# config fraction tokens loss_mean loss_std acc_mean acc_std"]
    configs = list(dict.fromkeys(r[0] for r in rows))
    for k, name in enumerate(configs):
        if k:
            out += ["", ""]
        out.append(f"# {name}")
        for frac in sorted({r[2] for r in rows if r[0] == name}):
            sel = [r for r in rows if r[0] == name and r[2] == frac]
            lm, ls = mean_std([r[5] for r in sel])
            am, asd = mean_std([r[6] for r in sel])
            out.append(f"{name} {frac!r} {int(np.mean([r[3] for r in sel]))} {lm!r} {ls!r} {am!r} {asd!r}")
    return "\n".join(out) + "\n"
