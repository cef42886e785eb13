"""Batch command line: ``eegar <verb> [--config run.json] [--seed N] [--out DIR] [--threads N]``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import ExitStack
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from filelock import FileLock, Timeout
from threadpoolctl import threadpool_limits

from . import gradsuite
from .checkpoint import CheckpointError, load_arrays, load_encoder, load_graph
from .dataio import ConfigurationError, DataError, SyntheticSpec, generate_synthetic, read_dataset, write_dataset
from .dataio.eegb import read_manifest
from .electrodes import VocabularyError
from .ete import PRESETS, EteConfig, EteModel, count_parameters
from .numkit import NonFiniteError
from .teg import TaskError
from .tokenizer import ElectrodeVocabulary, reorganize
from .train import (
    DivergenceError,
    FinetuneConfig,
    PretrainConfig,
    evaluate,
    finetune,
    gnuplot_blocks,
    mean_std,
    prepare_tasks,
    pretrain,
    scaling_harness,
)

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_BUSY = 0, 1, 2, 3, 4, 5
THREADS_ENV = "EEGAR_THREADS"
SNAPSHOT = "run_config.json"

EPILOG = f"""\
exit codes:
  0  success
  1  gradcheck found a gradient above tolerance (worst offender printed)
  2  configuration error (bad or unknown config keys, invalid values)
  3  data error (missing or corrupt dataset/checkpoint, unknown electrode or task)
  4  numeric divergence during training
  5  run directory is locked by another process

environment:
  {THREADS_ENV}  default for --threads (BLAS/OpenMP thread cap)
"""


class ConfigError(ValueError):
    pass


# -- run configuration ------------------------------------------------------------

def _strict(section: str, given: dict, allowed: Sequence[str]) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{section}: expected an object, got {type(given).__name__}")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    return given


def _names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def _model(section: str, d: dict) -> EteConfig:
    d = dict(_strict(section, d, ["preset", *_names(EteConfig)]))
    preset = d.pop("preset", None)
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"{section}: unknown preset {preset!r}; known: {sorted(PRESETS)}")
    try:
        return PRESETS[preset].with_(**d) if preset else EteConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _dataclass(section: str, cls, d: dict):
    try:
        return cls(**_strict(section, d, _names(cls)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


@dataclass
class RunConfig:
    """Resolved JSON run document with sections model, data, train and seeds."""

    model: EteConfig = field(default_factory=lambda: PRESETS["tiny"])
    ladder: dict[str, EteConfig] = field(default_factory=dict)
    synthetic: dict | None = None
    corpus: list[str] = field(default_factory=list)
    tasks: list[str] = field(default_factory=list)
    encoder: str | None = None
    graphs: list[str] = field(default_factory=list)
    finetune_run: str | None = None
    split: str = "test"
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    fractions: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    seeds: list[int] = field(default_factory=lambda: [0])

    MODEL_KEYS = ("preset", *_names(EteConfig), "ladder")
    DATA_KEYS = ("synthetic", "corpus", "tasks", "encoder", "graphs", "finetune_run", "split")
    TRAIN_KEYS = ("pretrain", "finetune", "fractions")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        _strict("config", doc, ("model", "data", "train", "seeds"))
        model = dict(_strict("model", doc.get("model", {}), cls.MODEL_KEYS))
        ladder_doc = model.pop("ladder", {})
        cfg = cls(model=_model("model", model or {"preset": "tiny"}))
        if not isinstance(ladder_doc, dict):
            raise ConfigError("model.ladder: expected an object mapping names to model configs")
        cfg.ladder = {name: _model(f"model.ladder.{name}", m) for name, m in ladder_doc.items()}

        data = _strict("data", doc.get("data", {}), cls.DATA_KEYS)
        if data.get("synthetic") is not None:
            syn = _strict("data.synthetic", data["synthetic"], _names(SyntheticSpec))
            cfg.synthetic = _dataclass("data.synthetic", SyntheticSpec, syn).to_dict() if "seed" in syn else dict(syn)
        for key in ("corpus", "tasks", "graphs"):
            val = data.get(key, [])
            if not isinstance(val, list) or not all(isinstance(v, str) for v in val):
                raise ConfigError(f"data.{key}: expected a list of paths")
            setattr(cfg, key, val)
        cfg.encoder, cfg.finetune_run = data.get("encoder"), data.get("finetune_run")
        cfg.split = data.get("split", "test")
        if cfg.split not in ("train", "val", "test"):
            raise ConfigError(f"data.split must be train, val or test, got {cfg.split!r}")

        train = _strict("train", doc.get("train", {}), cls.TRAIN_KEYS)
        cfg.pretrain = _dataclass("train.pretrain", PretrainConfig, train.get("pretrain", {}))
        cfg.finetune = _dataclass("train.finetune", FinetuneConfig, train.get("finetune", {}))
        if "fractions" in train:
            fr = train["fractions"]
            if not isinstance(fr, list) or not all(isinstance(f, (int, float)) and 0 <= f <= 1 for f in fr):
                raise ConfigError("train.fractions: expected numbers in [0, 1]")
            cfg.fractions = [float(f) for f in fr]

        seeds = doc.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise ConfigError("seeds: expected a non-empty list of non-negative integers")
        cfg.seeds = seeds
        return cfg

    def to_dict(self) -> dict:
        return {
            "model": {**self.model.to_dict(), "ladder": {k: v.to_dict() for k, v in self.ladder.items()}},
            "data": {"synthetic": self.synthetic, "corpus": self.corpus, "tasks": self.tasks, "encoder": self.encoder,
                     "graphs": self.graphs, "finetune_run": self.finetune_run, "split": self.split},
            "train": {"pretrain": asdict(self.pretrain), "finetune": asdict(self.finetune), "fractions": self.fractions},
            "seeds": self.seeds,
        }


def load_config(path: str | None, seed: int | None) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = RunConfig.from_dict(doc)
    if seed is not None:
        cfg.seeds = [seed]
    return cfg


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _need_out(args) -> Path:
    if args.out is None:
        raise ConfigError(f"{args.command} needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _lock(stack: ExitStack, out: Path) -> None:
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RunDirBusy(f"run directory {out} is locked by another process") from None
    stack.callback(lock.release)


class RunDirBusy(RuntimeError):
    pass


def _datasets(paths: Sequence[str], what: str):
    if not paths:
        raise ConfigError(f"data.{what} lists no datasets")
    return [read_dataset(p) for p in paths]


def _encoder(cfg: RunConfig, seed: int) -> EteModel:
    if cfg.encoder is None:
        return EteModel(cfg.model, seed=seed)
    return load_encoder(cfg.encoder)[0]


# -- commands --------------------------------------------------------------------

def cmd_gen_synthetic(args, cfg: RunConfig) -> int:
    if cfg.synthetic is None:
        raise ConfigError("gen-synthetic needs a data.synthetic section")
    spec = dict(cfg.synthetic)
    if args.seed is not None or "seed" not in spec:
        spec["seed"] = cfg.seeds[0]
    spec = SyntheticSpec(**spec)
    out = _need_out(args)
    with ExitStack() as stack:
        _lock(stack, out)
        ds = generate_synthetic(spec)
        write_dataset(ds, out)
        cfg.synthetic = spec.to_dict()
        _write_json(cfg.to_dict(), out / SNAPSHOT)
    print(_dataset_summary(out))
    return EXIT_OK


def _dataset_summary(path: Path) -> str:
    m = read_manifest(path)
    lines = [f"dataset {m['name']} at {path}",
             f"  samples x electrodes x tokens x width: {' x '.join(str(s) for s in [m['num_samples'], *m['shape']])}",
             f"  sample rate: {m['sample_rate']} Hz",
             f"  electrodes: {', '.join(m['electrode_names'])}"]
    if m.get("num_classes") is not None:
        lines.append(f"  task {m.get('task_id')}: {m['num_classes']} classes")
    return "\n".join(lines)


def cmd_inspect(args, cfg: RunConfig) -> int:
    path = Path(args.path)
    if (path / "manifest.json").is_file():
        print(_dataset_summary(path))
        ds = read_dataset(path)
        if ds.labels is not None:
            counts = np.bincount(ds.labels, minlength=ds.num_classes)
            print(f"  class counts: {counts.tolist()}")
        return EXIT_OK
    if (path / "index.json").is_file():
        arrays, config = load_arrays(path)
        print(f"{config.get('kind', '?')} checkpoint at {path}")
        print(f"  tensors: {len(arrays)}, parameters: {sum(a.size for a in arrays.values())}")
        if "tasks" in config:
            print(f"  tasks: {config['tasks']}")
        for name in sorted(arrays):
            print(f"  {name:<40} {tuple(arrays[name].shape)}")
        return EXIT_OK
    raise DataError(f"{path} is neither a dataset nor a checkpoint")


def _corpus(cfg: RunConfig, seed: int):
    if cfg.corpus:
        return reorganize(_datasets(cfg.corpus, "corpus"))
    if cfg.synthetic is None:
        raise ConfigError("pretraining needs data.corpus or data.synthetic")
    spec = dict(cfg.synthetic)
    spec.setdefault("seed", seed)
    return reorganize(generate_synthetic(SyntheticSpec(**spec)))


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = _need_out(args)
    with ExitStack() as stack:
        _lock(stack, out)
        _write_json(cfg.to_dict(), out / SNAPSHOT)
        for seed in cfg.seeds:
            run_dir = out / f"seed-{seed}"
            ete = EteModel(cfg.model, seed=seed, causal=cfg.pretrain.objective == "ar")
            vocab = ElectrodeVocabulary(cfg.model.token_width, np.random.default_rng([seed, 7]), cfg.model.init_std)
            run = pretrain(_corpus(cfg, seed), ete, vocab, cfg.pretrain, seed=seed, run_dir=run_dir)
            _write_json(run.summary, run_dir / "summary.json")
            s = run.summary
            print(f"seed {seed}: held-out {cfg.pretrain.metric} loss {s['initial_heldout']:.4f} -> "
                  f"{s['final_heldout']:.4f} after {s['steps']} steps; checkpoint {run_dir / 'checkpoints' / 'final'}")
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    out = _need_out(args)
    datasets = _datasets(cfg.tasks, "tasks")
    with ExitStack() as stack:
        _lock(stack, out)
        _write_json(cfg.to_dict(), out / SNAPSHOT)
        for seed in cfg.seeds:
            run_dir = out / f"seed-{seed}"
            run = finetune(datasets, _encoder(cfg, seed), cfg.finetune, seed=seed, run_dir=run_dir)
            _write_json(run.summary, run_dir / "summary.json")
            accs = ", ".join(f"{t} val {a['val']:.3f} test {a['test']:.3f}" for t, a in run.summary["accuracy"].items())
            print(f"seed {seed} ({cfg.finetune.mode}): {accs}")
    return EXIT_OK


def _graph_sets(cfg: RunConfig) -> list[list[Path]]:
    """One list of graph checkpoints per seed."""
    if cfg.graphs:
        return [[Path(g)] for g in cfg.graphs]
    if cfg.finetune_run is None:
        raise ConfigError("eval needs data.graphs or data.finetune_run")
    root = Path(cfg.finetune_run)
    seeds = sorted(p for p in root.glob("seed-*") if p.is_dir())
    if not seeds:
        raise DataError(f"no seed-* run directories under {root}")
    return [sorted(p.parent for p in s.rglob("index.json") if p.parent.name == "teg") for s in seeds]


def cmd_eval(args, cfg: RunConfig) -> int:
    splits = prepare_tasks(_datasets(cfg.tasks, "tasks"), cfg.finetune.split_seed)
    per_task: dict[str, list[float]] = {t.task_id: [] for t in splits}
    shared = load_encoder(cfg.encoder)[0] if cfg.encoder is not None else None
    for k, graph_paths in enumerate(_graph_sets(cfg)):
        ete = shared or EteModel(cfg.model, seed=cfg.seeds[min(k, len(cfg.seeds) - 1)])
        graphs = [load_graph(p)[0] for p in graph_paths]
        for t in splits:
            owner = next((g for g in graphs if t.task_id in g.tasks), None)
            if owner is None:
                raise TaskError(f"no graph checkpoint among {[str(p) for p in graph_paths]} has a head for {t.task_id!r}")
            per_task[t.task_id].append(evaluate((ete, owner), t, cfg.split)["accuracy"])
    report = {}
    for task, vals in per_task.items():
        m, sd = mean_std(vals)
        report[task] = {"mean": m, "std": sd, "values": vals}
        print(f"{task} {cfg.split} accuracy: {m:.4f} ± {sd:.4f} over {len(vals)} seed(s)")
    if args.out is not None:
        out = _need_out(args)
        _write_json({"split": cfg.split, "accuracy": report}, out / "eval.json")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    reports = gradsuite.run_scope(args.scope, seed=cfg.seeds[0])
    print(gradsuite.format_table(reports))
    group, name, err = gradsuite.worst_offender(reports)
    if err >= gradsuite.TOLERANCE:
        print(f"FAIL: worst offender {group} {name} with relative error {err:.3e} "
              f"(tolerance {gradsuite.TOLERANCE:g})", file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"all {sum(len(r.errors) for r in reports.values())} checks below {gradsuite.TOLERANCE:g} "
          f"(worst {err:.3e} at {group} {name})")
    return EXIT_OK


def cmd_scaling(args, cfg: RunConfig) -> int:
    if len(cfg.ladder) < 3:
        raise ConfigError("scaling needs model.ladder with at least three configs")
    if len(cfg.fractions) < 3:
        raise ConfigError("scaling needs at least three train.fractions")
    out = _need_out(args)
    datasets = _datasets(cfg.tasks, "tasks")
    with ExitStack() as stack:
        _lock(stack, out)
        _write_json(cfg.to_dict(), out / SNAPSHOT)
        res = scaling_harness(cfg.ladder, _corpus(cfg, cfg.seeds[0]), datasets, cfg.pretrain, cfg.finetune,
                              cfg.seeds, cfg.fractions)
        (out / "scaling.csv").write_text(res["csv"], encoding="utf-8")
        (out / "scaling.dat").write_text(gnuplot_blocks(res["rows"]), encoding="utf-8")
    for name, model in cfg.ladder.items():
        print(f"{name}: {count_parameters(model)} parameters")
    print(res["csv"], end="")
    return EXIT_OK


COMMANDS = {
    "gen-synthetic": (cmd_gen_synthetic, "generate a seeded synthetic EEGB dataset"),
    "pretrain": (cmd_pretrain, "self-supervised encoder pretraining, one run per seed"),
    "finetune": (cmd_finetune, "train the electrode graph on a frozen encoder"),
    "eval": (cmd_eval, "per-task accuracy as mean ± std over seeds"),
    "gradcheck": (cmd_gradcheck, "finite-difference audit of all gradients"),
    "scaling": (cmd_scaling, "model-size by token-budget grid, CSV and gnuplot output"),
    "inspect": (cmd_inspect, "summarise a dataset or checkpoint directory"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (sections: model, data, train, seeds)")
    common.add_argument("--seed", type=int, help="override the config's seed list with this single seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=None, help=f"thread cap for numeric libraries (default: ${THREADS_ENV})")
    parser = argparse.ArgumentParser(prog="eegar", description="Electrode-wise EEG pretraining and graph fine-tuning.",
                                     epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text, epilog=EPILOG,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "gradcheck":
            p.add_argument("--scope", choices=gradsuite.SCOPES, default="all")
        if name == "inspect":
            p.add_argument("path", help="dataset or checkpoint directory")
    return parser


def _threads(arg: int | None) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get(THREADS_ENV)
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from None


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    fn, _ = COMMANDS[args.command]
    try:
        threads = _threads(args.threads)
        if threads is not None and threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = load_config(args.config, args.seed)
        with threadpool_limits(limits=threads):
            return fn(args, cfg)
    except (ConfigError, ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, VocabularyError, TaskError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, NonFiniteError) as exc:
        where = getattr(exc, "last_checkpoint", None)
        print(f"diverged: {exc}" + (f"; last good checkpoint {where}" if where else ""), file=sys.stderr)
        return EXIT_DIVERGED
    except RunDirBusy as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_BUSY


if __name__ == "__main__":
    sys.exit(main())
