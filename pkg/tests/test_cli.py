import json

import numpy as np
import pytest
from filelock import FileLock

from eegar import gradsuite
from eegar.checkpoint import save_encoder, save_graph
from eegar.cli import EXIT_BUSY, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_GRADCHECK, EXIT_OK, RunConfig, main
from eegar.dataio import Dataset, write_dataset
from eegar.ete import PRESETS, EteModel
from eegar.numkit.tensor import _record
from eegar.teg import TegModel

TINY = PRESETS["tiny"]


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def synthetic_doc(**kw):
    spec = {"electrodes": ["FZ", "CZ", "PZ"], "num_samples": 40, "window_s": 0.5, "token_len": 32,
            "task_rule": "rhythm_window", "num_classes": 2, "task_id": "t1", "name": "t1"}
    spec.update(kw)
    return {"data": {"synthetic": spec}, "seeds": [4]}


@pytest.fixture(scope="module")
def task_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "gen.json", synthetic_doc())
    assert main(["gen-synthetic", "--config", cfg, "--out", str(root / "t1")]) == EXIT_OK
    return root / "t1"


def test_gen_synthetic_is_inspectable_and_deterministic(task_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "gen.json", synthetic_doc())
    assert main(["gen-synthetic", "--config", cfg, "--out", str(tmp_path / "again")]) == EXIT_OK
    assert (tmp_path / "again" / "data.bin").read_bytes() == (task_dir / "data.bin").read_bytes()
    assert main(["inspect", str(task_dir)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "40 x 3 x 25 x 32" in out and "class counts" in out
    snapshot = json.loads((task_dir / "run_config.json").read_text())
    assert snapshot["data"]["synthetic"]["seed"] == 4


def test_seed_flag_overrides_config(task_dir, tmp_path):
    cfg = write_config(tmp_path / "gen.json", synthetic_doc())
    assert main(["gen-synthetic", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "s5")]) == EXIT_OK
    assert (tmp_path / "s5" / "data.bin").read_bytes() != (task_dir / "data.bin").read_bytes()


def test_non_stationary_spec_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json", synthetic_doc(coefficients={"FZ": [1.0, 0.5]}))
    assert main(["gen-synthetic", "--config", cfg, "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "non-stationary coefficients" in capsys.readouterr().err


@pytest.mark.parametrize("doc, needle", [
    ({"modle": {}}, "unknown keys ['modle']"),
    ({"model": {"preset": "tiny", "hiden": 3}}, "unknown keys ['hiden']"),
    ({"train": {"pretrain": {"stpes": 3}}}, "unknown keys ['stpes']"),
    ({"data": {"synthetic": {"seed": 1, "electrodes": ["FZ"], "num_samples": 2, "colour": 1}}}, "colour"),
    ({"model": {"preset": "huge2"}}, "unknown preset"),
    ({"seeds": [-1]}, "seeds"),
    ({"train": {"finetune": {"mode": "both"}}}, "mode must be"),
])
def test_strict_schema_rejects_bad_documents(tmp_path, capsys, doc, needle):
    cfg = write_config(tmp_path / "c.json", doc)
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert needle in capsys.readouterr().err


def test_resolved_config_round_trips():
    cfg = RunConfig.from_dict({"model": {"preset": "tiny", "ladder": {"a": {"preset": "micro"}}},
                               "train": {"pretrain": {"steps": 7}}, "seeds": [1, 2]})
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    assert again.pretrain.steps == 7 and again.ladder["a"] == PRESETS["micro"]


def test_missing_checkpoint_exits_3_and_names_path(task_dir, tmp_path, capsys):
    missing = tmp_path / "nowhere" / "final"
    cfg = write_config(tmp_path / "e.json", {"data": {"tasks": [str(task_dir)], "encoder": str(missing),
                                                       "graphs": [str(tmp_path / "g")]}})
    assert main(["eval", "--config", cfg]) == EXIT_DATA
    assert str(missing) in capsys.readouterr().err


def test_eval_on_always_correct_checkpoint_reports_one(tmp_path, capsys):
    rng = np.random.default_rng(0)
    ds = Dataset("const", 256, ("FZ", "CZ"), rng.standard_normal((30, 2, 25, 32)), labels=np.zeros(30, dtype=int),
                 num_classes=2, task_id="const", subject_ids=[f"S{i % 10:03d}" for i in range(30)])
    write_dataset(ds, tmp_path / "const")
    save_encoder(tmp_path / "enc", EteModel(TINY, seed=0))
    teg = TegModel(TINY, {"const": 2}, seed=0)
    teg.params["teg.head.const.weight"].data[...] = 0.0
    teg.params["teg.head.const.bias"].data[...] = [5.0, 0.0]
    save_graph(tmp_path / "graph", teg)
    cfg = write_config(tmp_path / "e.json", {"data": {"tasks": [str(tmp_path / "const")], "encoder": str(tmp_path / "enc"),
                                                       "graphs": [str(tmp_path / "graph")] * 5}})
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "ev")]) == EXIT_OK
    assert "const test accuracy: 1.0000 ± 0.0000 over 5 seed(s)" in capsys.readouterr().out
    report = json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert report["accuracy"]["const"]["values"] == [1.0] * 5


def test_pretrain_finetune_eval_pipeline_is_byte_reproducible(task_dir, tmp_path, capsys):
    pre = write_config(tmp_path / "pre.json", {"data": {"corpus": [str(task_dir)]},
                                               "train": {"pretrain": {"steps": 12, "eval_every": 4, "log_every": 2}}})
    for name in ("a", "b"):
        assert main(["pretrain", "--config", pre, "--out", str(tmp_path / f"pre_{name}")]) == EXIT_OK
    for f in ("metrics.jsonl", "metrics.csv", "summary.json"):
        assert (tmp_path / "pre_a" / "seed-0" / f).read_bytes() == (tmp_path / "pre_b" / "seed-0" / f).read_bytes()
    enc = tmp_path / "pre_a" / "seed-0" / "checkpoints" / "final"
    ft_doc = {"data": {"tasks": [str(task_dir)], "encoder": str(enc), "finetune_run": str(tmp_path / "ft_a")},
              "train": {"finetune": {"steps": 6, "mode": "separate"}}, "seeds": [0, 1]}
    ft = write_config(tmp_path / "ft.json", ft_doc)
    for name in ("a", "b"):
        assert main(["finetune", "--config", ft, "--out", str(tmp_path / f"ft_{name}")]) == EXIT_OK
    for seed in (0, 1):
        for f in ("metrics.jsonl", "metrics.csv"):
            a = (tmp_path / "ft_a" / f"seed-{seed}" / "t1" / f).read_bytes()
            assert a == (tmp_path / "ft_b" / f"seed-{seed}" / "t1" / f).read_bytes()
    capsys.readouterr()
    assert main(["eval", "--config", ft]) == EXIT_OK
    assert "over 2 seed(s)" in capsys.readouterr().out


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_4(task_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "p.json", {"data": {"corpus": [str(task_dir)]},
                                             "train": {"pretrain": {"steps": 30, "lr": 1e200, "warmup_ratio": 0.0}}})
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err


def test_locked_run_directory_exits_5(task_dir, tmp_path):
    out = tmp_path / "busy"
    out.mkdir()
    cfg = write_config(tmp_path / "p.json", {"data": {"corpus": [str(task_dir)]}, "train": {"pretrain": {"steps": 1}}})
    with FileLock(str(out / ".lock")):
        assert main(["pretrain", "--config", cfg, "--out", str(out)]) == EXIT_BUSY
    assert main(["pretrain", "--config", cfg, "--out", str(out)]) == EXIT_OK


def test_thread_settings(monkeypatch, tmp_path):
    monkeypatch.setenv("EEGAR_THREADS", "many")
    assert main(["gradcheck", "--scope", "numkit"]) == EXIT_CONFIG
    monkeypatch.setenv("EEGAR_THREADS", "1")
    assert main(["gradcheck", "--scope", "numkit"]) == EXIT_OK
    assert main(["gradcheck", "--scope", "numkit", "--threads", "0"]) == EXIT_CONFIG


def test_gradcheck_passes_on_shipped_primitives(capsys):
    assert main(["gradcheck", "--scope", "numkit"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "numkit/softmax" in out and "FAIL" not in out


def test_gradcheck_negative_control_names_worst_offender(monkeypatch, capsys):
    def bad_square(a, b):
        d = a.data
        return _record(d * d, (a,), lambda g: (g * 2.0 * d * 1.01,), "bad_square") * b

    monkeypatch.setitem(gradsuite.PRIMITIVES, "bad_square", bad_square)
    assert main(["gradcheck", "--scope", "numkit"]) == EXIT_GRADCHECK
    captured = capsys.readouterr()
    assert "numkit/bad_square a" in captured.err
    assert "FAIL" in captured.out


def test_scaling_grid_rows_and_rerun_identity(task_dir, tmp_path):
    small = {"token_width": 32, "layers": 1, "heads": 1, "teg_layers": 1}
    doc = {
        "model": {"ladder": {"s": {**small, "hidden": 4, "head_size": 4, "intermediate": 8},
                             "m": {**small, "hidden": 8, "head_size": 8, "intermediate": 16},
                             "l": {**small, "hidden": 16, "head_size": 16, "intermediate": 32}}},
        "data": {"corpus": [str(task_dir)], "tasks": [str(task_dir)]},
        "train": {"pretrain": {"steps": 8, "eval_every": 4}, "finetune": {"steps": 3}, "fractions": [0, 0.5, 1]},
    }
    cfg = write_config(tmp_path / "s.json", doc)
    for name in ("a", "b"):
        assert main(["scaling", "--config", cfg, "--out", str(tmp_path / name)]) == EXIT_OK
    text = (tmp_path / "a" / "scaling.csv").read_text()
    assert text == (tmp_path / "b" / "scaling.csv").read_text()
    lines = text.splitlines()
    assert lines[0] == "config,parameters,fraction,tokens,seed,loss,accuracy"
    assert len(lines) == 1 + 9
    zero = [ln.split(",") for ln in lines[1:] if ln.split(",")[2] == "0.0"]
    assert len(zero) == 3 and all(r[3] == "0" for r in zero)
    dat = (tmp_path / "a" / "scaling.dat").read_text()
    assert dat.count("# s") == 1 and "\n\n\n# m" in dat


def test_scaling_needs_three_configs(tmp_path):
    cfg = write_config(tmp_path / "s.json", {"model": {"ladder": {"a": {"preset": "tiny"}}}})
    assert main(["scaling", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_help_documents_exit_codes(capsys):
    assert main(["--help"]) == EXIT_OK
    out = capsys.readouterr().out
    for code in ("0  success", "2  configuration error", "3  data error", "4  numeric divergence", "EEGAR_THREADS"):
        assert code in out
    assert main(["frobnicate"]) == EXIT_CONFIG
