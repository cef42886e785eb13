import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eegar import numkit as nk
from eegar.checkpoint import CheckpointError, load_encoder, load_graph, save_encoder, save_graph
from eegar.dataio import DataError, Dataset, VocabularyError
from eegar.ete import PRESETS, EteModel
from eegar.numkit import NonFiniteError, Tensor
from eegar.teg import SubgraphActivation, TegModel, activate, batch_forward, graph_layers, pool_and_classify
from eegar.tokenizer import ElectrodeVocabulary
from eegar.train import (
    DivergenceError,
    FinetuneConfig,
    OptimState,
    PretrainConfig,
    Schedule,
    accuracy_report,
    adamw_step,
    batch_indices,
    finetune,
    gnuplot_blocks,
    matched_budgets,
    mean_std,
    multi_seed,
    overlapping_tasks,
    param_checksum,
    plan_joint_batches,
    pretrain,
    pretraining_corpus,
    scaling_harness,
)

TINY = PRESETS["tiny"]


# -- optimizer ------------------------------------------------------------------

def _scalar(v):
    return {"p": Tensor(np.array([v]), requires_grad=True)}


def test_zero_gradient_without_decay_leaves_parameters():
    params = {"w": Tensor(np.arange(4.0), requires_grad=True)}
    st_ = OptimState.for_params(params, lr=0.1, weight_decay=0.0)
    adamw_step(params, {"w": np.zeros(4)}, st_)
    np.testing.assert_array_equal(params["w"].data, np.arange(4.0))


def test_first_step_matches_hand_computation():
    params = _scalar(1.0)
    st_ = OptimState.for_params(params, lr=0.1, weight_decay=0.0)
    adamw_step(params, {"p": np.array([1.0])}, st_)
    # m = 0.1, v = 0.001; bias-corrected both equal 1
    assert abs(params["p"].data[0] - (1.0 - 0.1 * 1.0 / (1.0 + 1e-8))) < 1e-15
    # second step with g = -1: m = 0.09 - 0.1 = -0.01, v = 0.000999 + 0.001
    adamw_step(params, {"p": np.array([-1.0])}, st_)
    m_hat = -0.01 / (1 - 0.9 ** 2)
    v_hat = (0.999 * 0.001 + 0.001) / (1 - 0.999 ** 2)
    expected = (1.0 - 0.1 / (1 + 1e-8)) - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert abs(params["p"].data[0] - expected) < 1e-15


def test_decay_alone_is_multiplicative():
    params = _scalar(3.0)
    st_ = OptimState.for_params(params, lr=0.5, weight_decay=0.1)
    adamw_step(params, {"p": np.array([0.0])}, st_)
    assert params["p"].data[0] == 3.0 * (1 - 0.5 * 0.1)


def test_non_finite_gradient_names_the_parameter():
    params = {"layer.weight": Tensor(np.ones(2), requires_grad=True)}
    st_ = OptimState.for_params(params)
    with pytest.raises(NonFiniteError, match="layer.weight"):
        adamw_step(params, {"layer.weight": np.array([1.0, np.nan])}, st_)


def test_schedule_examples():
    s = Schedule(1.0, 100, 0.1)
    assert s.lr(0) == 0.0 and s.lr(10) == 1.0 and s.lr(100) == 0.0
    assert s.lr(5) == 0.5
    assert abs(s.lr(55) - 0.5) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 500), st.floats(0.0, 0.5), st.floats(1e-5, 1.0))
def test_schedule_rises_then_never_increases(total, ratio, base):
    s = Schedule(base, total, ratio)
    lrs = [s.lr(k) for k in range(total + 1)]
    w = s.warmup_steps
    assert all(x >= 0 for x in lrs) and max(lrs) <= base * (1 + 1e-12)
    assert all(b >= a for a, b in zip(lrs[:w], lrs[1:w + 1]))
    assert all(b <= a + 1e-15 for a, b in zip(lrs[max(w, 1):], lrs[max(w, 1) + 1:]))
    if 0 < w < total:
        assert lrs[w] == base


# -- pretraining ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_corpus():
    return pretraining_corpus(3, electrodes=6, samples=12)


def _fresh(seed=0, causal=True):
    return EteModel(TINY, seed, causal=causal), ElectrodeVocabulary(TINY.token_width, np.random.default_rng(seed))


def test_batches_are_a_pure_function_of_step():
    a = [batch_indices(10, 4, s, 7) for s in range(1, 8)]
    b = [batch_indices(10, 4, s, 7) for s in range(1, 8)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    flat = np.concatenate(a[:5])[:10]
    assert sorted(flat) == list(range(10))  # first epoch covers every row once


def test_zero_learning_rate_leaves_parameters_bitwise(small_corpus):
    ete, vocab = _fresh()
    before = param_checksum({**ete.params, **vocab.named_parameters()})
    pretrain(small_corpus, ete, vocab, PretrainConfig(steps=5, lr=0.0, batch_size=4, eval_every=5), seed=1)
    assert param_checksum({**ete.params, **vocab.named_parameters()}) == before


def test_pretraining_is_deterministic_and_resumable(small_corpus, tmp_path):
    cfg = PretrainConfig(steps=12, batch_size=4, eval_every=4, log_every=2, checkpoint_every=6)
    ete, vocab = _fresh()
    pretrain(small_corpus, ete, vocab, cfg, seed=2, run_dir=tmp_path / "a")
    ete2, vocab2 = _fresh()
    pretrain(small_corpus, ete2, vocab2, cfg, seed=2, run_dir=tmp_path / "b")
    for f in ("metrics.jsonl", "metrics.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    # interrupted run resumed from the step-6 checkpoint continues identically
    ete3, vocab3 = _fresh()
    pretrain(small_corpus, ete3, vocab3, cfg, seed=2, run_dir=tmp_path / "a",
             resume_from=tmp_path / "a" / "checkpoints" / "step_000006")
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert param_checksum(ete3.params) == param_checksum(ete2.params)


def test_masked_objective_trains_bidirectional_encoder(small_corpus):
    ete, vocab = _fresh(causal=False)
    run = pretrain(small_corpus, ete, vocab, PretrainConfig(steps=4, batch_size=4, objective="mae"), seed=0)
    assert run.summary["final_heldout"] > 0
    with pytest.raises(ValueError):
        pretrain(small_corpus, *_fresh(causal=True), PretrainConfig(steps=1, objective="mae"))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported_with_last_checkpoint(small_corpus, tmp_path):
    ete, vocab = _fresh()
    cfg = PretrainConfig(steps=40, batch_size=4, lr=1e200, warmup_ratio=0.0, checkpoint_every=1)
    with pytest.raises(DivergenceError) as info:
        pretrain(small_corpus, ete, vocab, cfg, seed=0, run_dir=tmp_path)
    assert info.value.last_checkpoint is None or info.value.last_checkpoint.exists()


# -- fine-tuning ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def two_tasks():
    return overlapping_tasks(5, samples=40)


def test_joint_plan_is_proportional_and_budgets_match():
    plan = plan_joint_batches([30, 10], 40, 8, seed=1)
    counts = np.bincount(np.concatenate(plan)[:, 0], minlength=2)
    assert counts.sum() == 320 and counts[0] == 240 and counts[1] == 80
    assert matched_budgets(plan, 2, 8) == [30, 10]


def test_finetune_keeps_encoder_frozen_and_trains_special_token(two_tasks):
    ete = EteModel(TINY, 0)
    before = param_checksum(ete.params)
    run = finetune(two_tasks, ete, FinetuneConfig(steps=6, batch_size=4, eval_every=3), seed=0)
    assert param_checksum(ete.params) == before
    teg = run.models["task_a"]
    assert not np.array_equal(teg.special.data, TegModel(TINY, {"task_a": 2, "task_b": 3}, seed=0).special.data)
    assert all(t.requires_grad for t in ete.params.values())


def test_separate_mode_uses_matched_budgets(two_tasks, tmp_path):
    ete = EteModel(TINY, 0)
    run = finetune(two_tasks, ete, FinetuneConfig(mode="separate", steps=8, batch_size=4, log_every=1),
                   seed=0, run_dir=tmp_path)
    budgets = run.summary["budgets"]
    assert sum(budgets.values()) == 8
    for task, log in run.logs.items():
        assert log.rows[-1]["step"] == budgets[task]
    assert (tmp_path / "task_a" / "teg" / "params.bin").exists()
    assert run.models["task_a"] is not run.models["task_b"]


def test_finetune_is_deterministic(two_tasks):
    ete = EteModel(TINY, 1)
    a = finetune(two_tasks, ete, FinetuneConfig(steps=5, batch_size=4), seed=3)
    b = finetune(two_tasks, ete, FinetuneConfig(steps=5, batch_size=4), seed=3)
    assert a.metrics.rows == b.metrics.rows
    assert param_checksum(a.models["task_a"].params) == param_checksum(b.models["task_a"].params)


def test_mixed_batch_logits_equal_solo_logits_after_training(two_tasks):
    ete = EteModel(TINY, 0)
    run = finetune(two_tasks, ete, FinetuneConfig(steps=3, batch_size=4), seed=0)
    teg = run.models["task_a"]
    rng = np.random.default_rng(0)
    items = []
    for ds in two_tasks:
        act = SubgraphActivation.from_names(ds.electrode_names)
        for _ in range(2):
            items.append((Tensor(rng.standard_normal((8, TINY.hidden))), act, ds.task_id))
    for (z, act, task), got in zip(items, batch_forward(teg, items)):
        solo = pool_and_classify(teg, graph_layers(teg, activate(teg, z, act), act), act, task)
        np.testing.assert_allclose(got.data, solo.data, rtol=0, atol=1e-12)
    full = batch_forward(teg, items, full_graph=True)
    for a, b in zip(batch_forward(teg, items), full):
        np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-12)


def test_finetune_input_errors(two_tasks):
    ete = EteModel(TINY, 0)
    unlabeled = Dataset("u", 256, ("FZ",), np.zeros((10, 1, 25, 32)))
    with pytest.raises(DataError):
        finetune([unlabeled], ete, FinetuneConfig(steps=1))
    too_few = Dataset("s", 256, ("FZ",), np.zeros((2, 1, 25, 32)), labels=[0, 1], num_classes=2, task_id="s",
                      subject_ids=["a", "b"])
    with pytest.raises(DataError):
        finetune([too_few], ete, FinetuneConfig(steps=1))
    with pytest.raises(VocabularyError):
        Dataset("v", 256, ("FZ", "NOPE"), np.zeros((2, 2, 25, 32)))
    with pytest.raises(ValueError):
        FinetuneConfig(mode="both")


# -- evaluation ------------------------------------------------------------------------

def test_accuracy_of_perfect_and_chance_predictors():
    labels = np.repeat(np.arange(4), 500)
    assert accuracy_report(labels, labels, 4)["accuracy"] == 1.0
    preds = np.random.default_rng(0).integers(0, 4, len(labels))
    acc = accuracy_report(preds, labels, 4)["accuracy"]
    assert abs(acc - 0.25) < 4 * math.sqrt(0.25 * 0.75 / len(labels))
    with pytest.raises(DataError):
        accuracy_report(np.array([], dtype=int), np.array([], dtype=int), 2)


def test_mean_std_and_multi_seed():
    assert mean_std([1.0]) == (1.0, 0.0)
    m, s = mean_std([1.0, 2.0, 3.0])
    assert m == 2.0 and abs(s - 1.0) < 1e-15
    out = multi_seed(lambda seed: {"acc": seed / 10}, [1, 2, 3, 4, 5])
    assert abs(out["acc"]["mean"] - 0.3) < 1e-15 and len(out["acc"]["values"]) == 5


# -- scaling harness -----------------------------------------------------------------

def test_scaling_grid_rows_and_reproducibility(two_tasks):
    ladder = {
        "s": TINY.with_(layers=1, hidden=16, heads=2, head_size=8, intermediate=32),
        "m": TINY,
        "l": TINY.with_(layers=3),
    }
    corpus = pretraining_corpus(2, electrodes=4, samples=8)
    args = (ladder, corpus, two_tasks, PretrainConfig(steps=4, batch_size=4), FinetuneConfig(steps=2, batch_size=4), [0])
    a = scaling_harness(*args, fractions=(0.0, 0.5, 1.0))
    b = scaling_harness(*args, fractions=(0.0, 0.5, 1.0))
    assert len(a["rows"]) == 9
    assert a["csv"] == b["csv"]
    zero = [r for r in a["rows"] if r[2] == 0.0]
    assert len(zero) == 3 and all(r[3] == 0 for r in zero)
    assert gnuplot_blocks(a["rows"]).count("# ") == 4
    with pytest.raises(ValueError):
        scaling_harness({"s": TINY}, *args[1:])


# -- checkpoints ----------------------------------------------------------------------------

def test_checkpoint_round_trips(tmp_path):
    ete, vocab = _fresh(4, causal=False)
    save_encoder(tmp_path / "e", ete, vocab)
    back, vback, cfg = load_encoder(tmp_path / "e")
    assert not back.causal and back.config == ete.config
    assert param_checksum(back.params) == param_checksum(ete.params)
    np.testing.assert_array_equal(vback.embeddings.data, vocab.embeddings.data)
    save_encoder(tmp_path / "f", back, vback)
    assert (tmp_path / "e" / "params.bin").read_bytes() == (tmp_path / "f" / "params.bin").read_bytes()

    teg = TegModel(TINY, {"x": 2, "y": 4}, seed=3)
    save_graph(tmp_path / "g", teg)
    tback, _ = load_graph(tmp_path / "g")
    assert tback.tasks == {"x": 2, "y": 4}
    assert param_checksum(tback.params) == param_checksum(teg.params)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError, match="missing"):
        load_encoder(tmp_path / "none")
    ete, vocab = _fresh()
    p = save_encoder(tmp_path / "e", ete, vocab)
    blob = (p / "params.bin").read_bytes()
    (p / "params.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError, match="expected"):
        load_encoder(p)
    save_graph(tmp_path / "g", TegModel(TINY, {"x": 2}))
    with pytest.raises(CheckpointError, match="not an encoder"):
        load_encoder(tmp_path / "g")
