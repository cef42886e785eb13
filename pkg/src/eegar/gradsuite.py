"""Finite-difference audit of every differentiable piece, grouped for reporting.

Each check returns one ``GradcheckReport`` per group; a group's errors are keyed
by parameter name.  Model checks use the Tiny shapes with a wider init so the
nonlinearities are exercised away from their linear regime.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import numkit as nk
from .ete import METRICS, PRESETS, EteConfig, EteModel, ar_loss, mae_loss
from .numkit import GradcheckReport, Tensor
from .teg import SubgraphActivation, TegModel, batch_forward, encode_samples
from .tokenizer import ElectrodeVocabulary, assemble_pretrain_batch

SCOPES = ("numkit", "ete", "teg", "all")
TOLERANCE = 1e-5
EPS = 1e-6

PRIMITIVES: dict[str, Callable[[Tensor, Tensor], Tensor]] = {
    "add": lambda a, b: nk.add(a, b),
    "sub": lambda a, b: nk.sub(a, b),
    "mul": lambda a, b: nk.mul(a, b),
    "div": lambda a, b: nk.div(a, nk.exp(b)),
    "matmul": lambda a, b: nk.matmul(a, nk.transpose(b)),
    "softmax": lambda a, b: nk.softmax_lastdim(a * b),
    "masked_softmax": lambda a, b: nk.softmax_lastdim(a * b, Tensor(np.triu(np.full(a.shape, nk.NEG_INF), 1))),
    "log_softmax": lambda a, b: nk.log_softmax_lastdim(a + b),
    "rms_norm": lambda a, b: nk.rms_norm(a, b[0]),
    "silu": lambda a, b: nk.silu(a) * b,
    "leaky_relu": lambda a, b: nk.leaky_relu(a + b),
    "relu": lambda a, b: nk.relu(a * b),
    "abs": lambda a, b: nk.abs(a) * b,
    "exp_log": lambda a, b: nk.log(nk.exp(a) + nk.exp(b)),
    "sqrt_power": lambda a, b: nk.sqrt(a * a + 1.0) + b ** 3,
    "mean_sum": lambda a, b: nk.mean(a, axis=0) + nk.sum(b, axis=0),
    "reshape_transpose": lambda a, b: nk.reshape(nk.transpose(a), (-1,)) * nk.reshape(nk.transpose(b), (-1,)),
    "swapaxes": lambda a, b: nk.swapaxes(a, 0, 1) - nk.swapaxes(b, 0, 1),
    "getitem": lambda a, b: a[1:, ::2] * b[:-1, ::2],
    "take_rows": lambda a, b: nk.take_rows(a, [0, 2, 0]) * nk.take_rows(b, [1, 1, 2]),
    "concat_stack": lambda a, b: nk.concat([a, nk.stack([b[0], b[1]])], axis=0),
    "broadcast": lambda a, b: nk.broadcast_to(a[:1], a.shape) * b,
    "cross_entropy": lambda a, b: nk.cross_entropy(a * b, [0, 2, 1]),
    "scatter_rows": lambda a, b: nk.scatter_rows(a * b, [0, 4, 2], 6),
}


def check_numkit(seed: int = 0) -> dict[str, GradcheckReport]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, fn in PRIMITIVES.items():
        a = Tensor(rng.standard_normal((3, 3)) + 0.05, name="a")
        b = Tensor(rng.uniform(0.5, 1.5, (3, 3)), name="b")
        out[f"numkit/{name}"] = nk.gradcheck(fn, [a, b], eps=EPS, tolerance=TOLERANCE)
    return out


def _audit_config(config: EteConfig) -> EteConfig:
    return config.with_(init_std=0.2)


def check_ete(config: EteConfig = PRESETS["tiny"], seed: int = 0, per_input: int = 20,
              seq_len: int = 8) -> dict[str, GradcheckReport]:
    """AR and MAE losses under every distance metric, over encoder and vocabulary parameters."""
    config = _audit_config(config)
    rng = np.random.default_rng([seed, 1])
    blocks = rng.standard_normal((2, seq_len, config.token_width))
    ids = np.array([3, 40])
    positions = np.array([[1, 4, 6], [2, 3, 8]])
    out = {}
    for objective in ("ar", "mae"):
        model = EteModel(config, seed=seed, causal=objective == "ar")
        vocab = ElectrodeVocabulary(config.token_width, np.random.default_rng([seed, 2]), config.init_std)
        inputs = list(model.params.values()) + [vocab.embeddings]
        for metric in METRICS:
            def loss(*_):
                seq = assemble_pretrain_batch(blocks, ids, vocab)
                if objective == "ar":
                    return ar_loss(model, seq, metric)
                return mae_loss(model, seq, metric=metric, positions=positions)

            out[f"ete/{objective}/{metric}"] = nk.gradcheck(
                loss, inputs, eps=EPS, tolerance=TOLERANCE, names=[t.name for t in inputs],
                max_per_input=per_input, seed=seed)
    return out


def check_teg(config: EteConfig = PRESETS["tiny"], seed: int = 0, per_input: int = 20,
              seq_len: int = 6) -> dict[str, GradcheckReport]:
    """Cross-entropy through a mixed two-task batch, over every graph parameter (frozen encoder)."""
    config = _audit_config(config)
    ete = EteModel(config, seed=seed)
    for t in ete.params.values():
        t.requires_grad = False
    teg = TegModel(config, {"a": 2, "b": 3}, seed=seed)
    rng = np.random.default_rng([seed, 3])
    tokens = [rng.standard_normal((3, seq_len, config.token_width)), rng.standard_normal((2, seq_len, config.token_width))]
    acts = [SubgraphActivation((0, 7, 21)), SubgraphActivation((7, 64))]

    def loss(*_):
        zs = encode_samples(ete, teg, tokens)
        logits = batch_forward(teg, [(zs[0], acts[0], "a"), (zs[1], acts[1], "b")])
        return (nk.cross_entropy(nk.reshape(logits[0], (1, -1)), [1])
                + nk.cross_entropy(nk.reshape(logits[1], (1, -1)), [2]))

    inputs = list(teg.params.values())
    # the node table is mostly inactive rows; probe the active ones plus a few that must stay at zero
    width = teg.params["teg.nodes"].shape[1]
    node_rows = np.random.default_rng([seed, 4]).choice(width, size=(5, per_input // 2))
    nodes = np.concatenate([r * width + node_rows[i] for i, r in enumerate((0, 7, 21, 64, 100))])
    return {"teg": nk.gradcheck(loss, inputs, eps=EPS, tolerance=TOLERANCE, names=[t.name for t in inputs],
                                max_per_input=per_input, seed=seed, entries={"teg.nodes": nodes})}


def run_scope(scope: str, seed: int = 0) -> dict[str, GradcheckReport]:
    if scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; expected one of {SCOPES}")
    reports: dict[str, GradcheckReport] = {}
    if scope in ("numkit", "all"):
        reports.update(check_numkit(seed))
    if scope in ("ete", "all"):
        reports.update(check_ete(seed=seed))
    if scope in ("teg", "all"):
        reports.update(check_teg(seed=seed))
    return reports


def worst_offender(reports: dict[str, GradcheckReport]) -> tuple[str, str, float]:
    group = max(reports, key=lambda g: reports[g].max_error)
    rep = reports[group]
    return group, rep.worst or "-", rep.max_error


def format_table(reports: dict[str, GradcheckReport]) -> str:
    """One row per (check, parameter) with its max relative error."""
    lines = [f"{'check':<24} {'parameter':<34} {'max rel err':>12}  status"]
    for group, rep in reports.items():
        for name, err in rep.errors.items():
            lines.append(f"{group:<24} {name:<34} {err:>12.3e}  {'ok' if err < rep.tolerance else 'FAIL'}")
    return "\n".join(lines)
