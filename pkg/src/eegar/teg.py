"""Task-shared electrode graph over the 138-node vocabulary.

Each sample activates the subgraph of its own electrodes: node features are the
shared base table plus the sample's electrode representations on active rows.
Attention between nodes is restricted by the indicator mask beta (both ends
active), so samples from different tasks can share a batch without touching
each other.  Inactive rows pass through every layer unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numkit as nk
from .electrodes import VOCAB_SIZE, electrode_index
from .ete import EteConfig, EteModel
from .numkit import NEG_INF, ContractError, Tensor
from .tokenizer import assemble_finetune_batch

LEAKY_SLOPE = 0.2


class TaskError(KeyError):
    pass


@dataclass(frozen=True)
class SubgraphActivation:
    active_ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(int(i) for i in self.active_ids)
        if not ids:
            raise ContractError("empty activation")
        if len(set(ids)) != len(ids):
            raise ContractError(f"duplicate node ids in activation {ids}")
        if min(ids) < 0 or max(ids) >= VOCAB_SIZE:
            raise ContractError(f"node ids must lie in [0, {VOCAB_SIZE})")
        object.__setattr__(self, "active_ids", ids)

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "SubgraphActivation":
        return cls(tuple(electrode_index(n) for n in names))

    def indicator(self) -> np.ndarray:
        v = np.zeros(VOCAB_SIZE, dtype=bool)
        v[list(self.active_ids)] = True
        return v

    def beta(self) -> np.ndarray:
        """(N, N) 0/1 matrix: 1 iff both endpoints are active."""
        v = self.indicator()
        return (v[:, None] & v[None, :]).astype(np.float64)


class TegModel:
    def __init__(self, config: EteConfig, tasks: dict[str, int] | None = None, seed: int = 0):
        self.config = config
        self.tasks: dict[str, int] = {}
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        rng = self._rng
        d, inter, std = config.hidden, config.intermediate, config.init_std
        out_std = std / math.sqrt(2 * max(config.teg_layers, 1))

        def p(name, arr):
            self.params[name] = Tensor(arr, requires_grad=True, name=name)

        p("teg.nodes", rng.standard_normal((VOCAB_SIZE, d)) * std)
        for k in range(config.teg_layers):
            pre = f"teg.layers.{k}."
            p(pre + "attn_norm", np.ones(d))
            p(pre + "w", rng.standard_normal((d, d)) * std)
            p(pre + "a_src", rng.standard_normal((config.heads, config.head_size)) * std)
            p(pre + "a_dst", rng.standard_normal((config.heads, config.head_size)) * std)
            p(pre + "ffn_norm", np.ones(d))
            p(pre + "ffn.w1", rng.standard_normal((d, inter)) * std)
            p(pre + "ffn.w2", rng.standard_normal((inter, d)) * out_std)
        p("teg.final_norm", np.ones(d))
        p("teg.special", rng.standard_normal(config.token_width) * std)
        for task, k in (tasks or {}).items():
            self.register_task(task, k)

    def register_task(self, task_id: str, num_classes: int) -> None:
        if task_id in self.tasks:
            raise TaskError(f"task {task_id!r} already registered")
        if num_classes < 2:
            raise ValueError("a classification head needs at least two classes")
        d, std = self.config.hidden, self.config.init_std
        self.tasks[task_id] = int(num_classes)
        self.params[f"teg.head.{task_id}.weight"] = Tensor(
            self._rng.standard_normal((d, num_classes)) * std, requires_grad=True, name=f"teg.head.{task_id}.weight")
        self.params[f"teg.head.{task_id}.bias"] = Tensor(
            np.zeros(num_classes), requires_grad=True, name=f"teg.head.{task_id}.bias")

    @property
    def special(self) -> Tensor:
        return self.params["teg.special"]

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)


# -- stages -----------------------------------------------------------------

def extract_electrode_repr(ete: EteModel, assembled: Tensor) -> Tensor:
    """Hidden state at the final (summary-token) position of each stream: (..., T+1, C) -> (..., d)."""
    hidden, _ = ete.forward(assembled)
    return hidden[..., -1, :]


ALL_NODES = np.arange(VOCAB_SIZE)


def _indicators(activations: Sequence[SubgraphActivation], nodes: np.ndarray) -> np.ndarray:
    """(B, n) activity of the table rows ``nodes`` for each sample."""
    return np.stack([a.indicator()[nodes] for a in activations])


def _additive_mask(act: np.ndarray) -> np.ndarray:
    """(B, 1, n, n) additive mask from the beta matrix of each sample.

    Inactive rows keep only their self-loop so their (discarded) softmax stays
    well defined; nothing flows between an inactive node and any other node.
    """
    beta = act[:, :, None] & act[:, None, :]
    allowed = beta | (np.eye(act.shape[1], dtype=bool)[None] & ~act[:, :, None])
    return np.where(allowed, 0.0, NEG_INF)[:, None]


def _check_z(zs, activations) -> None:
    for i, (z, a) in enumerate(zip(zs, activations)):
        if z.ndim != 2 or z.shape[0] != len(a.active_ids):
            raise ContractError(f"sample {i}: {z.shape[0] if z.ndim else 0} representations for "
                                f"{len(a.active_ids)} active nodes")


def _activate(model: TegModel, zs: Sequence[Tensor], activations: Sequence[SubgraphActivation],
              nodes: np.ndarray) -> Tensor:
    """(B, n, d) features of table rows ``nodes``: base rows plus each sample's z on its active rows."""
    _check_z(zs, activations)
    n = len(nodes)
    local = np.full(VOCAB_SIZE, -1)
    local[nodes] = np.arange(n)
    flat_ids = np.concatenate([local[list(a.active_ids)] + i * n for i, a in enumerate(activations)])
    z_all = nk.concat(list(zs), axis=0) if len(zs) > 1 else zs[0]
    scattered = nk.reshape(nk.scatter_rows(z_all, flat_ids, len(activations) * n), (len(activations), n, -1))
    base = model.params["teg.nodes"] if n == VOCAB_SIZE else model.params["teg.nodes"][nodes]
    return base + scattered


def activate_batch(model: TegModel, zs: Sequence[Tensor], activations: Sequence[SubgraphActivation]) -> Tensor:
    """(B, N, d) features: base node table plus each sample's z on its active rows."""
    return _activate(model, zs, activations, ALL_NODES)


def activate(model: TegModel, z: Tensor, activation: SubgraphActivation) -> Tensor:
    """(N, d) features for one sample; the base table itself is never modified."""
    out = activate_batch(model, [z], [activation])
    return nk.reshape(out, out.shape[1:])


def _gat(model: TegModel, feats: Tensor, act: np.ndarray, layer: int) -> tuple[Tensor, Tensor]:
    cfg, P = model.config, model.params
    pre = f"teg.layers.{layer}."
    b, n, d = feats.shape
    a = nk.rms_norm(feats, P[pre + "attn_norm"], cfg.norm_eps)
    wh = nk.transpose(nk.reshape(a @ P[pre + "w"], (b, n, cfg.heads, cfg.head_size)), (0, 2, 1, 3))
    src = nk.sum(wh * nk.reshape(P[pre + "a_src"], (1, cfg.heads, 1, cfg.head_size)), axis=-1)
    dst = nk.sum(wh * nk.reshape(P[pre + "a_dst"], (1, cfg.heads, 1, cfg.head_size)), axis=-1)
    e = nk.leaky_relu(nk.reshape(src, (b, cfg.heads, n, 1)) + nk.reshape(dst, (b, cfg.heads, 1, n)), LEAKY_SLOPE)
    alpha = nk.softmax_lastdim(e, _additive_mask(act))
    agg = nk.reshape(nk.transpose(alpha @ wh, (0, 2, 1, 3)), (b, n, d))
    return feats + nk.relu(agg) * act[:, :, None].astype(np.float64), alpha


def _ffn(model: TegModel, feats: Tensor, act: np.ndarray, layer: int) -> Tensor:
    P, pre = model.params, f"teg.layers.{layer}."
    a = nk.rms_norm(feats, P[pre + "ffn_norm"], model.config.norm_eps)
    return feats + (nk.relu(a @ P[pre + "ffn.w1"]) @ P[pre + "ffn.w2"]) * act[:, :, None].astype(np.float64)


def _layers(model: TegModel, feats: Tensor, act: np.ndarray) -> Tensor:
    for k in range(model.config.teg_layers):
        feats = _ffn(model, _gat(model, feats, act, k)[0], act, k)
    return feats


def _pool(model: TegModel, feats: Tensor, act: np.ndarray) -> Tensor:
    w = act.astype(np.float64)
    normed = nk.rms_norm(feats, model.params["teg.final_norm"], model.config.norm_eps)
    return nk.sum(normed * w[:, :, None], axis=1) * (1.0 / w.sum(axis=1, keepdims=True))


def _as_batch(features: Tensor, activation):
    if isinstance(activation, SubgraphActivation):
        feats, acts, single = nk.reshape(features, (1, *features.shape)), [activation], True
    else:
        feats, acts, single = features, list(activation), False
    if feats.shape[1] != VOCAB_SIZE:
        raise ContractError(f"expected {VOCAB_SIZE} node rows, got {feats.shape[1]}")
    return feats, _indicators(acts, ALL_NODES), single


def _unbatch(t: Tensor, single: bool) -> Tensor:
    return nk.reshape(t, t.shape[1:]) if single else t


def graph_attention(model: TegModel, features: Tensor, activation, layer: int,
                    return_alpha: bool = False):
    """Masked multi-head graph attention sub-layer with residual (inactive rows unchanged).

    For active m: h'_m = h_m + ReLU(sum_n alpha_mn W norm(h)_n), heads concatenated, with
    alpha_mn = softmax_n(LeakyReLU(a_src . W norm(h)_m + a_dst . W norm(h)_n)) over active n.
    Accepts one sample (N, d) with a SubgraphActivation or a batch (B, N, d) with a list.
    """
    feats, act, single = _as_batch(features, activation)
    out, alpha = _gat(model, feats, act, layer)
    out, alpha = _unbatch(out, single), _unbatch(alpha, single)
    return (out, alpha) if return_alpha else out


def feed_forward(model: TegModel, features: Tensor, activation, layer: int) -> Tensor:
    """Position-wise ReLU MLP sub-layer with residual, applied to active rows only."""
    feats, act, single = _as_batch(features, activation)
    return _unbatch(_ffn(model, feats, act, layer), single)


def graph_layers(model: TegModel, features: Tensor, activation) -> Tensor:
    feats, act, single = _as_batch(features, activation)
    return _unbatch(_layers(model, feats, act), single)


def pool(model: TegModel, features: Tensor, activation) -> Tensor:
    """Mean of the normalised active-node features: (B, d) (or (d,) for one sample)."""
    feats, act, single = _as_batch(features, activation)
    return _unbatch(_pool(model, feats, act), single)


def classify(model: TegModel, pooled: Tensor, task_id: str) -> Tensor:
    if task_id not in model.tasks:
        raise TaskError(f"unregistered task {task_id!r}")
    P = model.params
    return pooled @ P[f"teg.head.{task_id}.weight"] + P[f"teg.head.{task_id}.bias"]


def pool_and_classify(model: TegModel, features: Tensor, activation: SubgraphActivation, task_id: str) -> Tensor:
    pooled = pool(model, features, activation)
    return nk.reshape(classify(model, nk.reshape(pooled, (1, -1)), task_id), (-1,))


def batch_forward(model: TegModel, items: Sequence[tuple[Tensor, SubgraphActivation, str]],
                  full_graph: bool = False) -> list[Tensor]:
    """Logits for a mixed batch of (z, activation, task_id); each row equals its solo forward.

    Only table rows active in some sample can influence any output, so by
    default the layers run on that union of rows; ``full_graph`` runs all 138.
    """
    for i, (_, _, task) in enumerate(items):
        if task not in model.tasks:
            raise TaskError(f"sample {i}: unregistered task {task!r}")
    zs = [z for z, _, _ in items]
    acts = [a for _, a, _ in items]
    nodes = ALL_NODES if full_graph else np.unique(np.concatenate([a.active_ids for a in acts]))
    try:
        feats = _activate(model, zs, acts, nodes)
    except ContractError as exc:
        raise ContractError(f"batch: {exc}") from None
    act = _indicators(acts, nodes)
    pooled = _pool(model, _layers(model, feats, act), act)
    out: list[Tensor | None] = [None] * len(items)
    for task in sorted({t for _, _, t in items}):
        idx = [i for i, (_, _, t) in enumerate(items) if t == task]
        logits = classify(model, pooled[np.asarray(idx)], task)
        for row, i in enumerate(idx):
            out[i] = logits[row]
    return out


class FrozenEncoder:
    """Electrode representations of one dataset's samples under a frozen encoder.

    For a causal encoder the signal positions cannot see the appended token, so
    their keys and values are computed once and only the final position is
    re-evaluated as the special token changes.
    """

    def __init__(self, ete: EteModel, tokens: np.ndarray):
        self.ete = ete
        self.tokens = np.asarray(tokens, dtype=np.float64)
        n, e, t, c = self.tokens.shape
        self.prefix = None
        if ete.causal:
            self.prefix = [(k.reshape(n, e, *k.shape[1:]), v.reshape(n, e, *v.shape[1:]))
                           for k, v in ete.prefix_states(self.tokens.reshape(n * e, t, c))]

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, special: Tensor, rows) -> list[Tensor]:
        rows = np.asarray(rows, dtype=np.intp)
        if self.prefix is None:
            return _encode_full(self.ete, special, list(self.tokens[rows]))
        e = self.tokens.shape[1]
        sel = [(k[rows].reshape(-1, *k.shape[2:]), v[rows].reshape(-1, *v.shape[2:])) for k, v in self.prefix]
        x_last = nk.broadcast_to(nk.reshape(special, (1, -1)), (len(rows) * e, special.shape[0]))
        z = self.ete.forward_appended(sel, x_last)
        return [z[i * e:(i + 1) * e] for i in range(len(rows))]


def _encode_full(ete: EteModel, special: Tensor, tokens: Sequence[np.ndarray]) -> list[Tensor]:
    sizes = [t.shape[0] for t in tokens]
    streams = assemble_finetune_batch(np.concatenate(list(tokens), axis=0), special)
    z = extract_electrode_repr(ete, streams)
    bounds = np.cumsum([0] + sizes)
    return [z[bounds[i]:bounds[i + 1]] for i in range(len(sizes))]


def encode_samples(ete: EteModel, teg: TegModel, tokens: Sequence[np.ndarray]) -> list[Tensor]:
    """Frozen-encoder electrode representations z (E_i, d) for each (E_i, T, C) sample.

    Samples are encoded in one forward over all streams; streams never attend
    to each other, so each z matches the sample encoded alone.
    """
    return _encode_full(ete, teg.special, tokens)
