"""Per-electrode temporal encoder: a pre-norm transformer over token streams.

The causal variant is trained by next-token prediction (the output at
position t estimates the token at t+1); the bidirectional variant is the
masked-reconstruction baseline and owns an extra learned mask token.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from functools import lru_cache

import numpy as np

from . import numkit as nk
from .electrodes import VOCAB_SIZE
from .numkit import NEG_INF, ContractError, Tensor

METRICS = ("l2", "l1", "cosine")
COSINE_EPS = 1e-12


@dataclass(frozen=True)
class EteConfig:
    layers: int
    hidden: int
    heads: int
    head_size: int
    intermediate: int
    token_width: int = 256
    max_len: int = 26
    teg_layers: int = 0
    init_std: float = 0.02
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.hidden != self.heads * self.head_size:
            raise ValueError(f"hidden {self.hidden} != heads {self.heads} x head size {self.head_size}")
        if min(self.layers, self.hidden, self.heads, self.intermediate, self.token_width, self.max_len) <= 0:
            raise ValueError(f"non-positive size in {self}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EteConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown EteConfig keys {sorted(unknown)}")
        return cls(**d)

    def with_(self, **changes) -> "EteConfig":
        return replace(self, **changes)


# base..giant are the full-scale sizes; small/tiny/micro are desk-scale ladders of the same shape.
PRESETS: dict[str, EteConfig] = {
    "base": EteConfig(layers=3, teg_layers=3, hidden=128, heads=4, head_size=32, intermediate=512),
    "large": EteConfig(layers=9, teg_layers=3, hidden=256, heads=8, head_size=32, intermediate=1024),
    "huge": EteConfig(layers=12, teg_layers=4, hidden=896, heads=14, head_size=64, intermediate=3584),
    "giant": EteConfig(layers=20, teg_layers=4, hidden=1792, heads=28, head_size=64, intermediate=7168),
    "small": EteConfig(layers=2, teg_layers=1, hidden=64, heads=4, head_size=16, intermediate=128, token_width=32),
    "tiny": EteConfig(layers=2, teg_layers=1, hidden=32, heads=2, head_size=16, intermediate=64, token_width=32),
    "micro": EteConfig(layers=2, teg_layers=2, hidden=8, heads=2, head_size=4, intermediate=12, token_width=6,
                       max_len=6, init_std=0.3),
}

TABLE1_TOTALS = {"base": 1.46e6, "large": 11.29e6, "huge": 183.8e6, "giant": 1.09e9}


@lru_cache(maxsize=64)
def _causal(seq_len: int) -> np.ndarray:
    m = np.triu(np.full((seq_len, seq_len), NEG_INF), k=1)
    m.setflags(write=False)
    return m


def causal_mask(seq_len: int) -> Tensor:
    """(seq_len, seq_len) additive mask: 0 where j <= i, NEG_INF above the diagonal."""
    if seq_len < 1:
        raise ContractError("sequence length must be at least 1")
    return Tensor(_causal(seq_len))


class EteModel:
    def __init__(self, config: EteConfig, seed: int = 0, causal: bool = True):
        self.config = config
        self.causal = causal
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c, d, inter, std = config.token_width, config.hidden, config.intermediate, config.init_std
        out_std = std / math.sqrt(2 * config.layers)

        def p(name, arr):
            self.params[name] = Tensor(arr, requires_grad=True, name=name)

        p("ete.in_proj.weight", rng.standard_normal((c, d)) * std)
        p("ete.in_proj.bias", np.zeros(d))
        p("ete.pos", rng.standard_normal((config.max_len, d)) * std)
        for i in range(config.layers):
            pre = f"ete.blocks.{i}."
            p(pre + "attn_norm", np.ones(d))
            for w in ("wq", "wk", "wv"):
                p(pre + "attn." + w, rng.standard_normal((d, d)) * std)
            p(pre + "attn.wo", rng.standard_normal((d, d)) * out_std)
            p(pre + "ffn_norm", np.ones(d))
            p(pre + "ffn.gate", rng.standard_normal((d, inter)) * std)
            p(pre + "ffn.up", rng.standard_normal((d, inter)) * std)
            p(pre + "ffn.down", rng.standard_normal((inter, d)) * out_std)
        p("ete.final_norm", np.ones(d))
        p("ete.head.gate", rng.standard_normal((d, d)) * std)
        p("ete.head.up", rng.standard_normal((d, d)) * std)
        p("ete.head.out", rng.standard_normal((d, c)) * std)
        p("ete.head.bias", np.zeros(c))
        if not causal:
            p("ete.mask_token", rng.standard_normal(c) * std)

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    # -- forward ---------------------------------------------------------
    def _attention(self, h: Tensor, i: int) -> Tensor:
        cfg, P = self.config, self.params
        pre = f"ete.blocks.{i}."
        b, s, d = h.shape
        a = nk.rms_norm(h, P[pre + "attn_norm"], cfg.norm_eps)

        def heads(w):
            return nk.transpose(nk.reshape(a @ P[pre + "attn." + w], (b, s, cfg.heads, cfg.head_size)), (0, 2, 1, 3))

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        scores = (q @ nk.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(cfg.hidden))
        probs = nk.softmax_lastdim(scores, _causal(s) if self.causal else None)
        o = nk.reshape(nk.transpose(probs @ v, (0, 2, 1, 3)), (b, s, d))
        return o @ P[pre + "attn.wo"]

    def _ffn(self, h: Tensor, i: int) -> Tensor:
        P = self.params
        pre = f"ete.blocks.{i}."
        a = nk.rms_norm(h, P[pre + "ffn_norm"], self.config.norm_eps)
        return (nk.silu(a @ P[pre + "ffn.gate"]) * (a @ P[pre + "ffn.up"])) @ P[pre + "ffn.down"]

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """(B, S, C) or (S, C) tokens -> (hidden (.., S, d), predictions (.., S, C)).

        Causal mode: predictions[t] estimates token t+1 from positions <= t.
        """
        squeeze = x.ndim == 2
        if squeeze:
            x = nk.reshape(x, (1, *x.shape))
        b, s, c = x.shape
        if s > self.config.max_len:
            raise ContractError(f"sequence of length {s} exceeds max_len {self.config.max_len}")
        if c != self.config.token_width:
            raise nk.DimensionError(f"token width {c} != configured {self.config.token_width}")
        P = self.params
        h = x @ P["ete.in_proj.weight"] + P["ete.in_proj.bias"] + P["ete.pos"][:s]
        for i in range(self.config.layers):
            h = h + self._attention(h, i)
            h = h + self._ffn(h, i)
        n = nk.rms_norm(h, P["ete.final_norm"], self.config.norm_eps)
        preds = (nk.silu(n @ P["ete.head.gate"]) * (n @ P["ete.head.up"])) @ P["ete.head.out"] + P["ete.head.bias"]
        if squeeze:
            h, preds = nk.reshape(h, h.shape[1:]), nk.reshape(preds, preds.shape[1:])
        return h, preds

    __call__ = forward

    # -- frozen-prefix path ------------------------------------------------
    def prefix_states(self, tokens: np.ndarray, chunk: int = 1024) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer (keys, values), each (M, heads, T, head_size), of (M, T, C) streams.

        Only valid for a causal encoder: later tokens never change these.
        """
        if not self.causal:
            raise ContractError("prefix states are only defined for a causal encoder")
        cfg, P = self.config, self.params
        out: list[tuple[list, list]] = [([], []) for _ in range(cfg.layers)]
        with nk.no_grad():
            for s in range(0, len(tokens), chunk):
                x = Tensor(tokens[s:s + chunk])
                b, t, _ = x.shape
                h = x @ P["ete.in_proj.weight"] + P["ete.in_proj.bias"] + P["ete.pos"][:t]
                for i in range(cfg.layers):
                    pre = f"ete.blocks.{i}."
                    a = nk.rms_norm(h, P[pre + "attn_norm"], cfg.norm_eps)
                    for store, w in zip(out[i], ("wk", "wv")):
                        hd = (a @ P[pre + "attn." + w]).data.reshape(b, t, cfg.heads, cfg.head_size)
                        store.append(hd.transpose(0, 2, 1, 3))
                    h = h + self._attention(h, i)
                    h = h + self._ffn(h, i)
        return [(np.concatenate(k), np.concatenate(v)) for k, v in out]

    def forward_appended(self, prefix: list[tuple[np.ndarray, np.ndarray]], x_last: Tensor) -> Tensor:
        """Hidden state (M, d) of one token appended after cached (M, T) streams."""
        cfg, P = self.config, self.params
        m, _, t, _ = prefix[0][0].shape
        if t + 1 > cfg.max_len:
            raise ContractError(f"sequence of length {t + 1} exceeds max_len {cfg.max_len}")
        h = x_last @ P["ete.in_proj.weight"] + P["ete.in_proj.bias"] + P["ete.pos"][t]
        for i, (kp, vp) in enumerate(prefix):
            pre = f"ete.blocks.{i}."
            a = nk.rms_norm(h, P[pre + "attn_norm"], cfg.norm_eps)

            def heads(w):
                return nk.reshape(a @ P[pre + "attn." + w], (m, cfg.heads, 1, cfg.head_size))

            k = nk.concat([Tensor(kp), heads("wk")], axis=2)
            v = nk.concat([Tensor(vp), heads("wv")], axis=2)
            probs = nk.softmax_lastdim((heads("wq") @ nk.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(cfg.hidden)))
            h = h + nk.reshape(probs @ v, (m, cfg.hidden)) @ P[pre + "attn.wo"]
            h = h + self._ffn(h, i)
        return h


# -- losses -----------------------------------------------------------------

def token_distance(pred: Tensor, target, metric: str = "l2") -> Tensor:
    """Per-token distance over the last axis: mean squared, mean absolute, or 1 - cosine."""
    diff = pred - target
    if metric == "l2":
        return nk.mean(diff * diff, axis=-1)
    if metric == "l1":
        return nk.mean(nk.abs(diff), axis=-1)
    if metric == "cosine":
        target = nk.as_tensor(target)
        dot = nk.sum(pred * target, axis=-1)
        norms = nk.sqrt(nk.sum(pred * pred, axis=-1) + COSINE_EPS) * nk.sqrt(nk.sum(target * target, axis=-1) + COSINE_EPS)
        return 1.0 - dot / norms
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def ar_loss(model: EteModel, seq: Tensor, metric: str = "l2") -> Tensor:
    """Mean next-token distance over the T signal tokens of (B, T+1, C) sequences.

    Position 0 is the condition token and is never a target.
    """
    if seq.ndim == 2:
        seq = nk.reshape(seq, (1, *seq.shape))
    if seq.shape[1] < 2:
        raise ContractError("need a condition token plus at least one signal token")
    _, preds = model.forward(seq)
    return nk.mean(token_distance(preds[:, :-1], seq[:, 1:], metric))


def choose_mask_positions(batch: int, num_signal: int, mask_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """(batch, ceil(ratio*T)) sorted signal positions in 1..T to hide."""
    if not 0 < mask_ratio < 1:
        raise ContractError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    n = math.ceil(mask_ratio * num_signal)
    if n == 0:
        raise ContractError("mask selects no positions")
    return np.sort(np.stack([rng.choice(num_signal, size=n, replace=False) for _ in range(batch)]), axis=1) + 1


def mae_loss(model: EteModel, seq: Tensor, mask_ratio: float = 0.5, metric: str = "l2",
             rng: np.random.Generator | None = None, positions: np.ndarray | None = None) -> Tensor:
    """Masked reconstruction loss for the bidirectional baseline.

    Hidden signal positions are replaced by the learned mask token; the loss is
    the mean distance between the reconstruction and the original token over
    hidden positions only.
    """
    if model.causal:
        raise ContractError("masked reconstruction needs a bidirectional model")
    if seq.ndim == 2:
        seq = nk.reshape(seq, (1, *seq.shape))
    b, s, _ = seq.shape
    if positions is None:
        positions = choose_mask_positions(b, s - 1, mask_ratio, rng or np.random.default_rng(0))
    positions = np.asarray(positions, dtype=np.intp).reshape(b, -1)
    if positions.shape[1] == 0:
        raise ContractError("mask selects no positions")
    if positions.min() < 1 or positions.max() >= s:
        raise ContractError("mask positions must be signal positions 1..T")
    hide = np.zeros((b, s, 1))
    hide[np.arange(b)[:, None], positions] = 1.0
    x_in = seq * (1.0 - hide) + model.params["ete.mask_token"] * hide
    _, preds = model.forward(x_in)
    rows = np.arange(b)[:, None]
    return nk.mean(token_distance(preds[rows, positions], seq.data[rows, positions], metric))


# -- parameter counting -----------------------------------------------------------

def ete_parameter_count(cfg: EteConfig) -> int:
    d, c, inter = cfg.hidden, cfg.token_width, cfg.intermediate
    block = 2 * d + 4 * d * d + 3 * d * inter
    return (c * d + d) + cfg.max_len * d + cfg.layers * block + d + (2 * d * d + d * c + c)


def teg_parameter_count(cfg: EteConfig, class_counts=()) -> int:
    d, inter = cfg.hidden, cfg.intermediate
    layer = d + d * d + 2 * d + d + 2 * d * inter
    heads = sum(d * k + k for k in class_counts)
    return VOCAB_SIZE * d + cfg.teg_layers * layer + d + cfg.token_width + heads


def count_parameters(cfg: EteConfig, include_teg: bool = True, class_counts=()) -> int:
    """Trainable parameters: encoder + electrode vocabulary (+ electrode graph)."""
    total = ete_parameter_count(cfg) + VOCAB_SIZE * cfg.token_width
    if include_teg:
        total += teg_parameter_count(cfg, class_counts)
    return total
