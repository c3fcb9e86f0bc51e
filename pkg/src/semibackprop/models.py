"""Desk-scale transformer encoder and MLP, lowered onto scalar tapes.

Parameters are plain ``dict[str, np.ndarray]``; the same dict drives the
scalar-tape builders here and the tensor-level torch mirrors in
:mod:`semibackprop.training`. Weight matrices are stored ``(in, out)`` so a
layer is ``x @ W + b`` everywhere.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .ops import TensorRef
from .primitives import Op
from .tape import Tape

BRANCHES = ("skip", "keys", "values", "queries")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 1
    hidden: int = 16
    heads: int = 2
    vocab: int = 21
    seq_len: int = 10  # number of learned positions (max sequence length)
    classes: int = 2
    ff_mult: int = 4  # feed-forward width = ff_mult * hidden
    seed: int = 0
    pooling: str = "mean"  # "mean" over positions or "first" position only

    def __post_init__(self):
        if self.pooling not in ("mean", "first"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if min(self.hidden, self.heads, self.vocab, self.seq_len, self.classes, self.ff_mult) < 1:
            raise ValueError("model sizes must be positive")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.layers and self.hidden < 2:
            raise ValueError("layer norm needs hidden >= 2")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def ff_width(self) -> int:
        return self.ff_mult * self.hidden

    def to_dict(self) -> dict:
        return {"type": "transformer", **asdict(self)}


@dataclass(frozen=True)
class MLPConfig:
    features: int = 4
    hidden: int = 16
    classes: int = 2
    seed: int = 0

    def to_dict(self) -> dict:
        return {"type": "mlp", **asdict(self)}


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type", "transformer")
    return MLPConfig(**d) if kind == "mlp" else ModelConfig(**d)


# -- initialization ---------------------------------------------------------------


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_transformer(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    d, F = cfg.hidden, cfg.ff_width
    p = {
        "tok_emb": rng.normal(0.0, 1.0, (cfg.vocab, d)),
        "pos_emb": rng.normal(0.0, 1.0, (cfg.seq_len, d)),
    }
    for l in range(cfg.layers):
        pre = f"layer{l}."
        for name in ("q", "k", "v", "o"):
            p[pre + "w" + name] = _uniform(rng, d, (d, d))
            p[pre + "b" + name] = _uniform(rng, d, (d,))
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        p[pre + "ff.w1"] = _uniform(rng, d, (d, F))
        p[pre + "ff.b1"] = _uniform(rng, d, (F,))
        p[pre + "ff.w2"] = _uniform(rng, F, (F, d))
        p[pre + "ff.b2"] = _uniform(rng, F, (d,))
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
    p["head.w"] = _uniform(rng, d, (d, cfg.classes))
    p["head.b"] = _uniform(rng, d, (cfg.classes,))
    return p


def init_mlp(cfg: MLPConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    return {
        "w1": _uniform(rng, cfg.features, (cfg.features, cfg.hidden)),
        "b1": _uniform(rng, cfg.features, (cfg.hidden,)),
        "w2": _uniform(rng, cfg.hidden, (cfg.hidden, cfg.classes)),
        "b2": _uniform(rng, cfg.hidden, (cfg.classes,)),
    }


# -- tape builders ------------------------------------------------------------------


@dataclass
class BuiltModel:
    """A model instantiated on a tape for one input.

    ``inputs[i]`` is the node set of input position/feature ``i`` (the token
    embedding lookup nodes for a transformer, the single feature node for an
    MLP). ``anchors[l][branch][i]`` is the node set where the hidden state
    of position ``i`` enters ``branch`` in layer ``l``; ``hidden[l][i]`` is
    that hidden state itself.
    """

    tape: Tape
    logits: TensorRef
    inputs: list[TensorRef]
    params: dict[str, TensorRef] = field(default_factory=dict)
    anchors: list[dict[str, list[TensorRef]]] = field(default_factory=list)
    hidden: list[list[TensorRef]] = field(default_factory=list)
    positions: list[TensorRef] = field(default_factory=list)


def build_transformer(cfg: ModelConfig, params: dict[str, np.ndarray], tokens) -> BuiltModel:
    tokens = [int(t) for t in tokens]
    S = len(tokens)
    if not 1 <= S <= cfg.seq_len:
        raise ValueError(f"sequence length {S} outside 1..{cfg.seq_len}")
    for t in tokens:
        if not 0 <= t < cfg.vocab:
            raise ValueError(f"token {t} outside vocabulary of size {cfg.vocab}")
    tape = Tape(capacity=_estimate_nodes(cfg, S))
    P = {name: ops.parameter(tape, value) for name, value in params.items()}

    tok_rows = [ops.embedding_lookup(tape, P["tok_emb"], t) for t in tokens]
    pos_rows = [ops.embedding_lookup(tape, P["pos_emb"], i) for i in range(S)]
    tok = ops.concat([r[None, :] for r in tok_rows], axis=0)
    pos = ops.concat([r[None, :] for r in pos_rows], axis=0)
    x = ops.add(tape, tok, pos)

    built = BuiltModel(tape, None, tok_rows, P, positions=pos_rows)
    for l in range(cfg.layers):
        x = _encoder_layer(tape, cfg, P, f"layer{l}.", x, built)

    pooled = ops.mean(tape, x, axis=0) if cfg.pooling == "mean" else x[0]
    logits = ops.linear(tape, pooled[None, :], P["head.w"], P["head.b"])
    built.logits = logits[0]
    return built


def _encoder_layer(tape, cfg, P, pre, x: TensorRef, built: BuiltModel) -> TensorRef:
    S, H, dh = x.shape[0], cfg.heads, cfg.head_dim
    # explicit fan-out of the hidden state into the four branches
    copies = {b: ops.identity(tape, x) for b in BRANCHES}
    built.hidden.append([x[i] for i in range(S)])
    built.anchors.append({b: [c[i] for i in range(S)] for b, c in copies.items()})

    q = ops.linear(tape, copies["queries"], P[pre + "wq"], P[pre + "bq"])
    k = ops.linear(tape, copies["keys"], P[pre + "wk"], P[pre + "bk"])
    v = ops.linear(tape, copies["values"], P[pre + "wv"], P[pre + "bv"])
    heads = []
    for h in range(H):
        cols = slice(h * dh, (h + 1) * dh)
        scores = ops.matmul(tape, q[:, cols], ops.transpose(k[:, cols]))
        scores = ops.scale(tape, scores, 1.0 / math.sqrt(dh))
        attn = ops.softmax(tape, scores)
        heads.append(ops.matmul(tape, attn, v[:, cols]))
    mixed = ops.concat(heads, axis=1)
    attn_out = ops.linear(tape, mixed, P[pre + "wo"], P[pre + "bo"])
    x = ops.layer_norm(tape, ops.add(tape, copies["skip"], attn_out), P[pre + "ln1.g"], P[pre + "ln1.b"])

    hid = ops.relu(tape, ops.linear(tape, x, P[pre + "ff.w1"], P[pre + "ff.b1"]))
    ff = ops.linear(tape, hid, P[pre + "ff.w2"], P[pre + "ff.b2"])
    return ops.layer_norm(tape, ops.add(tape, x, ff), P[pre + "ln2.g"], P[pre + "ln2.b"])


def _estimate_nodes(cfg: ModelConfig, S: int) -> int:
    d, F = cfg.hidden, cfg.ff_width
    n_params = (cfg.vocab + cfg.seq_len) * d + cfg.layers * (4 * d * d + 2 * d * F) + d * cfg.classes
    per_layer = 2 * S * d * (4 * d + 2 * F) + 2 * S * S * d + 40 * S * d
    return n_params + cfg.layers * per_layer + 4 * S * d + 4 * d * cfg.classes + 1024


def build_mlp(cfg: MLPConfig, params: dict[str, np.ndarray], features) -> BuiltModel:
    features = np.asarray(features, dtype=float)
    if features.shape != (cfg.features,):
        raise ValueError(f"expected {cfg.features} features, got shape {features.shape}")
    tape = Tape()
    xs = ops.parameter(tape, features)
    P = {name: ops.parameter(tape, value) for name, value in params.items()}
    h = ops.relu(tape, ops.linear(tape, xs[None, :], P["w1"], P["b1"]))
    logits = ops.linear(tape, h, P["w2"], P["b2"])
    return BuiltModel(tape, logits[0], [xs[i : i + 1] for i in range(cfg.features)], P)


def build(cfg, params, x) -> BuiltModel:
    if isinstance(cfg, MLPConfig):
        return build_mlp(cfg, params, x)
    return build_transformer(cfg, params, x)


def output_scalar_for_analysis(tape: Tape, logits: TensorRef, true_class: int, other_class: int) -> int:
    """Append ``log_softmax[true] - log_softmax[other]`` and make it the output."""
    if true_class == other_class:
        raise ValueError("classes must differ")
    lt, lo = ops.log_softmax_entries(tape, logits, [true_class, other_class])
    out = tape.scalar(Op.SUB, lt, lo)
    tape.set_output(out)
    return out


def runner_up(logit_values: np.ndarray, true_class: int) -> int:
    """Highest-scoring class other than ``true_class``."""
    z = np.array(logit_values, dtype=float)
    z[true_class] = -np.inf
    return int(np.argmax(z))
