"""Tensor-shaped builders that lower onto scalar tape nodes.

A :class:`TensorRef` is just a shape plus the ids of its scalar nodes in
row-major order. Every builder here appends scalar primitives only, so the
Bauer paths of the resulting graph are defined edge by edge.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .primitives import Op
from .tape import Tape

LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class TensorRef:
    shape: tuple[int, ...]
    ids: np.ndarray

    def __post_init__(self):
        if int(np.prod(self.shape)) != self.ids.size:
            raise ValueError(f"{self.ids.size} ids do not fill shape {self.shape}")

    @property
    def grid(self) -> np.ndarray:
        return self.ids.reshape(self.shape)

    def __getitem__(self, key) -> "TensorRef":
        sub = self.grid[key]
        return TensorRef(tuple(np.shape(sub)), np.asarray(sub).ravel())

    def values(self, tape: Tape) -> np.ndarray:
        return tape.values[self.ids].reshape(self.shape)

    def __len__(self) -> int:
        return self.shape[0]


def _ref(shape, ids) -> TensorRef:
    return TensorRef(tuple(int(s) for s in shape), np.asarray(ids, dtype=np.int64).ravel())


def parameter(tape: Tape, values) -> TensorRef:
    values = np.asarray(values, dtype=float)
    return _ref(values.shape, tape.input(values.ravel()))


def constant(tape: Tape, values) -> TensorRef:
    values = np.asarray(values, dtype=float)
    return _ref(values.shape, tape.const(values.ravel()))


def scalar_primitive(tape: Tape, op: Op, *parents: int, coef=None) -> int:
    return tape.scalar(op, *parents, coef=coef)


# -- elementwise --------------------------------------------------------------


def _binary(tape: Tape, op: Op, x: TensorRef, y: TensorRef) -> TensorRef:
    a, b = np.broadcast_arrays(x.grid, y.grid)
    return _ref(a.shape, tape.apply(op, a.ravel(), b.ravel()))


def add(tape, x, y):
    return _binary(tape, Op.ADD, x, y)


def sub(tape, x, y):
    return _binary(tape, Op.SUB, x, y)


def mul(tape, x, y):
    return _binary(tape, Op.MUL, x, y)


def div(tape, x, y):
    return _binary(tape, Op.DIV, x, y)


def unary(tape: Tape, op: Op, x: TensorRef) -> TensorRef:
    return _ref(x.shape, tape.apply(op, x.ids))


def relu(tape, x):
    return unary(tape, Op.RELU, x)


def identity(tape, x):
    return unary(tape, Op.IDENTITY, x)


def scale(tape: Tape, x: TensorRef, c: float) -> TensorRef:
    return _ref(x.shape, tape.apply(Op.LINEAR, x.ids, coef=(c, 0.0)))


# -- reductions -----------------------------------------------------------------


def reduce_sum(tape: Tape, x: TensorRef, axis: int = -1) -> TensorRef:
    """Sum along ``axis`` with a pairwise tree of ADD nodes (n - 1 per output)."""
    g = np.moveaxis(x.grid, axis, -1)
    out_shape = g.shape[:-1]
    cols = g.reshape(-1, g.shape[-1])
    while cols.shape[1] > 1:
        half = cols.shape[1] // 2
        left, right = cols[:, :half], cols[:, half : 2 * half]
        summed = tape.apply(Op.ADD, left.ravel(), right.ravel()).reshape(left.shape)
        if cols.shape[1] % 2:
            summed = np.concatenate([summed, cols[:, -1:]], axis=1)
        cols = summed
    return _ref(out_shape, cols[:, 0])


def mean(tape: Tape, x: TensorRef, axis: int = -1) -> TensorRef:
    n = x.grid.shape[axis]
    s = reduce_sum(tape, x, axis)
    return s if n == 1 else scale(tape, s, 1.0 / n)


# -- linear algebra -------------------------------------------------------------


def matmul(tape: Tape, a: TensorRef, b: TensorRef) -> TensorRef:
    """``p x q`` times ``q x r``: p*r*q MUL nodes and p*r*(q-1) ADD nodes."""
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ValueError("matmul expects 2-d operands")
    p, q = a.shape
    q2, r = b.shape
    if q != q2:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    ga, gb = a.grid, b.grid
    left = np.broadcast_to(ga[:, None, :], (p, r, q))
    right = np.broadcast_to(gb.T[None, :, :], (p, r, q))
    prods = _ref((p, r, q), tape.apply(Op.MUL, left.ravel(), right.ravel()))
    return reduce_sum(tape, prods, axis=-1)


def linear(tape: Tape, x: TensorRef, weight: TensorRef, bias: TensorRef | None = None) -> TensorRef:
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    y = matmul(tape, x, weight)
    if bias is not None:
        y = add(tape, y, bias)
    return y


def transpose(x: TensorRef) -> TensorRef:
    return _ref(x.grid.T.shape, x.grid.T)


def concat(parts: list[TensorRef], axis: int = -1) -> TensorRef:
    g = np.concatenate([p.grid for p in parts], axis=axis)
    return _ref(g.shape, g)


# -- normalizations ---------------------------------------------------------------


def softmax(tape: Tape, logits: TensorRef) -> TensorRef:
    """Softmax over the last axis.

    The row maximum is subtracted for stability; it enters the graph as a
    CONST captured at build time, so the partials stay exact at this point.
    """
    g = logits.grid
    rows = g.reshape(-1, g.shape[-1])
    m = tape.values[rows].max(axis=1, keepdims=True)
    mc = tape.const(np.broadcast_to(m, rows.shape).ravel()).reshape(rows.shape)
    shifted = tape.apply(Op.SUB, rows.ravel(), mc.ravel())
    e = _ref(rows.shape, tape.apply(Op.EXP, shifted))
    z = reduce_sum(tape, e, axis=-1)
    zb = np.broadcast_to(z.grid[:, None], rows.shape)
    out = tape.apply(Op.DIV, e.ids, zb.ravel())
    return _ref(g.shape, out)


def log_softmax_entries(tape: Tape, logits: TensorRef, which: list[int]) -> list[int]:
    """``log softmax(logits)[k]`` for each ``k`` in ``which`` (1-d logits)."""
    if len(logits.shape) != 1:
        raise ValueError("expected a 1-d logits vector")
    m = float(tape.values[logits.ids].max())
    mc = tape.const(np.full(logits.ids.size, m))
    shifted = tape.apply(Op.SUB, logits.ids, mc)
    e = _ref(shifted.shape, tape.apply(Op.EXP, shifted))
    z = int(reduce_sum(tape, e).ids[0])
    logz = tape.scalar(Op.LOG, z)
    return [tape.scalar(Op.SUB, int(shifted[k]), logz) for k in which]


def layer_norm(tape: Tape, x: TensorRef, gain: TensorRef, bias: TensorRef,
               eps: float = LAYER_NORM_EPS) -> TensorRef:
    """Layer norm over the last axis: ``(x - mean) / sqrt(var + eps) * gain + bias``."""
    g = x.grid
    n = g.shape[-1]
    if n < 2:
        raise ValueError("layer_norm needs at least 2 features")
    rows = _ref((g.size // n, n), g)
    mu = mean(tape, rows)
    centered = sub(tape, rows, _ref((len(mu.ids), 1), mu.ids))
    sq = mul(tape, centered, centered)
    var = mean(tape, sq)
    eps_ids = tape.const(np.full(len(var.ids), eps))
    shifted_var = tape.apply(Op.ADD, var.ids, eps_ids)
    half = tape.const(np.full(len(var.ids), 0.5))
    std = tape.apply(Op.POW, shifted_var, half)
    normed = div(tape, centered, _ref((len(std), 1), std))
    out = add(tape, mul(tape, normed, gain), bias)
    return _ref(g.shape, out.ids)


# -- embeddings ---------------------------------------------------------------------


def embedding_lookup(tape: Tape, table: TensorRef, token: int) -> TensorRef:
    """Copy row ``token`` of a ``V x d`` table onto the tape via IDENTITY nodes.

    Each call makes fresh nodes, so two positions holding the same token share
    the table parameters but have distinct node sets.
    """
    vocab = table.shape[0]
    if not 0 <= token < vocab:
        raise IndexError(f"token {token} outside vocabulary of size {vocab}")
    row = table.grid[token]
    return _ref(row.shape, tape.apply(Op.IDENTITY, row))
