"""Scalar primitives: value rules and exact local partials, vectorized.

Every primitive has arity <= 2. ``LINEAR`` is a weighted sum with fixed
coefficients (its partials *are* the coefficients); it carries constant
scalings such as ``1/n`` or ``1/sqrt(d)`` without a constant parent.
"""
from __future__ import annotations

import enum

import numpy as np


class Op(enum.IntEnum):
    INPUT = 0
    CONST = 1
    ADD = 2
    SUB = 3
    MUL = 4
    DIV = 5
    NEG = 6
    EXP = 7
    LOG = 8
    POW = 9
    TANH = 10
    RELU = 11
    MAX2 = 12
    IDENTITY = 13
    LINEAR = 14


ARITY = {
    Op.INPUT: 0, Op.CONST: 0,
    Op.ADD: 2, Op.SUB: 2, Op.MUL: 2, Op.DIV: 2, Op.POW: 2, Op.MAX2: 2,
    Op.NEG: 1, Op.EXP: 1, Op.LOG: 1, Op.TANH: 1, Op.RELU: 1, Op.IDENTITY: 1,
    Op.LINEAR: -1,  # one or two parents
}


class DomainError(ArithmeticError):
    """A primitive was evaluated outside its domain."""

    def __init__(self, node_id: int, op: Op, message: str):
        super().__init__(f"node {node_id} ({op.name}): {message}")
        self.node_id = node_id
        self.op = op


def evaluate(op: Op, a, b, c0, c1):
    """Return ``(value, d_value/d_a, d_value/d_b, bad)`` for a block.

    ``a``/``b`` are parent values (``b`` ignored for unary ops), ``c0``/``c1``
    the LINEAR coefficients. ``bad`` is a boolean mask of domain violations
    or ``None``.
    """
    zeros = np.zeros_like(a)
    bad = None
    if op == Op.ADD:
        return a + b, np.ones_like(a), np.ones_like(a), None
    if op == Op.SUB:
        return a - b, np.ones_like(a), -np.ones_like(a), None
    if op == Op.MUL:
        return a * b, b.copy(), a.copy(), None
    if op == Op.DIV:
        bad = b == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / b
            return a * inv, inv, -a * inv * inv, bad
    if op == Op.NEG:
        return -a, -np.ones_like(a), zeros, None
    if op == Op.EXP:
        v = np.exp(a)
        return v, v.copy(), zeros, None
    if op == Op.LOG:
        bad = a <= 0
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a), 1.0 / a, zeros, bad
    if op == Op.POW:
        # base must be positive so that d/d(exponent) = x^y log x exists
        bad = a <= 0
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.power(a, b)
            return v, b * np.power(a, b - 1.0), v * np.log(a), bad
    if op == Op.TANH:
        v = np.tanh(a)
        return v, 1.0 - v * v, zeros, None
    if op == Op.RELU:
        gate = (a > 0).astype(float)
        return a * gate, gate, zeros, None
    if op == Op.MAX2:
        first = (a >= b).astype(float)
        return np.where(a >= b, a, b), first, 1.0 - first, None
    if op == Op.IDENTITY:
        return a.copy(), np.ones_like(a), zeros, None
    if op == Op.LINEAR:
        return c0 * a + c1 * b, np.asarray(c0, float) * np.ones_like(a), \
            np.asarray(c1, float) * np.ones_like(a), None
    raise ValueError(f"{op!r} has no evaluation rule")
