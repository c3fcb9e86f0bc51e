"""Shared tape fixtures."""
from semibackprop.primitives import Op
from semibackprop.tape import Tape


def example_tape(x=1.0, y=2.0) -> Tape:
    """f(x, y) = exp(x) + (x - y) * y, one node per primitive."""
    t = Tape()
    x0, x1 = (int(i) for i in t.input([x, y]))
    x2 = t.scalar(Op.EXP, x0)
    x3 = t.scalar(Op.SUB, x0, x1)
    x4 = t.scalar(Op.MUL, x1, x3)
    x5 = t.scalar(Op.ADD, x2, x4)
    t.set_output(x5)
    return t


import numpy as np

from semibackprop.oracle import finite_difference_grad
from semibackprop.semiring import SUM_PRODUCT
from semibackprop.tape import backprop

UNARY = (Op.NEG, Op.EXP, Op.LOG, Op.TANH, Op.RELU, Op.IDENTITY)
BINARY = (Op.ADD, Op.SUB, Op.MUL, Op.DIV, Op.POW, Op.MAX2, Op.LINEAR)
MARGIN = 0.05  # keep clear of kinks and domain edges so finite differences are meaningful


def _safe(op, a, b):
    if op == Op.EXP:
        return a < 4
    if op == Op.LOG:
        return a > 0.1
    if op == Op.RELU:
        return abs(a) > MARGIN
    if op == Op.DIV:
        return abs(b) > 0.2
    if op == Op.POW:
        return 0.1 < a < 10 and abs(b) < 2.5
    if op == Op.MAX2:
        return abs(a - b) > MARGIN
    return True


def random_composition(rng, n_inputs=3, n_nodes=12) -> Tape:
    """A random tape over every primitive, built away from kinks and domain edges."""
    t = Tape()
    t.input(rng.uniform(0.5, 1.5, n_inputs))
    t.const([0.5])
    for _ in range(n_nodes):
        ids = np.arange(len(t))
        for _attempt in range(20):
            op = rng.choice(UNARY + BINARY)
            a = int(rng.choice(ids))
            b = int(rng.choice(ids))
            va, vb = t.value(a), t.value(b)
            if _safe(op, va, vb):
                break
        else:
            op = Op.IDENTITY
        if op in UNARY:
            i = t.scalar(op, a)
        elif op == Op.LINEAR:
            i = t.scalar(op, a, b, coef=tuple(rng.uniform(-2, 2, 2)))
        else:
            i = t.scalar(op, a, b)
        if not abs(t.value(i)) < 1e3:
            raise RuntimeError("unexpected blow-up")
    # fold the last few nodes so most of the tape reaches the output
    tail = list(range(len(t) - 4, len(t)))
    acc = tail[0]
    for i in tail[1:]:
        acc = t.scalar(Op.ADD, acc, i)
    t.set_output(acc)
    return t


def gradient_mismatch(tape, rtol=1e-5, step=1e-5) -> float:
    """Worst relative gap between sum-product adjoints and central differences of the inputs.

    Errors are scaled by ``max(|g|, 1e-3 * max|g|)`` so that entries that are
    essentially zero are compared against the gradient's overall size.
    """
    ids = tape.input_ids
    store = backprop(tape, SUM_PRODUCT)
    g = np.array([store.statistic(i) for i in ids])
    fd = finite_difference_grad(tape, step=step)
    scale = np.maximum(np.abs(g), 1e-3 * max(np.abs(g).max(), 1e-12))
    return float(np.max(np.abs(g - fd) / scale))
