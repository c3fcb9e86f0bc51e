"""Brute-force reference: enumerate Bauer paths and evaluate statistics directly.

Nothing here uses the dynamic program in :mod:`semibackprop.tape`; paths are
listed one by one and their products multiplied out, so agreement with
``backprop`` is a genuine cross-check. Cost is exponential in depth, hence
the explicit path cap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .semiring import Entropy, LogEntropy, MaxProduct, Semiring, SumProduct
from .primitives import Op
from .tape import PathWitness, Tape

DEFAULT_PATH_CAP = 100_000


class PathCapExceeded(RuntimeError):
    pass


@dataclass
class PathSet:
    source: int
    paths: list[PathWitness]

    @property
    def products(self) -> np.ndarray:
        return np.array([p.value for p in self.paths], dtype=float)

    def __len__(self) -> int:
        return len(self.paths)


@dataclass
class OracleStat:
    value: float
    payload: object = None  # the statistic in semiring form, e.g. (Z, S)
    witness: PathWitness | None = None
    defined: bool = True


def _children(tape: Tape, upto: int) -> list[list[tuple[int, int]]]:
    kids: list[list[tuple[int, int]]] = [[] for _ in range(upto + 1)]
    par = tape.parents
    for c in range(upto + 1):
        for k in (0, 1):
            p = par[c, k]
            if p >= 0:
                kids[p].append((c, k))
    return kids


def enumerate_paths(tape: Tape, source: int, cap: int = DEFAULT_PATH_CAP) -> PathSet:
    """All directed paths ``source -> output`` with their edge-partial products."""
    out = tape.output
    if out is None:
        raise ValueError("tape has no output node")
    kids = _children(tape, out)
    w = tape.partials
    paths: list[PathWitness] = []
    if source > out:
        return PathSet(source, paths)
    if source == out:
        return PathSet(source, [PathWitness(source, [], 1.0)])

    stack = [(source, [], 1.0)]
    while stack:
        node, edges, prod = stack.pop()
        for c, k in reversed(kids[node]):
            e = edges + [(c, node, k)]
            g = prod * float(w[c, k])
            if c == out:
                paths.append(PathWitness(source, e, g))
                if len(paths) > cap:
                    raise PathCapExceeded(f"more than {cap} paths from node {source}")
            else:
                stack.append((c, e, g))
    return PathSet(source, paths)


def count_paths(tape: Tape, source: int) -> int:
    """Number of Bauer paths (computed by counting DP, not enumeration)."""
    out = tape.output
    counts = np.zeros(out + 1, dtype=object)
    counts[out] = 1
    par = tape.parents
    for c in range(out, -1, -1):
        for k in (0, 1):
            p = par[c, k]
            if p >= 0:
                counts[p] += counts[c]
    return int(counts[source]) if source <= out else 0


def oracle_statistic(paths: PathSet, semiring: Semiring) -> OracleStat:
    g = paths.products
    if isinstance(semiring, SumProduct):
        v = math.fsum(g)
        return OracleStat(v, v)
    if isinstance(semiring, MaxProduct):
        if len(g) == 0:
            return OracleStat(-math.inf, semiring.zero, None, defined=False)
        best = int(np.argmax(g))
        return OracleStat(float(g[best]), (float(g.max()), float(g.min())), paths.paths[best])
    if isinstance(semiring, (Entropy, LogEntropy)):
        a = np.abs(g)
        z = math.fsum(a)
        s = math.fsum(x * math.log(x) for x in a if x > 0)
        if z == 0.0:
            return OracleStat(0.0, (0.0, 0.0), defined=False)
        p = a[a > 0] / z
        h = -math.fsum(p * np.log(p))
        return OracleStat(h, (z, s))
    raise TypeError(f"no oracle for {semiring!r}")


def finite_difference_grad(
    f: Tape | Callable[[np.ndarray], float],
    inputs: Sequence[float] | np.ndarray | None = None,
    step: float = 1e-5,
    wrt: Sequence[int] | None = None,
) -> np.ndarray:
    """Central differences ``(f(x+h) - f(x-h)) / 2h``.

    ``f`` is a callable on a vector or an evaluated :class:`Tape`. For a tape,
    ``inputs`` defaults to its current input values and ``wrt`` selects
    input node ids (default: all inputs); the tape is restored afterwards.
    Entries whose evaluations are not finite come back as NaN.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(f, Tape):
        tape = f
        ids = tape.input_ids
        base = tape.values[ids].copy() if inputs is None else np.asarray(inputs, float)
        pos = {int(i): j for j, i in enumerate(ids)}
        cols = [pos[int(i)] for i in (ids if wrt is None else wrt)]

        def fn(x):
            try:
                return tape.forward(x)
            except ArithmeticError:
                return math.nan

        try:
            grad = _central(fn, base, cols, step)
        finally:
            tape.forward(base)
        return grad
    x = np.asarray(inputs, dtype=float)
    cols = range(len(x)) if wrt is None else wrt
    return _central(f, x, list(cols), step)


def _central(fn, x: np.ndarray, cols, step: float) -> np.ndarray:
    grad = np.empty(len(cols))
    for j, c in enumerate(cols):
        xp = x.copy()
        xm = x.copy()
        xp[c] += step
        xm[c] -= step
        fp, fm = fn(xp), fn(xm)
        grad[j] = (fp - fm) / (2 * step) if np.isfinite(fp) and np.isfinite(fm) else math.nan
    return grad


# -- random tapes and whole-tape comparison ----------------------------------------

DYADIC_WEIGHTS = (-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0)


def random_linear_tape(rng: np.random.Generator, max_nodes: int = 14, max_paths: int = 500,
                       weights: Sequence[float] = DYADIC_WEIGHTS) -> Tape:
    """A random LINEAR-node tape whose edge partials are drawn from ``weights``.

    Redraws until the output has at most ``max_paths`` paths from every node.
    """
    while True:
        n = int(rng.integers(2, max_nodes + 1))
        n_in = int(rng.integers(1, min(3, n - 1) + 1))
        tape = Tape(capacity=n)
        tape.input(rng.uniform(-1, 1, n_in))
        for i in range(n_in, n):
            k = 1 if i == 1 or rng.random() < 0.3 else 2
            parents = rng.choice(i, size=k, replace=False)
            coef = tuple(float(c) for c in rng.choice(weights, size=2))
            tape.scalar(Op.LINEAR, *map(int, parents), coef=coef if k == 2 else (coef[0], 0.0))
        tape.set_output(n - 1)
        if max(count_paths(tape, s) for s in range(n)) <= max_paths:
            return tape


def _close(a: float, b: float, rtol: float) -> bool:
    if a == b:
        return True
    return abs(a - b) <= rtol * max(abs(a), abs(b))


def compare_with_oracle(tape: Tape, rtol: float = 1e-9, entropy_atol: float = 1e-6,
                        cap: int = DEFAULT_PATH_CAP) -> list[str]:
    """Check every semiring's backprop against path enumeration at every node.

    Returns a list of human-readable mismatches (empty when all agree).
    Max-product witnesses are also replayed.
    """
    from .semiring import ENTROPY, LOG_ENTROPY, MAX_PRODUCT, SUM_PRODUCT
    from .tape import backprop, witness_path

    stores = {sr.name: backprop(tape, sr) for sr in (SUM_PRODUCT, MAX_PRODUCT, ENTROPY, LOG_ENTROPY)}
    bad = []
    for v in range(tape.output + 1):
        paths = enumerate_paths(tape, v, cap)
        s = oracle_statistic(paths, SUM_PRODUCT).value
        if not _close(stores["sum"].statistic(v), s, rtol):
            bad.append(f"node {v}: sum {stores['sum'].statistic(v)} vs {s}")
        m = oracle_statistic(paths, MAX_PRODUCT).value
        got = stores["max"].statistic(v)
        if not _close(got, m, rtol):
            bad.append(f"node {v}: max {got} vs {m}")
        elif len(paths):
            w = witness_path(stores["max"], v)
            if not _close(w.replay(tape), got, rtol):
                bad.append(f"node {v}: witness replays to {w.replay(tape)}, max is {got}")
        h = oracle_statistic(paths, ENTROPY)
        for name in ("entropy", "log-entropy"):
            sr = stores[name].semiring
            got_h, ok = sr.finalize_checked(stores[name][v])
            if ok != h.defined or (ok and abs(got_h - h.value) > entropy_atol):
                bad.append(f"node {v}: {name} {got_h} ({ok}) vs {h.value} ({h.defined})")
    return bad
