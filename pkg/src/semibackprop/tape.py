"""Scalar computation graph with eager forward evaluation and semiring backprop.

Nodes live in flat numpy arrays in tape (topological) order. Nodes are
appended in *blocks*: a block is a run of nodes with the same primitive
none of which depends on another node of the same block, so a block can be
evaluated, and back-propagated through, with one array operation. A single
scalar append is just a block of length one.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .primitives import ARITY, DomainError, Op, evaluate
from .semiring import Semiring

log = logging.getLogger(__name__)

FORMAT_NAME = "semibackprop-tape"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Node:
    id: int
    op: Op
    parents: tuple[int, ...]
    value: float
    partials: tuple[float, ...]


class Tape:
    """Append-only record of scalar nodes."""

    def __init__(self, capacity: int = 1024):
        self.n = 0
        self._op = np.zeros(capacity, dtype=np.int8)
        self._parents = np.full((capacity, 2), -1, dtype=np.int64)
        self._values = np.zeros(capacity)
        self._partials = np.zeros((capacity, 2))
        self._coef = np.zeros((capacity, 2))
        self.blocks: list[tuple[int, int]] = []
        self._inputs: list[np.ndarray] = []
        self.output: int | None = None
        self.evaluated = True

    # -- storage -----------------------------------------------------------

    def _reserve(self, k: int) -> None:
        need = self.n + k
        cap = len(self._op)
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        self._op = _grow(self._op, cap, 0)
        self._parents = _grow(self._parents, cap, -1)
        self._values = _grow(self._values, cap, 0.0)
        self._partials = _grow(self._partials, cap, 0.0)
        self._coef = _grow(self._coef, cap, 0.0)

    def __len__(self) -> int:
        return self.n

    @property
    def ops(self) -> np.ndarray:
        return self._op[: self.n]

    @property
    def parents(self) -> np.ndarray:
        return self._parents[: self.n]

    @property
    def values(self) -> np.ndarray:
        return self._values[: self.n]

    @property
    def partials(self) -> np.ndarray:
        return self._partials[: self.n]

    @property
    def input_ids(self) -> np.ndarray:
        if not self._inputs:
            return np.zeros(0, dtype=np.int64)
        if len(self._inputs) > 1:
            self._inputs = [np.concatenate(self._inputs)]
        return self._inputs[0]

    @property
    def num_edges(self) -> int:
        return int((self.parents >= 0).sum())

    def node(self, i: int) -> Node:
        if not 0 <= i < self.n:
            raise IndexError(f"node {i} not on tape of {self.n} nodes")
        par = tuple(int(p) for p in self._parents[i] if p >= 0)
        return Node(
            id=i,
            op=Op(int(self._op[i])),
            parents=par,
            value=float(self._values[i]),
            partials=tuple(float(w) for w in self._partials[i, : len(par)]),
        )

    def __iter__(self):
        return (self.node(i) for i in range(self.n))

    # -- construction ------------------------------------------------------

    def input(self, values) -> np.ndarray:
        """Append input (source) nodes holding ``values``; returns their ids."""
        values = np.atleast_1d(np.asarray(values, dtype=float)).ravel()
        ids = self._append_leaves(Op.INPUT, values)
        self._inputs.append(ids)
        return ids

    def const(self, values) -> np.ndarray:
        values = np.atleast_1d(np.asarray(values, dtype=float)).ravel()
        return self._append_leaves(Op.CONST, values)

    def _append_leaves(self, op: Op, values: np.ndarray) -> np.ndarray:
        k = len(values)
        self._reserve(k)
        s = self.n
        self._op[s : s + k] = op
        self._values[s : s + k] = values
        self.n += k
        self.blocks.append((s, s + k))
        return np.arange(s, s + k)

    def apply(self, op: Op, a, b=None, coef=None) -> np.ndarray:
        """Append one block of ``op`` nodes with parents ``a`` (and ``b``).

        ``a``/``b`` are id arrays of equal length; ``coef`` is the pair of
        LINEAR coefficients (scalars or arrays). Values and partials are
        evaluated immediately.
        """
        op = Op(op)
        a = np.atleast_1d(np.asarray(a, dtype=np.int64)).ravel()
        arity = ARITY[op]
        if arity == 0:
            raise ValueError(f"{op.name} nodes are created with input()/const()")
        if arity == 2 and b is None:
            raise ValueError(f"{op.name} takes two parents")
        if arity == 1 and b is not None:
            raise ValueError(f"{op.name} takes one parent")
        if b is not None:
            b = np.atleast_1d(np.asarray(b, dtype=np.int64)).ravel()
            if len(b) != len(a):
                raise ValueError("parent arrays differ in length")
        k = len(a)
        if k == 0:
            return np.zeros(0, dtype=np.int64)
        s = self.n
        hi = max(a.max(), b.max() if b is not None else -1)
        if a.min() < 0 or (b is not None and b.min() < 0) or hi >= s:
            raise ValueError("parents must already be on the tape")
        if op == Op.LINEAR:
            if coef is None:
                raise ValueError("LINEAR needs coefficients")
            c0 = np.broadcast_to(np.asarray(coef[0], float), (k,))
            c1 = np.broadcast_to(np.asarray(coef[1] if b is not None else 0.0, float), (k,))
        else:
            c0 = c1 = np.zeros(k)
        self._reserve(k)
        self._op[s : s + k] = op
        self._parents[s : s + k, 0] = a
        if b is not None:
            self._parents[s : s + k, 1] = b
        self._coef[s : s + k, 0] = c0
        self._coef[s : s + k, 1] = c1
        self.n += k
        self.blocks.append((s, s + k))
        self._eval_block(s, s + k)
        return np.arange(s, s + k)

    def scalar(self, op: Op, *parents: int, coef=None) -> int:
        """Append a single primitive node; returns its id."""
        a = parents[0]
        b = parents[1] if len(parents) > 1 else None
        return int(self.apply(op, [a], None if b is None else [b], coef=coef)[0])

    def set_output(self, node_id: int) -> None:
        if not 0 <= node_id < self.n:
            raise IndexError(f"output {node_id} not on tape")
        self.output = int(node_id)

    # -- evaluation --------------------------------------------------------

    def _eval_block(self, s: int, e: int) -> None:
        op = Op(int(self._op[s]))
        if op in (Op.INPUT, Op.CONST):
            return
        par = self._parents[s:e]
        a = self._values[par[:, 0]]
        has_b = par[:, 1] >= 0
        b = np.where(has_b, self._values[np.maximum(par[:, 1], 0)], 0.0)
        v, d0, d1, bad = evaluate(op, a, b, self._coef[s:e, 0], self._coef[s:e, 1])
        if bad is not None and bad.any():
            first = s + int(np.argmax(bad))
            raise DomainError(first, op, "argument outside the primitive's domain")
        self._values[s:e] = v
        self._partials[s:e, 0] = d0
        self._partials[s:e, 1] = np.where(has_b, d1, 0.0)

    def forward(self, input_values=None) -> float | None:
        """Re-evaluate every node in tape order.

        ``input_values`` is either a mapping from input id to value or a
        sequence aligned with :attr:`input_ids`; omitted means keep the
        current input values. Returns the output value (if an output is set).
        """
        ids = self.input_ids
        if input_values is not None:
            if isinstance(input_values, Mapping):
                missing = [int(i) for i in ids if int(i) not in input_values]
                if missing:
                    raise ValueError(f"missing values for input nodes {missing[:10]}")
                vals = np.array([input_values[int(i)] for i in ids], dtype=float)
            else:
                vals = np.asarray(input_values, dtype=float).ravel()
                if len(vals) != len(ids):
                    raise ValueError(f"expected {len(ids)} input values, got {len(vals)}")
            self._values[ids] = vals
        for s, e in self.blocks:
            self._eval_block(s, e)
        self.evaluated = True
        return None if self.output is None else float(self._values[self.output])

    def value(self, node_id) -> float | np.ndarray:
        if np.ndim(node_id) == 0:
            return float(self._values[node_id])
        return self._values[np.asarray(node_id)]

    # -- serialization -----------------------------------------------------

    def dump(self, fh) -> None:
        """Write the tape as line-delimited JSON: one header, one line per node."""
        header = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "nodes": self.n,
            "output": self.output,
            "inputs": [int(i) for i in self.input_ids],
            "blocks": [s for s, _ in self.blocks],
        }
        fh.write(json.dumps(header) + "\n")
        for i in range(self.n):
            node = self.node(i)
            rec = {
                "id": i,
                "op": node.op.name,
                "parents": list(node.parents),
                "value": node.value,
                "partials": list(node.partials),
            }
            if node.op == Op.LINEAR:
                rec["coef"] = [float(c) for c in self._coef[i, : len(node.parents)]]
            fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, fh) -> "Tape":
        lines = iter(fh)
        try:
            header = json.loads(next(lines))
        except StopIteration:
            raise ValueError("empty tape file") from None
        if header.get("format") != FORMAT_NAME:
            raise ValueError(f"not a tape file (format={header.get('format')!r})")
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported tape version {header.get('version')}")
        n = int(header["nodes"])
        tape = cls(capacity=max(n, 1))
        for lineno, line in enumerate(lines, start=2):
            rec = json.loads(line)
            i = rec["id"]
            if i != tape.n:
                raise ValueError(f"line {lineno}: expected node {tape.n}, got {i}")
            par = rec["parents"]
            if any(p >= i or p < 0 for p in par):
                raise ValueError(f"line {lineno}: parents {par} not before node {i}")
            tape._op[i] = Op[rec["op"]]
            tape._parents[i, : len(par)] = par
            tape._values[i] = rec["value"]
            tape._partials[i, : len(par)] = rec["partials"]
            if "coef" in rec:
                tape._coef[i, : len(par)] = rec["coef"]
            tape.n += 1
        if tape.n != n:
            raise ValueError(f"header declares {n} nodes, file has {tape.n}")
        starts = header.get("blocks") or list(range(n))
        ends = list(starts[1:]) + [n]
        tape.blocks = [(s, e) for s, e in zip(starts, ends) if e > s]
        tape._inputs = [np.asarray(header["inputs"], dtype=np.int64)]
        tape.output = header["output"]
        tape.evaluated = True  # values and partials come from the file
        return tape


def _grow(arr: np.ndarray, cap: int, fill) -> np.ndarray:
    out = np.full((cap,) + arr.shape[1:], fill, dtype=arr.dtype)
    out[: len(arr)] = arr
    return out


# -- backpropagation ---------------------------------------------------------


@dataclass
class AdjointStore:
    """Per-node semiring adjoints of the tape output, plus op counters."""

    tape: Tape
    semiring: Semiring
    data: object
    oplus: int = 0
    otimes: int = 0
    diagnostics: list[str] = field(default_factory=list)
    generic: bool = False  # data is an object array of scalar payloads

    def __getitem__(self, node_id: int):
        if self.generic:
            return self.data[int(node_id)]
        return self.semiring.get(self.data, int(node_id))

    def statistic(self, node_id: int) -> float:
        return self.semiring.finalize(self[node_id])

    @property
    def num_ops(self) -> int:
        return self.oplus + self.otimes


def backprop(tape: Tape, semiring: Semiring, method: str = "vectorized") -> AdjointStore:
    """Semiring backpropagation from ``tape.output`` to every node.

    ``method="vectorized"`` processes the tape block by block with the
    semiring's array kernel; ``method="reference"`` is the literal
    node-by-node, edge-by-edge loop using only ``plus``/``times``/``lift``.
    """
    if tape.output is None:
        raise ValueError("tape has no output node")
    if not tape.evaluated:
        raise ValueError("tape must be evaluated (forward) before backprop")
    sr = semiring
    store = AdjointStore(tape, sr, None)
    w_all = tape.partials
    if not np.isfinite(w_all[tape.parents >= 0]).all():
        store.diagnostics.append("non-finite edge partials on tape")
        log.warning("non-finite edge partials on tape")

    if method == "reference":
        _backprop_reference(tape, store)
        return store
    if method != "vectorized":
        raise ValueError(f"unknown method {method!r}")
    store.data = sr.new_store(tape.n)
    sr.set_one(store.data, tape.output)

    par = tape.parents
    for s, e in reversed(tape.blocks):
        if s > tape.output:
            continue
        p = par[s:e]
        if p[0, 0] < 0:  # leaves
            continue
        e = min(e, tape.output + 1)
        p = p[: e - s]
        kids = np.arange(s, e)
        has_b = p[:, 1] >= 0
        if has_b.all():
            children = np.concatenate([kids, kids])
            parents = np.concatenate([p[:, 0], p[:, 1]])
            weights = np.concatenate([w_all[s:e, 0], w_all[s:e, 1]])
            argpos = np.repeat(np.array([0, 1], dtype=np.int8), len(kids))
        elif not has_b.any():
            children, parents, weights = kids, p[:, 0], w_all[s:e, 0]
            argpos = np.zeros(len(kids), dtype=np.int8)
        else:
            kb = kids[has_b]
            children = np.concatenate([kids, kb])
            parents = np.concatenate([p[:, 0], p[has_b, 1]])
            weights = np.concatenate([w_all[s:e, 0], w_all[s:e, 1][has_b]])
            argpos = np.concatenate([np.zeros(len(kids), np.int8), np.ones(len(kb), np.int8)])
        sr.accumulate(store.data, children, parents, weights, argpos)
        store.otimes += len(children)
        store.oplus += len(children)
    return store


def _backprop_reference(tape: Tape, store: AdjointStore) -> None:
    sr = store.semiring
    B = Semiring.new_store(sr, tape.n)
    B[tape.output] = sr.one
    par, w = tape.parents, tape.partials
    for v in range(tape.output, -1, -1):
        for k in (0, 1):
            u = par[v, k]
            if u < 0:
                continue
            contrib = sr.times(sr.lift(w[v, k]), B[v])
            B[u] = sr.plus(B[u], contrib)
            store.otimes += 1
            store.oplus += 1
    store.data = B
    store.generic = True


# -- queries over an adjoint store ------------------------------------------


def aggregated_derivative(store: AdjointStore, node_set: Iterable[int]):
    """(+)-combine the adjoints of ``node_set``.

    Equivalent to a dummy source with unit-weight edges into every node of
    the set. Finalize (e.g. entropy) only after aggregating.
    """
    sr = store.semiring
    acc = sr.zero
    empty = True
    for i in node_set:
        empty = False
        acc = sr.plus(acc, store[int(i)])
    if empty:
        store.diagnostics.append("aggregated derivative over an empty node set")
        log.debug("aggregated derivative over an empty node set")
    return acc


@dataclass
class PathWitness:
    """Edges ``(child, parent, argpos)`` from a source to the output, in path order."""

    source: int
    edges: list[tuple[int, int, int]]
    value: float

    def __len__(self) -> int:
        return len(self.edges)

    def nodes(self) -> list[int]:
        if not self.edges:
            return []
        return [self.edges[0][1]] + [c for c, _, _ in self.edges]

    def replay(self, tape: Tape) -> float:
        """Product of edge partials along the path."""
        prod = 1.0
        for c, _, k in self.edges:
            prod *= float(tape.partials[c, k])
        return prod


def witness_path(store: AdjointStore, source: int) -> PathWitness:
    """Follow max-product back-pointers from ``source`` to the output.

    The walk starts on the ``top_pos`` chain and switches chain whenever it
    crosses a negative edge, so the replayed product equals the reported
    maximum. An unreachable source yields an empty witness with value -inf.
    """
    data = store.data
    if not hasattr(data, "pos_ptr"):
        raise TypeError("witness paths need an adjoint store from MaxProduct")
    tape = store.tape
    source = int(source)
    value = float(data.pos[source])
    if value == -np.inf:
        return PathWitness(source, [], value)
    edges = []
    node, on_pos = source, True
    while node != tape.output:
        code = int(data.pos_ptr[node] if on_pos else data.neg_ptr[node])
        if code < 0:
            return PathWitness(source, [], -np.inf)
        child, arg = divmod(code, 2)
        edges.append((int(child), node, int(arg)))
        if tape.partials[child, arg] < 0:
            on_pos = not on_pos
        node = int(child)
    return PathWitness(source, edges, value)
