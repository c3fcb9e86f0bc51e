"""Semirings for generalized backpropagation.

Each semiring exposes two faces:

* scalar algebra (``zero``, ``one``, ``plus``, ``times``, ``lift``,
  ``finalize``) over immutable payloads, used by the reference backward
  pass, aggregation and the property tests;
* array kernels (``new_store``, ``set_one``, ``accumulate``) used by the
  vectorized backward pass over a whole block of tape edges at once.

The base class implements the array kernels with a Python loop over the
scalar algebra, so a user-defined semiring only has to provide the scalar
face.
"""
from __future__ import annotations

import math
from typing import Any

import numpy as np

__all__ = [
    "Semiring",
    "SumProduct",
    "MaxProduct",
    "Entropy",
    "LogEntropy",
    "SUM_PRODUCT",
    "MAX_PRODUCT",
    "ENTROPY",
    "LOG_ENTROPY",
    "LogMaxProduct",
    "LOG_MAX_PRODUCT",
    "get_semiring",
    "xlogx",
]


def xlogx(x):
    """``x * log(x)`` with the convention ``0 log 0 = 0``; works on arrays."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    nz = x > 0
    out[nz] = x[nz] * np.log(x[nz])
    return out if out.ndim else float(out)


class Semiring:
    """Base semiring. Subclasses override the scalar algebra."""

    name = "semiring"
    zero: Any = None
    one: Any = None

    def plus(self, a, b):
        raise NotImplementedError

    def times(self, a, b):
        raise NotImplementedError

    def lift(self, w: float):
        raise NotImplementedError

    def finalize(self, v) -> float:
        return v

    def is_zero(self, v) -> bool:
        return v == self.zero

    # -- array kernels -----------------------------------------------------
    # The generic store is an object array of scalar payloads.

    def new_store(self, n: int):
        store = np.empty(n, dtype=object)
        store[:] = [self.zero] * n
        return store

    def set_one(self, store, idx: int) -> None:
        store[idx] = self.one

    def get(self, store, idx: int):
        return store[idx]

    def accumulate(self, store, children, parents, weights, argpos) -> None:
        """``B[u] <- B[u] (+) (lift(w) (x) B[v])`` for every edge ``v -> u``.

        Edges are visited in increasing ``(child, argpos)`` order.
        """
        order = np.lexsort((argpos, children))
        for e in order:
            v, u = int(children[e]), int(parents[e])
            store[u] = self.plus(store[u], self.times(self.lift(float(weights[e])), store[v]))

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class SumProduct(Semiring):
    """The real field ``(R, +, x, 0, 1)``; backprop computes the gradient."""

    name = "sum"
    zero = 0.0
    one = 1.0

    def plus(self, a, b):
        return a + b

    def times(self, a, b):
        return a * b

    def lift(self, w):
        return float(w)

    def new_store(self, n):
        return np.zeros(n)

    def set_one(self, store, idx):
        store[idx] = 1.0

    def get(self, store, idx):
        return float(store[idx])

    def accumulate(self, store, children, parents, weights, argpos):
        np.add.at(store, parents, weights * store[children])


class MaxStore:
    """Per-node ``top_pos``/``top_neg`` plus back-pointers.

    A pointer is encoded as ``2 * child + argpos``: the child node (and the
    argument slot of the edge into it) that contributed the value; -1 when
    none did.
    """

    __slots__ = ("pos", "neg", "pos_ptr", "neg_ptr")

    def __init__(self, n: int):
        self.pos = np.full(n, -np.inf)
        self.neg = np.full(n, np.inf)
        self.pos_ptr = np.full(n, -1, dtype=np.int64)
        self.neg_ptr = np.full(n, -1, dtype=np.int64)

    def __len__(self):
        return len(self.pos)


class MaxProduct(Semiring):
    """Signed max-product semiring.

    A payload is the pair ``(top_pos, top_neg)``: the largest and smallest
    path products seen so far. Tracking both is what keeps the maximum
    correct across negative edges, since multiplying by ``w < 0`` swaps the
    roles of the two. The empty path set is ``(-inf, +inf)``.
    """

    name = "max"
    zero = (-math.inf, math.inf)
    one = (1.0, 1.0)

    def is_zero(self, v):
        return v[0] == -math.inf

    def plus(self, a, b):
        return (max(a[0], b[0]), min(a[1], b[1]))

    def times(self, a, b):
        if self.is_zero(a) or self.is_zero(b):
            return self.zero
        prods = (a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1])
        return (max(prods), min(prods))

    def lift(self, w):
        w = float(w)
        return (w, w)

    def finalize(self, v):
        return v[0]

    def new_store(self, n):
        return MaxStore(n)

    def set_one(self, store, idx):
        store.pos[idx] = 1.0
        store.neg[idx] = 1.0

    def get(self, store, idx):
        return (float(store.pos[idx]), float(store.neg[idx]))

    def accumulate(self, store, children, parents, weights, argpos):
        live = store.pos[children] != -np.inf
        if not live.all():
            children, parents, weights, argpos = (
                children[live], parents[live], weights[live], argpos[live])
        if len(children) == 0:
            return
        cpos, cneg = store.pos[children], store.neg[children]
        nonneg = weights >= 0
        cand_pos = np.where(nonneg, weights * cpos, weights * cneg)
        cand_neg = np.where(nonneg, weights * cneg, weights * cpos)
        code = 2 * children + argpos
        self._merge(store.pos, store.pos_ptr, parents, cand_pos, code, np.maximum)
        self._merge(store.neg, store.neg_ptr, parents, cand_neg, code, np.minimum)

    @staticmethod
    def _merge(best, ptr, parents, cand, code, better):
        # Existing pointers come from later blocks (larger child ids), so on
        # a tie the new candidate wins; among new candidates the smallest
        # (child, argpos) code wins.
        better.at(best, parents, cand)
        hit = cand == best[parents]
        u = parents[hit]
        ptr[u] = np.iinfo(np.int64).max
        np.minimum.at(ptr, u, code[hit])


class Entropy(Semiring):
    """Expectation semiring over ``<a, b>`` pairs.

    Edge weights lift to ``<|w|, |w| log |w|>``; accumulated from a source
    this yields ``<Z, S>`` with ``Z = sum |g(p)|`` and
    ``S = sum |g(p)| log |g(p)|`` over paths, and the path entropy (nats) is
    ``log Z - S / Z``.
    """

    name = "entropy"
    zero = (0.0, 0.0)
    one = (1.0, 0.0)

    def is_zero(self, v):
        return v[0] == 0.0 and v[1] == 0.0

    def plus(self, a, b):
        return (a[0] + b[0], a[1] + b[1])

    def times(self, a, b):
        return (a[0] * b[0], a[0] * b[1] + a[1] * b[0])

    def lift(self, w):
        m = abs(float(w))
        return (m, xlogx(m))

    def finalize_checked(self, v) -> tuple[float, bool]:
        """Entropy in nats and whether it is defined (``Z > 0``)."""
        z, s = v
        if z <= 0.0:
            return 0.0, False
        return math.log(z) - s / z, True

    def finalize(self, v):
        return self.finalize_checked(v)[0]

    def new_store(self, n):
        return np.zeros((n, 2))

    def set_one(self, store, idx):
        store[idx] = (1.0, 0.0)

    def get(self, store, idx):
        return (float(store[idx, 0]), float(store[idx, 1]))

    def accumulate(self, store, children, parents, weights, argpos):
        m = np.abs(weights)
        a = store[children, 0]
        b = store[children, 1]
        np.add.at(store[:, 0], parents, a * m)
        np.add.at(store[:, 1], parents, a * xlogx(m) + b * m)


class LogEntropy(Semiring):
    """Log-domain expectation semiring.

    A payload ``<a, b>`` is stored as ``(l, r) = (log a, b / a)`` (``r = 0``
    when ``a = 0``). Products add both fields; sums take a logsumexp of ``l``
    and the ``exp(l)``-weighted mean of ``r``. Entropy is ``l - r``. Deep
    chains of small weights stay finite where the linear form underflows.
    """

    name = "log-entropy"
    zero = (-math.inf, 0.0)
    one = (0.0, 0.0)

    def is_zero(self, v):
        return v[0] == -math.inf

    def plus(self, a, b):
        if self.is_zero(a):
            return b
        if self.is_zero(b):
            return a
        m = max(a[0], b[0])
        wa, wb = math.exp(a[0] - m), math.exp(b[0] - m)
        tot = wa + wb
        return (m + math.log(tot), (wa * a[1] + wb * b[1]) / tot)

    def times(self, a, b):
        if self.is_zero(a) or self.is_zero(b):
            return self.zero
        return (a[0] + b[0], a[1] + b[1])

    def lift(self, w):
        m = abs(float(w))
        if m == 0.0:
            return self.zero
        lm = math.log(m)
        return (lm, lm)

    def finalize_checked(self, v) -> tuple[float, bool]:
        if self.is_zero(v):
            return 0.0, False
        return v[0] - v[1], True

    def finalize(self, v):
        return self.finalize_checked(v)[0]

    @staticmethod
    def from_linear(v):
        a, b = v
        if a == 0.0:
            return (-math.inf, 0.0)
        return (math.log(a), b / a)

    @staticmethod
    def to_linear(v):
        l, r = v
        if l == -math.inf:
            return (0.0, 0.0)
        a = math.exp(l)
        return (a, a * r)

    def new_store(self, n):
        store = np.zeros((n, 2))
        store[:, 0] = -np.inf
        return store

    def set_one(self, store, idx):
        store[idx] = (0.0, 0.0)

    def get(self, store, idx):
        return (float(store[idx, 0]), float(store[idx, 1]))

    def accumulate(self, store, children, parents, weights, argpos):
        m = np.abs(weights)
        live = (m > 0) & (store[children, 0] != -np.inf)
        if not live.any():
            return
        children, parents, m = children[live], parents[live], m[live]
        logw = np.log(m)
        cl = store[children, 0] + logw
        cr = store[children, 1] + logw
        touched, inv = np.unique(parents, return_inverse=True)
        old_l, old_r = store[touched, 0], store[touched, 1]
        top = old_l.copy()
        np.maximum.at(top, inv, cl)
        old_w = np.where(old_l == -np.inf, 0.0, np.exp(old_l - top))
        tot = old_w.copy()
        acc = old_w * old_r
        cw = np.exp(cl - top[inv])
        np.add.at(tot, inv, cw)
        np.add.at(acc, inv, cw * cr)
        store[touched, 0] = top + np.log(tot)
        store[touched, 1] = acc / tot


def _signed_key(x):
    s, l = x
    return (s, s * l if s else 0.0)


class LogMaxProduct(Semiring):
    """Max-product with each extreme held as ``(sign, log |value|)``.

    Same answers as :class:`MaxProduct` but products of many small or large
    partials neither underflow nor overflow. Uses the generic array kernel,
    so it is slower and keeps no back-pointers.
    """

    name = "log-max"
    _NEG_INF = (-1, math.inf)
    _POS_INF = (1, math.inf)
    zero = (_NEG_INF, _POS_INF)
    one = ((1, 0.0), (1, 0.0))

    def is_zero(self, v):
        return v[0] == self._NEG_INF

    def plus(self, a, b):
        return (max(a[0], b[0], key=_signed_key), min(a[1], b[1], key=_signed_key))

    def times(self, a, b):
        if self.is_zero(a) or self.is_zero(b):
            return self.zero
        prods = [(x[0] * y[0], x[1] + y[1]) for x in a for y in b]
        return (max(prods, key=_signed_key), min(prods, key=_signed_key))

    def lift(self, w):
        w = float(w)
        x = (int(np.sign(w)), math.log(abs(w)) if w else -math.inf)
        return (x, x)

    def finalize(self, v):
        s, l = v[0]
        return s * math.exp(l) if s else 0.0

    def finalize_log(self, v) -> tuple[int, float]:
        """``(sign, log |max|)`` of the top path; usable when :meth:`finalize` would underflow."""
        return v[0]


SUM_PRODUCT = SumProduct()
MAX_PRODUCT = MaxProduct()
ENTROPY = Entropy()
LOG_ENTROPY = LogEntropy()
LOG_MAX_PRODUCT = LogMaxProduct()

_BY_NAME = {s.name: s for s in (SUM_PRODUCT, MAX_PRODUCT, ENTROPY, LOG_ENTROPY, LOG_MAX_PRODUCT)}


def get_semiring(name: str) -> Semiring:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise ValueError(f"unknown semiring {name!r}; choose from {sorted(_BY_NAME)}") from None
