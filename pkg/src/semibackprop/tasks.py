"""Synthetic sequence-classification tasks.

Sequences are ``S`` tokens valued ``1..V``. Datasets are label-balanced by
drawing an equal quota of examples per class from class-conditional
samplers; every sampled example is re-labelled with :func:`label` before it
is accepted.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

KINDS = (
    "ContainsTokenSet",
    "Contains1",
    "FirstTokenRepeatedImmediately",
    "FirstTokenRepeatedLast",
    "AdjacentDuplicate",
    "FirstTokenRepeatedOnce",
    "BinCountOnes",
    "RandomLabels",
)

SCHEMA_NAME = "semibackprop-dataset"
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    seq_len: int = 10
    vocab_size: int = 20
    n: int = 10_000
    seed: int = 0
    num_classes: int = 2
    token_set: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.seq_len < 2 or self.vocab_size < 2 or self.n < 0:
            raise ValueError("need seq_len >= 2, vocab_size >= 2, n >= 0")
        if self.kind == "BinCountOnes":
            c, s = self.num_classes, self.seq_len
            if not 2 <= c <= s or s % c:
                raise ValueError(f"BinCountOnes needs 2 <= C <= S and C | S (C={c}, S={s})")
        elif self.kind == "RandomLabels":
            if self.num_classes < 2:
                raise ValueError("RandomLabels needs at least 2 classes")
        elif self.num_classes != 2:
            raise ValueError(f"{self.kind} is a binary task")
        if self.kind == "ContainsTokenSet":
            ts = self.token_set
            if not ts:
                raise ValueError("ContainsTokenSet needs a token set")
            if len(set(ts)) != len(ts) or min(ts) < 1 or max(ts) > self.vocab_size:
                raise ValueError(f"bad token set {ts}")
            if len(ts) > self.seq_len:
                raise ValueError("token set larger than the sequence length")
        if self.kind == "FirstTokenRepeatedOnce" and self.vocab_size < 2:
            raise ValueError("need at least 2 tokens")

    @property
    def name(self) -> str:
        if self.kind == "ContainsTokenSet":
            return f"ContainsTokenSet{{{','.join(map(str, self.token_set))}}}"
        if self.kind in ("BinCountOnes", "RandomLabels"):
            return f"{self.kind}{self.num_classes}"
        return self.kind

    def to_dict(self) -> dict:
        d = asdict(self)
        d["token_set"] = list(self.token_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["token_set"] = tuple(d.get("token_set", ()))
        return cls(**d)


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    label: int


def bin_count_ones_label(count: int, seq_len: int, num_classes: int) -> int:
    width = seq_len // num_classes
    # ceil(count / width) - 1, with zero ones falling into class 0
    return max(0, -(-count // width) - 1)


def label(spec: DatasetSpec, tokens: Sequence[int]) -> int:
    """Class index of ``tokens`` under ``spec``'s labelling rule."""
    x = list(tokens)
    kind = spec.kind
    if kind == "ContainsTokenSet":
        return int(set(spec.token_set) <= set(x))
    if kind == "Contains1":
        return int(1 in x)
    if kind == "FirstTokenRepeatedImmediately":
        return int(x[0] == x[1])
    if kind == "FirstTokenRepeatedLast":
        return int(x[0] == x[-1])
    if kind == "AdjacentDuplicate":
        return int(any(a == b for a, b in zip(x, x[1:])))
    if kind == "FirstTokenRepeatedOnce":
        return int(x[0] in x[1:])
    if kind == "BinCountOnes":
        return bin_count_ones_label(x.count(1), spec.seq_len, spec.num_classes)
    raise ValueError(f"{kind} has no labelling function of the tokens")


# -- class-conditional samplers ------------------------------------------------


def _draw(rng, S, V, exclude=()):
    allowed = np.setdiff1d(np.arange(1, V + 1), np.asarray(exclude, dtype=int))
    return rng.choice(allowed, size=S)


def _sample(spec: DatasetSpec, y: int, rng: np.random.Generator) -> list[int]:
    S, V, kind = spec.seq_len, spec.vocab_size, spec.kind
    if kind == "Contains1":
        if y:
            x = rng.integers(1, V + 1, size=S)
            x[rng.integers(S)] = 1
            return x.tolist()
        return _draw(rng, S, V, [1]).tolist()
    if kind == "ContainsTokenSet":
        ts = list(spec.token_set)
        if y:
            x = rng.integers(1, V + 1, size=S)
            x[rng.choice(S, size=len(ts), replace=False)] = ts
            return x.tolist()
        return _draw(rng, S, V, [ts[rng.integers(len(ts))]]).tolist()
    if kind == "FirstTokenRepeatedImmediately":
        x = rng.integers(1, V + 1, size=S)
        x[1] = x[0] if y else _draw(rng, 1, V, [x[0]])[0]
        return x.tolist()
    if kind == "FirstTokenRepeatedLast":
        x = rng.integers(1, V + 1, size=S)
        x[-1] = x[0] if y else _draw(rng, 1, V, [x[0]])[0]
        return x.tolist()
    if kind == "AdjacentDuplicate":
        x = [int(rng.integers(1, V + 1))]
        for _ in range(S - 1):
            x.append(int(_draw(rng, 1, V, [x[-1]])[0]))
        if y:
            i = int(rng.integers(S - 1))
            x[i + 1] = x[i]
        return x
    if kind == "FirstTokenRepeatedOnce":
        first = int(rng.integers(1, V + 1))
        rest = _draw(rng, S - 1, V, [first])
        if y:
            rest[rng.integers(S - 1)] = first
        return [first] + rest.tolist()
    if kind == "BinCountOnes":
        width = S // spec.num_classes
        lo, hi = (0, width) if y == 0 else (y * width + 1, (y + 1) * width)
        k = int(rng.integers(lo, hi + 1))
        x = _draw(rng, S, V, [1])
        x[rng.choice(S, size=k, replace=False)] = 1
        return x.tolist()
    if kind == "RandomLabels":
        return rng.integers(1, V + 1, size=S).tolist()
    raise ValueError(kind)


def generate(spec: DatasetSpec) -> list[Example]:
    """``spec.n`` labelled examples, balanced across classes, shuffled."""
    rng = np.random.default_rng(spec.seed)
    C = spec.num_classes
    quotas = [spec.n // C + (1 if c < spec.n % C else 0) for c in range(C)]
    out = []
    for y, q in enumerate(quotas):
        for _ in range(q):
            x = _sample(spec, y, rng)
            if spec.kind != "RandomLabels":
                got = label(spec, x)
                if got != y:
                    raise AssertionError(f"sampler for {spec.name} produced class {got}, wanted {y}")
            out.append(Example(tuple(int(t) for t in x), y))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def split(examples: Sequence[Example], train_frac: float = 0.9, seed: int = 0):
    """Shuffle deterministically and split into (train, validation)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    cut = int(round(train_frac * len(examples)))
    return [examples[i] for i in order[:cut]], [examples[i] for i in order[cut:]]


def as_arrays(examples: Sequence[Example]) -> tuple[np.ndarray, np.ndarray]:
    if not examples:
        return np.zeros((0, 0), dtype=np.int64), np.zeros(0, dtype=np.int64)
    X = np.array([e.tokens for e in examples], dtype=np.int64)
    y = np.array([e.label for e in examples], dtype=np.int64)
    return X, y


def threshold_features(n: int, n_features: int = 4, seed: int = 0, threshold: float = 0.5):
    """Uniform ``[0, 1]`` features labelled by whether the first exceeds ``threshold``."""
    rng = np.random.default_rng(seed)
    X = rng.random((n, n_features))
    return X, (X[:, 0] > threshold).astype(np.int64)


# -- serialization ----------------------------------------------------------------


class DatasetFormatError(ValueError):
    pass


def dump(spec: DatasetSpec, examples: Iterable[Example], fh) -> None:
    fh.write(json.dumps({"schema": SCHEMA_NAME, "version": SCHEMA_VERSION, "spec": spec.to_dict()}) + "\n")
    for ex in examples:
        fh.write(json.dumps({"tokens": list(ex.tokens), "label": ex.label}) + "\n")


def load(fh, expected: DatasetSpec | None = None) -> tuple[DatasetSpec, list[Example]]:
    lines = iter(fh)
    try:
        first = next(lines)
    except StopIteration:
        raise DatasetFormatError("line 1: missing header") from None
    try:
        header = json.loads(first)
        if header["schema"] != SCHEMA_NAME:
            raise DatasetFormatError(f"line 1: unexpected schema {header['schema']!r}")
        if header["version"] != SCHEMA_VERSION:
            raise DatasetFormatError(f"line 1: unsupported version {header['version']}")
        spec = DatasetSpec.from_dict(header["spec"])
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"line 1: bad header ({exc})") from exc
    if expected is not None and spec != expected:
        raise DatasetFormatError(f"header spec {spec} does not match requested {expected}")
    out = []
    for lineno, line in enumerate(lines, start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            toks = tuple(int(t) for t in rec["tokens"])
            y = int(rec["label"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"line {lineno}: malformed record ({exc})") from exc
        if len(toks) != spec.seq_len:
            raise DatasetFormatError(f"line {lineno}: expected {spec.seq_len} tokens, got {len(toks)}")
        out.append(Example(toks, y))
    return spec, out
