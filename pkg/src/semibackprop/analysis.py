"""Experiment procedures over trained models.

Branch attribution reads max-product adjoints at the point where each
layer's hidden state fans out into skip, keys, values and queries. Input
entropy aggregates log-domain expectation-semiring adjoints over each
token's embedding nodes. MDL is prequential (online) coding over doubling
training prefixes. :func:`write_report` turns all of it into deterministic
CSV/JSON files.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tasks
from .models import BRANCHES, build, output_scalar_for_analysis, runner_up
from .primitives import Op
from .semiring import LOG_ENTROPY, MAX_PRODUCT
from .tape import aggregated_derivative, backprop
from .training import TrainConfig, TrainingDiverged, init_params, predict_logits, summed_loss, train

log = logging.getLogger(__name__)

ATTENTION_BRANCHES = ("keys", "values", "queries")


def _analysis_tape(cfg, params, x, true_class: int, scale: float = 1.0):
    built = build(cfg, params, x)
    z = built.logits.values(built.tape)
    other = runner_up(z, true_class)
    out = output_scalar_for_analysis(built.tape, built.logits, true_class, other)
    if scale != 1.0:
        c = int(built.tape.const([scale])[0])
        built.tape.set_output(built.tape.scalar(Op.MUL, out, c))
    return built, int(np.argmax(z))


# -- branch attribution -------------------------------------------------------------


@dataclass
class BranchRecord:
    layer: int
    position: int
    values: dict[str, float]  # max-product value per branch, -inf when no path
    argmax: str | None
    attention_argmax: str | None  # argmax among keys/values/queries only
    hidden: float  # max-product adjoint of the hidden state itself

    @property
    def magnitudes(self) -> dict[str, float]:
        return {b: (0.0 if v == -math.inf else abs(v)) for b, v in self.values.items()}

    @property
    def normalized(self) -> dict[str, float]:
        m = self.magnitudes
        tot = sum(m.values())
        return {b: (v / tot if tot > 0 else 0.0) for b, v in m.items()}


@dataclass
class BranchReport:
    tokens: tuple
    label: int
    predicted: int
    records: list[BranchRecord] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        """Misclassified; excluded from aggregates."""
        return self.predicted != self.label

    def layer(self, l: int) -> list[BranchRecord]:
        return [r for r in self.records if r.layer == l]


def _argmax(values: dict[str, float], names) -> str | None:
    best, arg = -math.inf, None
    for b in names:  # ties go to the earlier branch in ``names``
        if values[b] > best:
            best, arg = values[b], b
    return arg


def branch_attribution(cfg, params, example: tasks.Example, scale: float = 1.0) -> BranchReport:
    """Max-product value of every branch at every layer's fan-out point.

    One max-product backward pass; each branch value is the max over the
    branch's anchor nodes for that position. ``scale`` multiplies the
    analysis scalar by a constant, which is useful for invariance checks.
    """
    built, pred = _analysis_tape(cfg, params, example.tokens, example.label, scale)
    report = BranchReport(tuple(example.tokens), int(example.label), pred)
    if not built.anchors:
        return report
    store = backprop(built.tape, MAX_PRODUCT)
    fin = MAX_PRODUCT.finalize
    for l, anchors in enumerate(built.anchors):
        for i, hid in enumerate(built.hidden[l]):
            vals = {b: fin(aggregated_derivative(store, anchors[b][i].ids)) for b in BRANCHES}
            report.records.append(BranchRecord(
                l, i, vals, _argmax(vals, BRANCHES), _argmax(vals, ATTENTION_BRANCHES),
                fin(aggregated_derivative(store, hid.ids))))
    return report


def first_token_groups(tokens: Sequence[int]) -> list[str]:
    """``first`` / ``repeat`` / ``other`` role of each position."""
    return ["first" if i == 0 else "repeat" if t == tokens[0] else "other" for i, t in enumerate(tokens)]


@dataclass
class BranchSummary:
    """Aggregates over unflagged reports for one layer, keyed by token group."""

    counts: dict[str, int]
    argmax_frac: dict[str, dict[str, float]]
    attention_argmax_frac: dict[str, dict[str, float]]
    mean_magnitude: dict[str, dict[str, float]]
    mean_normalized: dict[str, dict[str, float]]
    excluded: int

    def top_pair(self) -> tuple[str, str]:
        """(group, branch) with the largest mean magnitude."""
        pairs = [(v, g, b) for g, d in self.mean_magnitude.items() for b, v in d.items()]
        _, g, b = max(pairs)
        return g, b

    def to_dict(self) -> dict:
        return {
            "counts": self.counts,
            "argmax_frac": self.argmax_frac,
            "attention_argmax_frac": self.attention_argmax_frac,
            "mean_magnitude": self.mean_magnitude,
            "mean_normalized": self.mean_normalized,
            "excluded": self.excluded,
        }


def summarize_branches(reports: Sequence[BranchReport], layer: int = -1, grouper=first_token_groups) -> BranchSummary:
    acc: dict[str, list[BranchRecord]] = {}
    excluded = 0
    for rep in reports:
        if rep.flagged:
            excluded += 1
            continue
        if not rep.records:
            continue
        nl = 1 + max(r.layer for r in rep.records)
        recs = rep.layer(layer % nl)
        for g, rec in zip(grouper(rep.tokens), recs):
            acc.setdefault(g, []).append(rec)

    def frac(recs, key):
        return {b: sum(getattr(r, key) == b for r in recs) / len(recs) for b in BRANCHES}

    def mean(recs, key):
        return {b: float(np.mean([getattr(r, key)[b] for r in recs])) for b in BRANCHES}

    groups = sorted(acc)
    return BranchSummary(
        {g: len(acc[g]) for g in groups},
        {g: frac(acc[g], "argmax") for g in groups},
        {g: frac(acc[g], "attention_argmax") for g in groups},
        {g: mean(acc[g], "magnitudes") for g in groups},
        {g: mean(acc[g], "normalized") for g in groups},
        excluded,
    )


# -- entropy ----------------------------------------------------------------------


@dataclass
class EntropyRow:
    per_input: list[float]
    mean: float
    label: int
    predicted: int
    flagged: bool  # some input had a zero normalizer
    length: int


def entropy_of_inputs(cfg, params, x, true_class: int) -> EntropyRow:
    """Gradient-path entropy (nats) of each input's node set, and their mean.

    Uses the log-domain expectation semiring, so deep products of small
    partials do not underflow. Inputs whose paths all carry weight zero
    get entropy 0 and flag the row.
    """
    built, pred = _analysis_tape(cfg, params, x, true_class)
    store = backprop(built.tape, LOG_ENTROPY)
    hs, ok_all = [], True
    for ref in built.inputs:
        h, ok = LOG_ENTROPY.finalize_checked(aggregated_derivative(store, ref.ids))
        hs.append(max(h, 0.0))  # rounding can leave -1e-16
        ok_all &= ok
    return EntropyRow(hs, float(np.mean(hs)), int(true_class), pred, not ok_all, len(built.inputs))


def mean_input_entropy(cfg, params, xs, ys) -> float:
    rows = [entropy_of_inputs(cfg, params, x, int(y)) for x, y in zip(xs, ys)]
    return float(np.mean([r.mean for r in rows]))


# -- MDL --------------------------------------------------------------------------


def mdl_schedule(n: int, first: float = 0.001, last_doubling: float = 0.5) -> list[int]:
    """Prefix sizes at ``first, 2*first, ...`` of ``n`` (the last doubling clipped to ``last_doubling``), then ``n``."""
    fracs = []
    f = first
    while f < last_doubling:
        fracs.append(f)
        f *= 2
    fracs.append(last_doubling)
    sizes = sorted({max(1, int(round(f * n))) for f in fracs} | {n})
    return [s for s in sizes if 0 < s <= n]


@dataclass
class MdlResult:
    spec: tasks.DatasetSpec
    boundaries: list[int]
    segment_sizes: list[int]
    codelengths: list[float]  # nats per segment
    val_acc: float
    kept: bool
    reason: str = ""
    params: dict | None = None  # final model trained on all of the training set

    @property
    def total(self) -> float:
        return float(sum(self.codelengths))

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "boundaries": self.boundaries,
            "segment_sizes": self.segment_sizes,
            "codelengths": self.codelengths,
            "total": self.total,
            "val_acc": self.val_acc,
            "kept": self.kept,
            "reason": self.reason,
        }


def compute_mdl(spec: tasks.DatasetSpec, cfg, tcfg: TrainConfig | None = None,
                schedule: Sequence[int] | None = None, min_val_acc: float | None = 0.9,
                split_seed: int | None = None) -> MdlResult:
    """Prequential codelength of the training labels of ``spec``.

    The first segment is sent at ``log C`` nats per label. Every later
    segment is sent with a fresh model trained on all earlier data and
    early-stopped on the held-out split. A final model is trained on the
    whole training split; runs whose final validation accuracy does not
    exceed ``min_val_acc`` are marked dropped (``kept=False``).
    """
    tcfg = tcfg or TrainConfig(keep_best_val_loss=True, patience=5, seed=spec.seed)
    examples = tasks.generate(spec)
    train_set, val_set = tasks.split(examples, 0.9, spec.seed if split_seed is None else split_seed)
    X, y = tasks.as_arrays(train_set)
    val = tasks.as_arrays(val_set)
    n = len(y)
    bounds = list(schedule) if schedule is not None else mdl_schedule(n)
    if any(b <= a for a, b in zip(bounds, bounds[1:])) or not bounds or bounds[-1] != n or bounds[0] < 1:
        raise ValueError(f"schedule must increase strictly from >= 1 to {n}")

    sizes = [bounds[0]] + [b - a for a, b in zip(bounds, bounds[1:])]
    codes = [bounds[0] * math.log(spec.num_classes)]
    params = None
    try:
        for a, b in zip(bounds, bounds[1:] + [None]):
            res = train(cfg, init_params(cfg), (X[:a], y[:a]), val, tcfg)
            if b is None:
                params, acc = res.params, _accuracy(cfg, res.params, *val)
            else:
                codes.append(summed_loss(cfg, res.params, X[a:b], y[a:b]))
    except TrainingDiverged as exc:
        log.warning("dropping MDL run %s: %s", spec.name, exc)
        return MdlResult(spec, bounds, sizes, codes, math.nan, False, f"diverged: {exc}")
    kept = min_val_acc is None or acc > min_val_acc
    reason = "" if kept else f"validation accuracy {acc:.3f} <= {min_val_acc}"
    return MdlResult(spec, bounds, sizes, codes, acc, kept, reason, params)


def _accuracy(cfg, params, X, y) -> float:
    if len(y) == 0:
        return math.nan
    return float((predict_logits(cfg, params, X).argmax(1) == y).mean())


# -- reports ----------------------------------------------------------------------


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


FIG2_COLUMNS = ["seed", "group", "branch", "count", "argmax_frac", "attention_argmax_frac",
                "mean_magnitude", "mean_normalized", "status"]
FIG5_COLUMNS = ["task", "seed", "classes", "entropy", "mdl", "val_acc", "status"]
FIG6A_COLUMNS = ["length", "mean_entropy", "n", "status"]
FIG6B_COLUMNS = ["hidden", "seed", "mean_entropy", "relevant_entropy", "irrelevant_entropy", "status"]


def fig2_rows(summaries: dict[int, BranchSummary | None]) -> list[dict]:
    rows = []
    for seed in sorted(summaries):
        s = summaries[seed]
        if s is None:
            rows.append({"seed": seed, "status": "missing"})
            continue
        for g in s.counts:
            for b in BRANCHES:
                rows.append({
                    "seed": seed, "group": g, "branch": b, "count": s.counts[g],
                    "argmax_frac": s.argmax_frac[g][b],
                    "attention_argmax_frac": s.attention_argmax_frac[g][b],
                    "mean_magnitude": s.mean_magnitude[g][b],
                    "mean_normalized": s.mean_normalized[g][b], "status": "ok",
                })
    return rows


def write_report(out_dir: str | Path, config: dict, *, fig2=None, fig5=None, fig6a=None, fig6b=None,
                 extra: dict | None = None) -> Path:
    """Write the series that were supplied under ``out_dir/<config hash>/``.

    Each ``figN`` argument is a list of row dicts. A row with
    ``status="missing"`` stands for a run that did not produce a result;
    its value columns are left empty rather than filled in.
    """
    key = config_hash(config)
    root = Path(out_dir) / key
    root.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, rows, cols in (("fig2_branches", fig2, FIG2_COLUMNS), ("fig5_entropy_mdl", fig5, FIG5_COLUMNS),
                             ("fig6a_entropy_length", fig6a, FIG6A_COLUMNS),
                             ("fig6b_entropy_hidden", fig6b, FIG6B_COLUMNS)):
        if rows is None:
            continue
        for r in rows:
            r.setdefault("status", "ok")
        (root / f"{name}.csv").write_text(_csv(rows, cols))
        files[name] = f"{name}.csv"
    summary = {"config_hash": key, "config": config, "files": files, **(extra or {})}
    (root / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    return root


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)
