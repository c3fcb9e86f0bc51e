"""End-to-end experiment drivers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tasks
from .analysis import (BranchReport, BranchSummary, branch_attribution, compute_mdl, entropy_of_inputs,
                       mean_input_entropy, summarize_branches)
from .models import MLPConfig, ModelConfig, init_mlp, init_transformer
from .training import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)


# -- repeated-first-token attribution -------------------------------------------------


def first_token_spec(seed: int = 0, n: int = 10_000) -> tasks.DatasetSpec:
    return tasks.DatasetSpec("FirstTokenRepeatedOnce", seq_len=10, vocab_size=20, n=n, seed=seed)


def first_token_model(seed: int = 0) -> ModelConfig:
    return ModelConfig(layers=1, hidden=16, heads=2, vocab=21, seq_len=10, classes=2, pooling="first", seed=seed)


@dataclass
class AttributionRun:
    seed: int
    result: TrainResult
    reports: list[BranchReport]
    summary: BranchSummary | None
    seconds: float

    @property
    def perfect(self) -> bool:
        return self.result.val_acc >= 1.0


def run_attribution(seed: int, n: int = 10_000, epochs: int = 50, max_examples: int = 200) -> AttributionRun:
    """Train until 100% validation accuracy (or ``epochs``), then attribute validation positives."""
    t0 = time.time()
    spec = first_token_spec(seed, n)
    train_set, val_set = tasks.split(tasks.generate(spec), 0.9, seed)
    cfg = first_token_model(seed)
    res = train(cfg, init_transformer(cfg), tasks.as_arrays(train_set), tasks.as_arrays(val_set),
                TrainConfig(epochs=epochs, seed=seed, target_val_acc=1.0))
    positives = [e for e in val_set if e.label == 1][:max_examples]
    reports = [branch_attribution(cfg, res.params, e) for e in positives]
    summary = summarize_branches(reports) if reports else None
    return AttributionRun(seed, res, reports, summary, time.time() - t0)


# -- entropy sanity checks ------------------------------------------------------------


def entropy_vs_length(seed: int = 0, lengths=(4, 8, 16, 32), n_eval: int = 20, n_train: int = 3000,
                      epochs: int = 20) -> dict[int, float]:
    """Mean input entropy of one trained Contains1 model at several input lengths."""
    max_len = max(lengths)
    spec = tasks.DatasetSpec("Contains1", seq_len=max_len, vocab_size=20, n=n_train, seed=seed)
    train_set, val_set = tasks.split(tasks.generate(spec), 0.9, seed)
    cfg = ModelConfig(layers=1, hidden=16, heads=2, vocab=21, seq_len=max_len, classes=2, seed=seed)
    res = train(cfg, init_transformer(cfg), tasks.as_arrays(train_set), tasks.as_arrays(val_set),
                TrainConfig(epochs=epochs, seed=seed))
    out = {}
    for S in lengths:
        X, y = tasks.as_arrays(tasks.generate(tasks.DatasetSpec("Contains1", S, 20, n_eval, seed + 1000)))
        out[S] = mean_input_entropy(cfg, res.params, X, y)
    return out


@dataclass
class HiddenRow:
    hidden: int
    seed: int
    per_feature: list[float]
    val_acc: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_feature))

    @property
    def relevant(self) -> float:
        return self.per_feature[0]

    @property
    def irrelevant(self) -> float:
        return float(np.mean(self.per_feature[1:]))


def entropy_vs_hidden(seed: int = 0, sizes=(4, 16, 64), n_eval: int = 100, n_train: int = 5000,
                      epochs: int = 50) -> list[HiddenRow]:
    """Per-feature input entropy of MLPs on the 4-feature threshold task."""
    X, y = tasks.threshold_features(n_train, 4, seed=seed)
    Xv, yv = tasks.threshold_features(max(n_eval, 500), 4, seed=seed + 1)
    rows = []
    for h in sizes:
        cfg = MLPConfig(features=4, hidden=h, classes=2, seed=seed)
        res = train(cfg, init_mlp(cfg), (X, y), (Xv, yv), TrainConfig(epochs=epochs, seed=seed))
        per = np.mean([entropy_of_inputs(cfg, res.params, Xv[i], int(yv[i])).per_input for i in range(n_eval)], 0)
        rows.append(HiddenRow(h, seed, [float(v) for v in per], res.val_acc))
    return rows


# -- entropy vs MDL battery -----------------------------------------------------------


def battery(n: int = 10_000, seq_len: int = 36, vocab: int = 36, full: bool = False) -> list[tasks.DatasetSpec]:
    """Task battery for the entropy-vs-MDL scatter (seed filled in per run)."""
    S, V = seq_len, vocab
    specs = [
        tasks.DatasetSpec("ContainsTokenSet", S, V, n, token_set=(1, 2, 3)),
        tasks.DatasetSpec("ContainsTokenSet", S, V, n, token_set=(4, 5, 6, 7, 8)),
        tasks.DatasetSpec("Contains1", S, V, n),
    ]
    specs += [tasks.DatasetSpec("BinCountOnes", S, V, n, num_classes=c) for c in (2, 6, 36)]
    if full:
        specs += [tasks.DatasetSpec(k, S, V, n) for k in ("FirstTokenRepeatedImmediately", "FirstTokenRepeatedLast",
                                                          "AdjacentDuplicate", "FirstTokenRepeatedOnce")]
        specs += [tasks.DatasetSpec("BinCountOnes", S, V, n, num_classes=c)
                  for c in (3, 4, 9, 12, 18) if S % c == 0]
    return specs


def scatter_model(spec: tasks.DatasetSpec, seed: int, hidden: int = 64, layers: int = 2, heads: int = 4) -> ModelConfig:
    return ModelConfig(layers=layers, hidden=hidden, heads=heads, vocab=spec.vocab_size + 1, seq_len=spec.seq_len,
                       classes=spec.num_classes, pooling="first", seed=seed)


@dataclass
class ScatterPoint:
    task: str
    seed: int
    classes: int
    entropy: float
    mdl: float
    val_acc: float
    status: str = "ok"
    segments: list[float] = field(default_factory=list)

    def row(self) -> dict:
        gap = self.status != "ok"
        return {"task": self.task, "seed": self.seed, "classes": self.classes,
                "entropy": None if gap else self.entropy, "mdl": None if gap else self.mdl,
                "val_acc": self.val_acc, "status": self.status}


def run_scatter(specs, seeds=(0, 1, 2), n_entropy: int = 5, epochs: int = 50, patience: int = 5,
                **model_kw) -> list[ScatterPoint]:
    points = []
    for base in specs:
        for seed in seeds:
            spec = tasks.DatasetSpec(**{**base.to_dict(), "seed": seed, "token_set": base.token_set})
            cfg = scatter_model(spec, seed, **model_kw)
            tcfg = TrainConfig(epochs=epochs, seed=seed, keep_best_val_loss=True, patience=patience)
            t0 = time.time()
            mdl = compute_mdl(spec, cfg, tcfg)
            if not mdl.kept:
                log.info("%s seed %d dropped: %s", spec.name, seed, mdl.reason)
                points.append(ScatterPoint(spec.name, seed, spec.num_classes, math.nan, mdl.total, mdl.val_acc,
                                           "dropped", mdl.codelengths))
                continue
            _, val_set = tasks.split(tasks.generate(spec), 0.9, seed)
            X, y = tasks.as_arrays(val_set[:n_entropy])
            h = mean_input_entropy(cfg, mdl.params, X, y)
            log.info("%s seed %d: mdl %.1f entropy %.3f (%.0fs)", spec.name, seed, mdl.total, h, time.time() - t0)
            points.append(ScatterPoint(spec.name, seed, spec.num_classes, h, mdl.total, mdl.val_acc, "ok",
                                       mdl.codelengths))
    return points
