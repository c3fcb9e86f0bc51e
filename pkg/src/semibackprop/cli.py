"""Command-line entry point: ``semibackprop <subcommand> [--config FILE] [--seed N] [--out DIR]``.

Every subcommand writes JSON/CSV under ``--out`` and exits 0 only when its
invariant gates pass (1 when a gate fails, 2 on usage errors).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import analysis, experiments, tasks
from .models import config_from_dict
from .training import TrainConfig, init_params, load_snapshot, save_snapshot, train

log = logging.getLogger("semibackprop")

BRANCH_TOL = 1e-9


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _dataset_spec(cfg: dict, seed: int | None) -> tasks.DatasetSpec:
    d = dict(cfg.get("dataset", {"kind": "FirstTokenRepeatedOnce"}))
    if seed is not None:
        d["seed"] = seed
    return tasks.DatasetSpec.from_dict(d)


def _model_config(cfg: dict, spec: tasks.DatasetSpec, seed: int):
    d = {"vocab": spec.vocab_size + 1, "seq_len": spec.seq_len, "classes": spec.num_classes, "seed": seed,
         **cfg.get("model", {})}
    d["seed"] = seed
    return config_from_dict(d)


def _train_config(cfg: dict, seed: int, **over) -> TrainConfig:
    d = {**cfg.get("train", {}), **over, "seed": seed}
    if "betas" in d:
        d["betas"] = tuple(d["betas"])
    return TrainConfig(**d)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=analysis._json_default) + "\n")


def _finite(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x


# -- subcommands ------------------------------------------------------------------


def cmd_gen_data(args, cfg) -> bool:
    spec = _dataset_spec(cfg, args.seed)
    examples = tasks.generate(spec)
    out = args.out / "dataset.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as fh:
        tasks.dump(spec, examples, fh)
    counts = np.bincount([e.label for e in examples], minlength=spec.num_classes)
    balanced = counts.max() - counts.min() <= 1
    if spec.kind != "RandomLabels":
        balanced &= all(tasks.label(spec, e.tokens) == e.label for e in examples)
    print(f"wrote {len(examples)} examples of {spec.name} to {out}")
    return bool(balanced)


def _dataset(args, cfg):
    if args.data:
        with open(args.data) as fh:
            return tasks.load(fh)
    spec = _dataset_spec(cfg, args.seed)
    return spec, tasks.generate(spec)


def cmd_train(args, cfg) -> bool:
    spec, examples = _dataset(args, cfg)
    seed = args.seed if args.seed is not None else spec.seed
    train_set, val_set = tasks.split(examples, 0.9, seed)
    mcfg = _model_config(cfg, spec, seed)
    tcfg = _train_config(cfg, seed)
    res = train(mcfg, init_params(mcfg), tasks.as_arrays(train_set), tasks.as_arrays(val_set), tcfg)
    save_snapshot(args.out / "model", mcfg, res.params, seed=seed, dataset=spec.to_dict(),
                  val_acc=res.val_acc, val_loss=res.val_loss, epochs=res.epochs_run)
    _write_json(args.out / "trace.json", res.trace)
    print(f"val_acc {res.val_acc:.4f} after {res.epochs_run} epochs; snapshot in {args.out / 'model'}")
    gate = cfg.get("gate_val_acc", tcfg.target_val_acc)
    return gate is None or res.val_acc >= gate


def _snapshot_and_examples(args, cfg):
    if not args.snapshot:
        raise SystemExit("--snapshot is required")
    mcfg, params, manifest = load_snapshot(args.snapshot)
    if args.data:
        with open(args.data) as fh:
            _, examples = tasks.load(fh)
    else:
        spec = tasks.DatasetSpec.from_dict(manifest["dataset"])
        _, examples = tasks.split(tasks.generate(spec), 0.9, manifest.get("seed", spec.seed))
    return mcfg, params, examples


def cmd_analyze_branches(args, cfg) -> bool:
    mcfg, params, examples = _snapshot_and_examples(args, cfg)
    wanted = cfg.get("label", 1)
    examples = [e for e in examples if wanted is None or e.label == wanted][: args.limit]
    reports = [analysis.branch_attribution(mcfg, params, e) for e in examples]
    ok = True
    records = []
    for k, rep in enumerate(reports):
        for r in rep.records:
            top = max(r.values.values())
            consistent = r.hidden == top or abs(r.hidden - top) <= BRANCH_TOL * max(1.0, abs(top))
            ok &= consistent
            records.append({"example": k, "flagged": rep.flagged, "layer": r.layer, "position": r.position,
                            "argmax": r.argmax, "attention_argmax": r.attention_argmax,
                            "values": {b: _finite(v) for b, v in r.values.items()},
                            "normalized": r.normalized, "consistent": consistent})
    summary = analysis.summarize_branches(reports) if reports else None
    _write_json(args.out / "branches.json", {"records": records,
                                             "summary": summary.to_dict() if summary else None})
    if summary:
        print(json.dumps(summary.argmax_frac, indent=1, sort_keys=True))
    return ok


def cmd_analyze_entropy(args, cfg) -> bool:
    mcfg, params, examples = _snapshot_and_examples(args, cfg)
    rows = []
    for e in examples[: args.limit]:
        r = analysis.entropy_of_inputs(mcfg, params, e.tokens, e.label)
        rows.append({"length": r.length, "label": r.label, "predicted": r.predicted, "mean_entropy": r.mean,
                     "flagged": r.flagged, "per_input": r.per_input})
    _write_json(args.out / "entropy.json", rows)
    print(f"mean input entropy {np.mean([r['mean_entropy'] for r in rows]):.4f} nats over {len(rows)} examples")
    return all(min(r["per_input"]) >= 0 and not r["flagged"] for r in rows)


def cmd_mdl(args, cfg) -> bool:
    spec = _dataset_spec(cfg, args.seed)
    seed = spec.seed
    mcfg = _model_config(cfg, spec, seed)
    tcfg = _train_config(cfg, seed, keep_best_val_loss=True,
                         **({"patience": 5} if "patience" not in cfg.get("train", {}) else {}))
    res = analysis.compute_mdl(spec, mcfg, tcfg, min_val_acc=cfg.get("min_val_acc", 0.9))
    _write_json(args.out / "mdl.json", res.to_dict())
    print(f"MDL {res.total:.2f} nats over {sum(res.segment_sizes)} labels; kept={res.kept} {res.reason}")
    additive = res.total == float(sum(res.codelengths)) and sum(res.segment_sizes) == res.boundaries[-1]
    return additive and res.kept


def cmd_oracle_check(args, cfg) -> bool:
    from .oracle import compare_with_oracle, random_linear_tape

    rng = np.random.default_rng(args.seed or 0)
    n = cfg.get("tapes", 1000)
    failures = []
    for i in range(n):
        bad = compare_with_oracle(random_linear_tape(rng))
        if bad:
            failures.append({"tape": i, "mismatches": bad})
    _write_json(args.out / "oracle_check.json", {"tapes": n, "failures": failures})
    print(f"{n - len(failures)}/{n} random tapes agree with path enumeration")
    return not failures


def cmd_report(args, cfg) -> bool:
    """Run the experiment suite described by the config and write plot-ready series."""
    seeds = cfg.get("seeds", [0, 1, 2])
    fig2, branch_extra = [], {}
    if cfg.get("attribution", True):
        summaries = {}
        for s in seeds:
            run = experiments.run_attribution(s, max_examples=cfg.get("attribution_examples", 200))
            summaries[s] = run.summary
            branch_extra[str(s)] = {"val_acc": run.result.val_acc, "epochs": run.result.epochs_run}
        fig2 = analysis.fig2_rows(summaries)
    fig6a = []
    if cfg.get("entropy_length", True):
        lengths = cfg.get("lengths", [4, 8, 16, 32])
        series = experiments.entropy_vs_length(seeds[0], tuple(lengths))
        fig6a = [{"length": L, "mean_entropy": series.get(L), "n": 20,
                  "status": "ok" if L in series else "missing"} for L in lengths]
    fig6b = []
    if cfg.get("entropy_hidden", True):
        for s in seeds:
            for r in experiments.entropy_vs_hidden(s, tuple(cfg.get("hidden_sizes", [4, 16, 64]))):
                fig6b.append({"hidden": r.hidden, "seed": s, "mean_entropy": r.mean,
                              "relevant_entropy": r.relevant, "irrelevant_entropy": r.irrelevant})
    fig5 = []
    if cfg.get("scatter", True):
        specs = experiments.battery(n=cfg.get("scatter_n", 10_000), full=cfg.get("full_battery", False))
        pts = experiments.run_scatter(specs, seeds, n_entropy=cfg.get("scatter_entropy_examples", 5))
        fig5 = [p.row() for p in pts]
    root = analysis.write_report(args.out, cfg, fig2=fig2, fig5=fig5, fig6a=fig6a, fig6b=fig6b,
                                 extra={"attribution_runs": branch_extra})
    print(f"report written to {root}")
    return all(r.get("status") == "ok" for r in fig6a) and bool(fig2 or not cfg.get("attribution", True))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "analyze-branches": cmd_analyze_branches,
    "analyze-entropy": cmd_analyze_entropy,
    "mdl": cmd_mdl,
    "oracle-check": cmd_oracle_check,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semibackprop", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=Path, default=Path("out"))
        if name in ("train", "analyze-branches", "analyze-entropy"):
            sp.add_argument("--data", help="dataset JSONL written by gen-data")
        if name in ("analyze-branches", "analyze-entropy"):
            sp.add_argument("--snapshot", help="model directory written by train")
            sp.add_argument("--limit", type=int, default=200, help="max examples to analyze")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        ok = COMMANDS[args.command](args, cfg)
    except (ValueError, tasks.DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
