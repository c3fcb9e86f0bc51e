"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal summary.

Run alone with ``pytest tests/test_acceptance.py -s`` to see lines as they happen.
"""
import math
import time

import numpy as np
import pytest

from semibackprop import analysis, experiments, tasks
from semibackprop.models import ModelConfig, build_transformer, init_transformer, output_scalar_for_analysis, runner_up
from semibackprop.oracle import (compare_with_oracle, enumerate_paths, finite_difference_grad, oracle_statistic,
                                 random_linear_tape)
from semibackprop.primitives import Op
from semibackprop.semiring import ENTROPY, LOG_ENTROPY, MAX_PRODUCT, SUM_PRODUCT
from semibackprop.tape import Tape, backprop, witness_path
from tests.conftest import record
from tests.helpers import example_tape, gradient_mismatch, random_composition
from tests.test_semiring import LAWS, N_LAW, entropy_payloads, max_payloads, sum_payloads, close


def verdict(k, ok, detail):
    record(f"CRITERION {k}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


# 1 ------------------------------------------------------------------------------


def test_criterion_1_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.time()
    failures, nodes = 0, 0
    for _ in range(1000):
        tape = random_linear_tape(rng, max_nodes=14, max_paths=500)
        nodes += len(tape)
        failures += bool(compare_with_oracle(tape, rtol=1e-9, entropy_atol=1e-6))
    secs = time.time() - t0
    ok = failures == 0 and secs < 60
    assert verdict(1, ok, f"{1000 - failures}/1000 tapes agree at {nodes} nodes, witnesses replay; {secs:.1f}s")


# 2 ------------------------------------------------------------------------------


def test_criterion_2_gradient_fidelity():
    t0 = time.time()
    rng = np.random.default_rng(7)
    worst_random = max(gradient_mismatch(random_composition(rng)) for _ in range(200))

    cfg = experiments.first_token_model(0)
    params = init_transformer(cfg)
    tokens = [3, 7, 1, 3, 9, 12, 5, 20, 2, 8]
    b = build_transformer(cfg, params, tokens)
    z = b.logits.values(b.tape)
    output_scalar_for_analysis(b.tape, b.logits, 1, runner_up(z, 1))
    store = backprop(b.tape, SUM_PRODUCT)
    emb = b.params["tok_emb"].grid[sorted(set(tokens))].ravel()
    g = np.array([store.statistic(i) for i in emb])
    fd = finite_difference_grad(b.tape, step=1e-5, wrt=emb)
    scale = np.maximum(np.abs(g), 1e-3 * np.abs(g).max())
    worst_model = float(np.max(np.abs(g - fd) / scale))
    secs = time.time() - t0
    ok = worst_random < 1e-5 and worst_model < 1e-5 and secs < 300
    assert verdict(2, ok, f"max rel err {worst_random:.1e} on 200 compositions, {worst_model:.1e} on "
                          f"{len(emb)} transformer embedding entries; {secs:.0f}s")


# 3 ------------------------------------------------------------------------------


def test_criterion_3_worked_example():
    t = example_tape(1.0, 2.0)
    s = backprop(t, SUM_PRODUCT)
    m = backprop(t, MAX_PRODUCT)
    w = witness_path(m, 0)
    h_oracle = oracle_statistic(enumerate_paths(t, 0), ENTROPY).value
    h_lin, h_log = backprop(t, ENTROPY).statistic(0), backprop(t, LOG_ENTROPY).statistic(0)
    checks = [
        abs(s.statistic(0) - (math.e + 2)) < 1e-6,
        abs(s.statistic(1) + 3) < 1e-6,
        abs(m.statistic(0) - math.e) < 1e-6,
        2 in w.nodes() and abs(w.replay(t) - math.e) < 1e-6,
        abs(h_lin - h_oracle) < 1e-6 and abs(h_log - h_oracle) < 1e-6,
    ]
    ok = all(checks)
    assert verdict(3, ok, f"df/dx={s.statistic(0):.6f} df/dy={s.statistic(1):.6f} max={m.statistic(0):.6f} "
                          f"via {w.nodes()} entropy={h_lin:.6f} (oracle {h_oracle:.6f})")


# 4 ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def attribution_runs():
    return [experiments.run_attribution(seed, max_examples=200) for seed in (0, 1, 2)]


def test_criterion_4_first_token_repeated_once(attribution_runs):
    t0 = time.time()
    runs = attribution_runs
    perfect = sum(r.perfect for r in runs)
    reports = [rep for r in runs for rep in r.reports]
    s = analysis.summarize_branches(reports)
    first_q = s.argmax_frac["first"]["queries"]
    repeat_k = s.argmax_frac["repeat"]["keys"]
    top = s.top_pair()
    for r in runs:
        rs = r.summary
        record(f"  seed {r.seed}: val_acc {r.result.val_acc:.4f} after {r.result.epochs_run} epochs; "
               f"first argmax {_fmt(rs.argmax_frac['first'])}; repeat argmax {_fmt(rs.argmax_frac['repeat'])}")
    record(f"  pooled mean |max-product|: first {_fmt(s.mean_magnitude['first'])}; "
           f"repeat {_fmt(s.mean_magnitude['repeat'])}; other {_fmt(s.mean_magnitude['other'])}")
    record(f"  attention branches only: first queries {s.attention_argmax_frac['first']['queries']:.2f}, "
           f"repeat keys {s.attention_argmax_frac['repeat']['keys']:.2f}")
    ok = perfect >= 2 and first_q >= 0.7 and repeat_k >= 0.7 and top == ("repeat", "keys")
    secs = time.time() - t0 + sum(r.seconds for r in runs)
    assert verdict(4, ok, f"{perfect}/3 seeds at 100%; first-token queries argmax {first_q:.2f}; repeat-token keys "
                          f"argmax {repeat_k:.2f}; top (token, branch) pair {top}; {secs:.0f}s")


def _fmt(d):
    return " ".join(f"{k}={v:.2f}" for k, v in d.items())


# 5 ------------------------------------------------------------------------------


def test_criterion_5_entropy_sanity():
    t0 = time.time()
    lengths = (4, 8, 16, 32)
    by_len = experiments.entropy_vs_length(0, lengths)
    ys = [by_len[L] for L in lengths]
    inc_len = all(a < b for a, b in zip(ys, ys[1:]))
    rows = [r for seed in (0, 1, 2) for r in experiments.entropy_vs_hidden(seed)]
    sizes = (4, 16, 64)
    mean_h = [np.mean([r.mean for r in rows if r.hidden == h]) for h in sizes]
    rel = np.mean([r.relevant for r in rows if r.hidden == 64])
    irr = np.mean([r.irrelevant for r in rows if r.hidden == 64])
    inc_hidden = all(a < b for a, b in zip(mean_h, mean_h[1:]))
    secs = time.time() - t0
    ok = inc_len and inc_hidden and rel > irr and secs < 600
    assert verdict(5, ok, "length " + ", ".join(f"{L}:{y:.3f}" for L, y in zip(lengths, ys)) +
                   "; hidden " + ", ".join(f"{h}:{y:.3f}" for h, y in zip(sizes, mean_h)) +
                   f"; relevant {rel:.3f} vs irrelevant {irr:.3f} at 64; {secs:.0f}s")


# 6 ------------------------------------------------------------------------------


def test_criterion_6_algebra():
    failures = []
    for name, K, payloads, tol in (("sum", SUM_PRODUCT, sum_payloads, 0.0), ("max", MAX_PRODUCT, max_payloads, 0.0),
                                   ("entropy", ENTROPY, entropy_payloads, 1e-12)):
        for li, (law, fn) in enumerate(sorted(LAWS.items())):
            rng = np.random.default_rng(100 + li)
            xs = payloads(rng)
            p1, p2 = rng.permutation(N_LAW), rng.permutation(N_LAW)
            if not all(close(*fn(K, xs[i], xs[p1[i]], xs[p2[i]]), tol) for i in range(N_LAW)):
                failures.append(f"{name}:{law}")

    single = backprop(_chain([0.3, -2.0, 1.5]), ENTROPY).statistic(0)
    uniform_ok = True
    for k in (2, 5, 64):
        t = Tape()
        x = int(t.input([1.0])[0])
        copies = [t.scalar(Op.LINEAR, x, coef=(0.7, 0.0)) for _ in range(k)]
        acc = copies[0]
        for c in copies[1:]:
            acc = t.scalar(Op.ADD, acc, c)
        t.set_output(acc)
        uniform_ok &= abs(backprop(t, ENTROPY).statistic(x) - math.log(k)) <= 1e-9

    rng = np.random.default_rng(9)
    worst = 0.0
    tapes = [random_composition(rng) for _ in range(50)]
    cfg = ModelConfig(layers=1, hidden=8, heads=2, vocab=21, seq_len=10)
    b = build_transformer(cfg, init_transformer(cfg), list(range(1, 11)))
    output_scalar_for_analysis(b.tape, b.logits, 0, 1)
    tapes.append(b.tape)
    for t in tapes:
        lin, lg = backprop(t, ENTROPY), backprop(t, LOG_ENTROPY)
        for v in range(0, t.output + 1, max(1, t.output // 200)):
            a, ok_a = ENTROPY.finalize_checked(lin[v])
            c, ok_c = LOG_ENTROPY.finalize_checked(lg[v])
            if ok_a != ok_c:
                worst = math.inf
            elif ok_a:
                worst = max(worst, abs(a - c))
    ok = not failures and abs(single) < 1e-12 and uniform_ok and worst <= 1e-9
    assert verdict(6, ok, f"{10 * 3 - len(failures)}/30 laws hold on {N_LAW} payloads; single-path entropy "
                          f"{single:.1e}; log k check {'ok' if uniform_ok else 'off'}; log vs linear max gap {worst:.1e}")


def _chain(ws):
    t = Tape()
    x = int(t.input([1.0])[0])
    for w in ws:
        x = t.scalar(Op.LINEAR, x, coef=(w, 0.0))
    t.set_output(x)
    return t


# 7 ------------------------------------------------------------------------------


def test_criterion_7_mdl(tmp_path):
    t0 = time.time()
    n = 2000
    rl = tasks.DatasetSpec("RandomLabels", seq_len=10, vocab_size=20, n=n, seed=0)
    res = analysis.compute_mdl(rl, experiments.first_token_model(0), min_val_acc=None)
    labels = sum(res.segment_sizes)
    ratio = res.total / (labels * math.log(2))
    additive = res.total == sum(res.codelengths) and labels == res.boundaries[-1]

    specs = experiments.battery(n=n)
    points = experiments.run_scatter(specs, seeds=(0, 1, 2))
    rows = [p.row() for p in points]
    cfg = {"battery": [s.to_dict() for s in specs], "seeds": [0, 1, 2]}
    a = analysis.write_report(tmp_path / "a", cfg, fig5=[dict(r) for r in rows])
    b = analysis.write_report(tmp_path / "b", cfg, fig5=[dict(r) for r in rows])
    same_bytes = (a / "fig5_entropy_mdl.csv").read_bytes() == (b / "fig5_entropy_mdl.csv").read_bytes()
    again = experiments.run_scatter([specs[2]], seeds=(0,))[0]
    first = next(p for p in points if p.task == again.task and p.seed == 0)
    rerun_same = (again.mdl, again.entropy, again.status) == (first.mdl, first.entropy, first.status)
    complete = len(rows) == 3 * len(specs) and all({"task", "seed", "classes", "entropy", "mdl"} <= r.keys() for r in rows)
    for p in points:
        record(f"  {p.task} seed {p.seed}: classes {p.classes} entropy {p.entropy:.3f} mdl {p.mdl:.1f} "
               f"val_acc {p.val_acc:.3f} {p.status}")
    secs = time.time() - t0
    ok = abs(ratio - 1) <= 0.05 and additive and complete and same_bytes and rerun_same and secs < 3600
    kept = sum(p.status == "ok" for p in points)
    assert verdict(7, ok, f"random-label MDL {res.total:.1f} = {ratio:.3f} x N log 2 (N={labels}); additive "
                          f"{additive}; scatter {len(rows)} rows ({kept} kept); deterministic {same_bytes and rerun_same}; "
                          f"{secs:.0f}s")


# 8 ------------------------------------------------------------------------------


def _layered_tape(n_edges, rng, depth=10):
    width = max(1, n_edges // (2 * depth))
    t = Tape(capacity=width * (depth + 1) + 1)
    prev = t.input(rng.normal(size=width))
    for _ in range(depth):
        a, b = rng.integers(0, width, size=(2, width))
        prev = t.apply(Op.ADD, prev[a], prev[b])
    t.set_output(int(prev[-1]))
    return t


def test_criterion_8_linear_operation_count():
    rng = np.random.default_rng(0)
    edges, counts, secs = [], [], []
    for target in (1e3, 1e4, 1e5, 1e6):
        t = _layered_tape(int(target), rng)
        t0 = time.time()
        store = backprop(t, ENTROPY)
        secs.append(time.time() - t0)
        edges.append(t.num_edges)
        counts.append(store.num_ops)
    slope = np.polyfit(np.log(edges), np.log(counts), 1)[0]
    time_slope = np.polyfit(np.log(edges[1:]), np.log(secs[1:]), 1)[0]
    ok = abs(slope - 1) <= 0.1
    assert verdict(8, ok, f"log-log slope {slope:.4f} over {edges[0]}..{edges[-1]} edges; ops/edge "
                          f"{counts[-1] / edges[-1]:.2f}; wall-time slope {time_slope:.2f}")
