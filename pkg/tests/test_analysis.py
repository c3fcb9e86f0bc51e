import json
import math

import numpy as np
import pytest

from semibackprop import analysis, tasks
from semibackprop.analysis import (BranchRecord, BranchReport, branch_attribution, compute_mdl, entropy_of_inputs,
                                   mdl_schedule, summarize_branches, write_report)
from semibackprop.models import BRANCHES, MLPConfig, ModelConfig, build, init_mlp, init_transformer, output_scalar_for_analysis
from semibackprop.semiring import ENTROPY
from semibackprop.tape import aggregated_derivative, backprop

CFG = ModelConfig(layers=2, hidden=4, heads=2, vocab=8, seq_len=6, classes=2, ff_mult=2, seed=0, pooling="first")
PARAMS = init_transformer(CFG)


def _example(tokens=(3, 1, 3, 5, 2, 6)):
    return tasks.Example(tuple(tokens), 0)


def test_branch_report_structure():
    ex = _example()
    rep = branch_attribution(CFG, PARAMS, ex)
    assert len(rep.records) == CFG.layers * len(ex.tokens)
    for r in rep.records:
        assert set(r.values) == set(BRANCHES)
        assert r.hidden == pytest.approx(max(r.values.values()), rel=1e-9)
        if r.argmax is not None:
            assert r.values[r.argmax] == max(r.values.values())
        norm = r.normalized
        if all(m > 0 for m in r.magnitudes.values()):
            assert sum(norm.values()) == pytest.approx(1.0, abs=1e-12)


def test_unreachable_branches_have_zero_magnitude():
    rep = branch_attribution(CFG, PARAMS, _example())
    last = rep.layer(CFG.layers - 1)
    # with first-position pooling, other positions feed the output only through keys and values
    for r in last[1:]:
        assert r.values["skip"] == -math.inf and r.values["queries"] == -math.inf
        assert r.magnitudes["skip"] == 0.0 and r.argmax in ("keys", "values")


def test_scaling_the_output_scales_every_branch():
    ex = _example()
    base = branch_attribution(CFG, PARAMS, ex)
    scaled = branch_attribution(CFG, PARAMS, ex, scale=3.0)
    for a, b in zip(base.records, scaled.records):
        assert a.argmax == b.argmax
        for br in BRANCHES:
            assert b.magnitudes[br] == pytest.approx(3.0 * a.magnitudes[br], rel=1e-12)


def test_zero_layer_model_has_empty_report():
    cfg = ModelConfig(layers=0, hidden=4, heads=2, vocab=8, seq_len=6, classes=2)
    rep = branch_attribution(cfg, init_transformer(cfg), tasks.Example((1, 2, 3), 1))
    assert rep.records == []


def _record(pos, vals):
    vals = dict(zip(BRANCHES, vals))
    return BranchRecord(0, pos, vals, analysis._argmax(vals, BRANCHES),
                        analysis._argmax(vals, analysis.ATTENTION_BRANCHES), max(vals.values()))


def test_summary_excludes_flagged_reports():
    good = BranchReport((4, 2, 4), 1, 1, [_record(0, [0.9, 0.1, 0.2, 0.5]), _record(1, [-math.inf, 0.1, 0.05, -math.inf]),
                                          _record(2, [-math.inf, 0.7, 0.1, -math.inf])])
    bad = BranchReport((4, 4, 1), 1, 0, [_record(0, [0.0, 5.0, 0.0, 0.0])] * 3)
    assert bad.flagged and not good.flagged
    s = summarize_branches([good, bad])
    assert s.excluded == 1
    assert s.counts == {"first": 1, "other": 1, "repeat": 1}
    assert s.argmax_frac["first"]["skip"] == 1.0
    assert s.attention_argmax_frac["first"]["queries"] == 1.0
    assert s.argmax_frac["repeat"]["keys"] == 1.0
    assert s.mean_magnitude["other"]["skip"] == 0.0
    assert s.top_pair() == ("first", "skip")


def test_entropy_rows_and_log_domain_agreement():
    ex = _example()
    row = entropy_of_inputs(CFG, PARAMS, ex.tokens, ex.label)
    assert len(row.per_input) == len(ex.tokens) and min(row.per_input) >= 0
    assert not row.flagged
    b = build(CFG, PARAMS, ex.tokens)
    output_scalar_for_analysis(b.tape, b.logits, 0, 1)
    lin = backprop(b.tape, ENTROPY)
    lin_h = [ENTROPY.finalize(aggregated_derivative(lin, r.ids)) for r in b.inputs]
    np.testing.assert_allclose(lin_h, row.per_input, rtol=0, atol=1e-9)


def test_mlp_entropy_per_feature():
    cfg = MLPConfig(features=4, hidden=3, seed=1)
    row = entropy_of_inputs(cfg, init_mlp(cfg), [0.9, 0.1, 0.2, 0.3], 1)
    assert len(row.per_input) == 4 and row.mean == pytest.approx(np.mean(row.per_input))


def test_mdl_schedule():
    s = mdl_schedule(9000)
    assert s[0] == 9 and s[-1] == 9000 and s[-2] == 4500 and s[-3] == 2304
    assert all(b > a for a, b in zip(s, s[1:]))
    assert mdl_schedule(10) == [1, 3, 5, 10]


SMALL_MODEL = ModelConfig(layers=1, hidden=4, heads=2, vocab=6, seq_len=5, classes=2, seed=0, pooling="first")


def test_mdl_is_additive_and_partitions_the_training_set():
    spec = tasks.DatasetSpec("Contains1", seq_len=5, vocab_size=5, n=400, seed=0)
    from semibackprop.training import TrainConfig
    res = compute_mdl(spec, SMALL_MODEL, TrainConfig(epochs=3, keep_best_val_loss=True), min_val_acc=None)
    assert sum(res.segment_sizes) == res.boundaries[-1] == 360
    assert res.total == sum(res.codelengths)
    assert res.codelengths[0] == res.boundaries[0] * math.log(2)
    assert res.kept and res.params is not None
    json.dumps(res.to_dict())


def test_mdl_gate_drops_weak_runs():
    spec = tasks.DatasetSpec("RandomLabels", seq_len=5, vocab_size=5, n=200, seed=0)
    from semibackprop.training import TrainConfig
    res = compute_mdl(spec, SMALL_MODEL, TrainConfig(epochs=1, keep_best_val_loss=True))
    assert not res.kept and "validation accuracy" in res.reason
    with pytest.raises(ValueError):
        compute_mdl(spec, SMALL_MODEL, schedule=[5, 3, 180])


def test_report_is_deterministic_and_keeps_gaps(tmp_path):
    cfg = {"name": "t", "seeds": [0, 1]}
    fig5 = [{"task": "Contains1", "seed": 0, "classes": 2, "entropy": 1.5, "mdl": 10.0, "val_acc": 1.0},
            {"task": "Contains1", "seed": 1, "classes": 2, "status": "missing"}]
    a = write_report(tmp_path / "a", cfg, fig5=[dict(r) for r in fig5], fig2=analysis.fig2_rows({0: None}))
    b = write_report(tmp_path / "b", cfg, fig5=[dict(r) for r in fig5], fig2=analysis.fig2_rows({0: None}))
    assert a.name == b.name == analysis.config_hash(cfg)
    for f in ("fig5_entropy_mdl.csv", "fig2_branches.csv", "summary.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    lines = (a / "fig5_entropy_mdl.csv").read_text().splitlines()
    assert lines[0] == "task,seed,classes,entropy,mdl,val_acc,status"
    assert lines[2] == "Contains1,1,2,,,,missing"
    assert "missing" in (a / "fig2_branches.csv").read_text()
    assert analysis.config_hash(cfg) != analysis.config_hash({**cfg, "seeds": [0]})
