import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridocc import data as D
from hybridocc import evaluation as E
from hybridocc import models as M
from hybridocc import training as tr

from oracles import brute_metrics, pairwise_auc, trapezoid_auc


def test_confusion_small_case():
    assert E.confusion([1, 1, 0, 0, 1], [1, 0, 0, 1, 1]) == (2, 1, 1, 1)


def test_metrics_arithmetic_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 60))
        y = rng.integers(0, 2, n)
        s = np.round(rng.random(n), 2)  # rounding creates score ties
        rep = E.evaluate(s, y)
        counts, acc, prec, rec, f1 = brute_metrics((s >= 0.5).astype(int), y)
        assert (rep.tp, rep.fp, rep.tn, rep.fn) == counts
        for got, want in ((rep.accuracy, acc), (rep.precision, prec), (rep.recall, rec), (rep.f1, f1)):
            assert abs(got - want) < 1e-12
        if 0 < y.sum() < n:
            assert abs(rep.roc_auc - pairwise_auc(s, y)) < 1e-12
            assert abs(rep.roc_auc - trapezoid_auc(s, y)) < 1e-12


def test_hand_worked_report():
    rep = E.metrics((3, 1, 4, 2), [0.9, 0.1], [1, 0])
    assert rep.accuracy == 0.7
    assert rep.precision == 0.75
    assert rep.recall == 0.6
    assert rep.f1 == pytest.approx(2 * 0.75 * 0.6 / 1.35, abs=1e-15)


def test_degenerate_denominators_are_flagged():
    rep = E.evaluate(np.zeros(4), np.zeros(4))
    assert rep.precision == 0.0 and rep.recall == 0.0 and rep.roc_auc == 0.0
    assert {"precision_undefined", "recall_undefined", "roc_auc_undefined"} <= set(rep.flags)
    assert rep.accuracy == 1.0


def test_auc_extremes():
    y = np.array([0, 0, 1, 1])
    assert E.roc_auc([0.1, 0.2, 0.8, 0.9], y) == 1.0
    assert E.roc_auc([0.9, 0.8, 0.2, 0.1], y) == 0.0
    assert E.roc_auc([0.5] * 4, y) == 0.5
    assert E.roc_auc([0.5] * 4, np.ones(4)) is None


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(-40, 40), st.booleans()), min_size=2, max_size=40))
def test_auc_is_invariant_under_monotone_maps(pairs):
    # scores on a 1/8 grid so the maps stay strictly monotone in floating point
    s = np.array([p[0] / 8 for p in pairs])
    y = np.array([int(p[1]) for p in pairs])
    a = E.roc_auc(s, y)
    if a is None:
        return
    assert E.roc_auc(np.exp(s), y) == pytest.approx(a, abs=1e-12)
    assert E.roc_auc(3 * s + 7, y) == pytest.approx(a, abs=1e-12)


@pytest.mark.parametrize("n", [10, 37, 449])
def test_kfold_is_exact_partition(n):
    plan = E.kfold_plan(n, 10, seed=3)
    seen = np.concatenate([plan.validation_indices(k) for k in range(10)])
    assert sorted(seen.tolist()) == list(range(n))
    sizes = plan.sizes()
    assert sizes.max() - sizes.min() <= 1
    for k in range(10):
        assert set(plan.training_indices(k)).isdisjoint(plan.validation_indices(k))
    if n == 449:
        assert sorted(sizes.tolist()) == [44] + [45] * 9


def test_kfold_is_seeded_and_validated():
    assert np.array_equal(E.kfold_plan(37, 10, 1).assignment, E.kfold_plan(37, 10, 1).assignment)
    assert not np.array_equal(E.kfold_plan(37, 10, 1).assignment, E.kfold_plan(37, 10, 2).assignment)
    with pytest.raises(ValueError):
        E.kfold_plan(5, 10)


def fake_runner(mc, tc, train, val):
    rng = np.random.default_rng(mc.seed)
    return rng.random((len(val), val[0].y.size)), 0.0


SAMPLES = D.synth_generate(2, 15, 0)
CFG = M.ModelConfig(hidden=4, d_model=4, heads=2, d_k=2, d_ff=8)


def test_crossval_pooled_counts_are_sum_of_folds():
    res = E.crossval(CFG, tr.TrainConfig(), SAMPLES, E.kfold_plan(30, 10, 0), runner=fake_runner)
    assert len(res.folds) == 10 and not res.failed
    for attr in ("tp", "fp", "tn", "fn", "n_timesteps"):
        assert getattr(res.aggregate, attr) == sum(getattr(r, attr) for r in res.fold_reports)
    assert res.aggregate.n_timesteps == 30 * 24


def test_constant_predictor_scores_majority_rate():
    def ones(mc, tc, train, val):
        return np.ones((len(val), 24)), 0.0

    res = E.crossval(CFG, tr.TrainConfig(), SAMPLES, E.kfold_plan(30, 10, 0), runner=ones)
    rate = np.mean([s.y for s in SAMPLES])
    assert res.aggregate.accuracy == pytest.approx(rate, abs=1e-12)
    assert res.aggregate.recall == 1.0
    assert res.aggregate.roc_auc == 0.5


def test_failed_fold_is_isolated():
    def flaky(mc, tc, train, val):
        if mc.seed == CFG.seed + 3:
            raise tr.NumericAbort("non-finite gradient in parameter head.W")
        return fake_runner(mc, tc, train, val)

    res = E.crossval(CFG, tr.TrainConfig(), SAMPLES, E.kfold_plan(30, 10, 0), runner=flaky)
    assert res.failed == [3]
    assert res.aggregate.n_timesteps == 27 * 24


def test_fold_seeds_offset_by_fold_index():
    seen = []

    def record(mc, tc, train, val):
        seen.append((mc.seed, tc.seed))
        return fake_runner(mc, tc, train, val)

    E.crossval(M.ModelConfig(seed=5), tr.TrainConfig(seed=9), SAMPLES, E.kfold_plan(30, 3, 0), runner=record)
    assert seen == [(5, 9), (6, 10), (7, 11)]


def test_emit_report_cardinality(tmp_path):
    plan = E.kfold_plan(30, 10, 0)
    results = {v: E.crossval(M.ModelConfig(variant=v), tr.TrainConfig(), SAMPLES, plan, runner=fake_runner)
               for v in M.VARIANTS}
    paths = E.emit_report(results, tmp_path, manifest={"seed": 0})
    assert len(paths) == 4
    with open(tmp_path / "summary.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][1:6] == list(E.METRIC_HEADERS)
    assert [r[0] for r in rows[1:]] == list(M.VARIANTS)
    with open(tmp_path / "folds_long.csv") as fh:
        long = list(csv.DictReader(fh))
    assert len(long) == 4 * 10 * 5
    assert json.loads((tmp_path / "manifest.json").read_text()) == {"seed": 0}
    assert len((tmp_path / "summary.txt").read_text().splitlines()) == 5


@pytest.mark.slow
def test_parallel_folds_match_serial():
    cfg = M.ModelConfig(hidden=4, d_model=4, heads=2, d_k=2, d_ff=8)
    tc = tr.TrainConfig(epochs=2, batch_size=8)
    plan = E.kfold_plan(30, 3, 0)
    a = E.crossval(cfg, tc, SAMPLES, plan, jobs=1)
    b = E.crossval(cfg, tc, SAMPLES, plan, jobs=2)
    for x, y in zip(a.folds, b.folds):
        assert x.scores.tobytes() == y.scores.tobytes()
