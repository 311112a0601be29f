"""Binary metrics, K-fold plans, cross-validation and report files."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from . import data as D
from . import models as M
from . import training as tr

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "roc_auc")
METRIC_HEADERS = ("Accuracy", "Precision", "Recall", "F1 score", "ROC AUC")


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    roc_auc: float
    n_timesteps: int
    flags: list = field(default_factory=list)

    def as_dict(self):
        return {k: getattr(self, k) for k in METRIC_NAMES}


def confusion(pred_labels, y):
    """(tp, fp, tn, fn) with class 1 (occupied) as positive."""
    p = np.asarray(pred_labels).reshape(-1)
    t = np.asarray(y).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"confusion: {p.size} predictions vs {t.size} labels")
    p = p == 1
    t = t == 1
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    tn = int(np.sum(~p & ~t))
    fn = int(np.sum(~p & t))
    return tp, fp, tn, fn


def roc_auc(scores, y):
    """P(random positive outscores random negative), ties counted half.

    Computed from average ranks (Mann-Whitney U).  Returns None when one
    class is absent.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    t = np.asarray(y).reshape(-1) == 1
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    u = ranks[t].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def metrics(counts, scores, y):
    tp, fp, tn, fn = counts
    n = tp + fp + tn + fn
    flags = []

    def ratio(num, den, name):
        if den == 0:
            flags.append(f"{name}_undefined")
            return 0.0
        return num / den

    accuracy = ratio(tp + tn, n, "accuracy")
    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    auc = roc_auc(scores, y)
    if auc is None:
        flags.append("roc_auc_undefined")
        auc = 0.0
    return MetricsReport(tp, fp, tn, fn, accuracy, precision, recall, f1, auc, n, flags)


def evaluate(scores, y, threshold=0.5):
    scores = np.asarray(scores).reshape(-1)
    y = np.asarray(y).reshape(-1)
    labels = (scores >= threshold).astype(np.int8)
    return metrics(confusion(labels, y), scores, y)


# fold plans

@dataclass
class FoldPlan:
    k: int
    assignment: np.ndarray  # sample index -> fold id
    seed: int

    def validation_indices(self, fold):
        return np.flatnonzero(self.assignment == fold)

    def training_indices(self, fold):
        return np.flatnonzero(self.assignment != fold)

    def sizes(self):
        return np.bincount(self.assignment, minlength=self.k)


def kfold_plan(n_samples, k=10, seed=0):
    """Seeded shuffle, then deal samples round-robin into ``k`` folds."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n_samples < k:
        raise ValueError(f"cannot split {n_samples} samples into {k} folds")
    order = np.random.default_rng(seed).permutation(n_samples)
    assignment = np.empty(n_samples, dtype=np.int64)
    assignment[order] = np.arange(n_samples) % k
    return FoldPlan(k, assignment, seed)


# cross-validation

@dataclass
class FoldResult:
    fold: int
    report: MetricsReport | None
    scores: np.ndarray | None
    labels: np.ndarray | None
    error: str | None = None
    train_loss: float | None = None


@dataclass
class CrossValResult:
    folds: list
    aggregate: MetricsReport | None
    failed: list

    @property
    def fold_reports(self):
        return [f.report for f in self.folds if f.report is not None]


def train_and_score(model_config, train_config, train, val):
    """Default fold runner: normalize on train, fit, return validation scores."""
    stats = D.normalize_fit(train)
    train_n = D.normalize_apply(stats, train)
    val_n = D.normalize_apply(stats, val)
    model = M.build(model_config)
    trace = tr.fit(model, train_n, None, train_config)
    X, _ = tr.stack_samples(val_n)
    return M.predict_proba(model, X), trace.train_loss[-1]


def _run_fold(args):
    fold, model_config, train_config, train, val, runner = args
    y = np.stack([s.y for s in val])
    mc = replace(model_config, seed=model_config.seed + fold)
    tc = replace(train_config, seed=train_config.seed + fold)
    try:
        scores, loss = runner(mc, tc, train, val)
    except tr.NumericAbort as e:
        return FoldResult(fold, None, None, None, error=str(e))
    scores = np.asarray(scores).reshape(y.shape)
    return FoldResult(fold, evaluate(scores, y), scores, y, train_loss=loss)


def crossval(model_config, train_config, samples, plan, runner=None, jobs=1, log=None):
    """Fresh seeded model per fold; metrics per fold and over pooled steps.

    Fold ``k`` uses model and training seeds offset by ``k``.  A fold whose
    training aborts numerically is recorded in ``failed`` and skipped in
    the aggregate.
    """
    if plan.assignment.size != len(samples):
        raise ValueError("fold plan does not match the sample count")
    runner = runner or train_and_score
    tasks = []
    for k in range(plan.k):
        train = [samples[i] for i in plan.training_indices(k)]
        val = [samples[i] for i in plan.validation_indices(k)]
        tasks.append((k, model_config, train_config, train, val, runner))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_fold, tasks))
    else:
        results = []
        for t in tasks:
            results.append(_run_fold(t))
            if log is not None:
                log(results[-1])
    ok = [r for r in results if r.report is not None]
    agg = None
    if ok:
        agg = evaluate(np.concatenate([r.scores.reshape(-1) for r in ok]),
                       np.concatenate([r.labels.reshape(-1) for r in ok]))
    return CrossValResult(results, agg, [r.fold for r in results if r.report is None])


# reports

def _fmt4(x):
    return f"{x:.4f}"


def emit_report(results, out_dir, manifest=None):
    """Write summary (csv + aligned text), per-fold long rows and a manifest.

    ``results`` maps a row label (model variant) to its CrossValResult.
    Returns the list of written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    rows = []
    for name, res in results.items():
        agg = res.aggregate
        vals = [getattr(agg, m) for m in METRIC_NAMES] if agg else [float("nan")] * 5
        rows.append((name, vals, res.failed))

    p = os.path.join(out_dir, "summary.csv")
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model"] + list(METRIC_HEADERS) + ["failed_folds"])
        for name, vals, failed in rows:
            w.writerow([name] + [_fmt4(v) for v in vals] + [" ".join(map(str, failed))])
    paths.append(p)

    p = os.path.join(out_dir, "summary.txt")
    width = max([len("Model")] + [len(r[0]) for r in rows])
    with open(p, "w") as fh:
        fh.write(f"{'Model':<{width}}  " + "  ".join(f"{h:>9}" for h in METRIC_HEADERS) + "\n")
        for name, vals, failed in rows:
            line = f"{name:<{width}}  " + "  ".join(f"{_fmt4(v):>9}" for v in vals)
            if failed:
                line += f"  (failed folds: {', '.join(map(str, failed))})"
            fh.write(line + "\n")
    paths.append(p)

    p = os.path.join(out_dir, "folds_long.csv")
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "fold", "metric", "value"])
        for name, res in results.items():
            for f in res.folds:
                for m in METRIC_NAMES:
                    v = repr(getattr(f.report, m)) if f.report else "nan"
                    w.writerow([name, f.fold, m, v])
    paths.append(p)

    if manifest is not None:
        p = os.path.join(out_dir, "manifest.json")
        with open(p, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        paths.append(p)
    return paths


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not serializable: {type(o)}")
