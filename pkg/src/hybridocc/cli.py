"""Command-line entry point: ``hybridocc <subcommand> ...``.

Exit codes: 0 success, 1 check failure, 2 usage or input error,
3 numeric abort during training.
"""
from __future__ import annotations

import argparse
import datetime as dt
import json
import os
import sys
import tempfile
from dataclasses import asdict, fields, replace

from . import __version__
from . import data as D
from . import evaluation as E
from . import kernels
from . import models as M
from . import training as tr

DATA_DIR_ENV = "HYBRIDOCC_DATA_DIR"
FEATURE_ROW = "bilstm_attention+features"


class UsageError(Exception):
    pass


# config files

def _config_types():
    types = {}
    for cls in (M.ModelConfig, tr.TrainConfig):
        for f in fields(cls):
            types[f.name] = f.type
    return types


def parse_config_text(text, source="<config>"):
    """Flat ``key = value`` lines; ``#`` starts a comment.  Unknown keys
    and unparsable values raise UsageError."""
    types = _config_types()
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        if key not in types:
            raise UsageError(f"{source}:{lineno}: unknown config key {key!r}; valid keys: {', '.join(sorted(types))}")
        try:
            t = types[key]
            out[key] = value if t == "str" else float(value) if t == "float" else int(value)
        except ValueError:
            raise UsageError(f"{source}:{lineno}: bad value {value!r} for {key} ({types[key]})") from None
    return out


def load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return parse_config_text(fh.read(), path)
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None


def split_config(values, **overrides):
    values = {**values, **{k: v for k, v in overrides.items() if v is not None}}
    mkeys = {f.name for f in fields(M.ModelConfig)}
    try:
        mc = M.ModelConfig(**{k: v for k, v in values.items() if k in mkeys})
        tc = tr.TrainConfig(**{k: v for k, v in values.items() if k not in mkeys})
    except M.ConfigError as e:
        raise UsageError(str(e)) from None
    return mc, tc


def config_text(mc, tc):
    lines = [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}"
             for k, v in {**asdict(mc), **asdict(tc)}.items()]
    return "\n".join(lines) + "\n"


# helpers

def _resolve_data(path):
    if path is None:
        raise UsageError("no data file given")
    if not os.path.exists(path) and not os.path.isabs(path) and os.environ.get(DATA_DIR_ENV):
        alt = os.path.join(os.environ[DATA_DIR_ENV], path)
        if os.path.exists(alt):
            return alt
    return path


def _read_samples(path):
    path = _resolve_data(path)
    try:
        return D.read_processed(path)
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e}") from None


def _manifest(args, argv, **extra):
    m = {
        "subcommand": args.command,
        "argv": list(argv),
        "args": {k: v for k, v in vars(args).items() if k not in ("func",)},
        "version": __version__,
        "backend": kernels.BACKEND,
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }
    m.update(extra)
    return m


def _write_manifest(path, manifest):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=E._json_default)
        fh.write("\n")


def _prepare(samples, manual, window):
    if manual:
        samples = [D.manual_features(s, window) for s in samples]
    return samples


def _model_config_for(mc, samples):
    T, F = samples[0].X.shape
    return replace(mc, n_features=F, seq_len=T)


# subcommands

def cmd_preprocess(args, argv):
    raw = args.raw or os.environ.get(DATA_DIR_ENV)
    if raw is None:
        raise UsageError(f"--raw not given and ${DATA_DIR_ENV} is unset")
    if not 0.0 < args.min_complete <= 1.0:
        raise UsageError("--min-complete must be in (0, 1]")
    if not os.path.isdir(raw):
        raise UsageError(f"{raw}: not a directory")
    days = 0
    samples = []
    for hh in D.list_households(raw):
        for day in D.load_raw(raw, hh, args.features):
            days += 1
            s = D.resample_hourly(day, 1.0 - args.min_complete, args.tie_label)
            if s is not None:
                samples.append(s)
    if days == 0:
        raise UsageError("no raw day files found")
    if not samples:
        raise UsageError(f"all {days} raw days were excluded by the completeness filter")
    D.write_processed(samples, args.out)
    summary = D.summarize(samples)
    print(summary.format_table())
    print(f"kept {len(samples)} of {days} days")
    _write_manifest(args.out + ".manifest.json", _manifest(
        args, argv, outputs=[args.out], raw_days=days,
        summary={"households": summary.households, "total_days": summary.total_days,
                 "overall_ratio": summary.overall_ratio}))
    return 0


def cmd_synth(args, argv):
    if args.households < 1 or args.days < 1:
        raise UsageError("--households and --days must be positive")
    params = D.SynthParams(occupied_boost=args.boost)
    samples = D.synth_generate(args.households, args.days, args.seed, params)
    D.write_processed(samples, args.out)
    summary = D.summarize(samples)
    print(summary.format_table())
    _write_manifest(args.out + ".manifest.json", _manifest(
        args, argv, outputs=[args.out], synth_params=asdict(params)))
    return 0


def cmd_train(args, argv):
    values = load_config_file(args.config)
    mc, tc = split_config(values, variant=args.variant, seed=args.seed)
    samples = _prepare(_read_samples(args.data), args.manual_features, args.window)
    mc = _model_config_for(mc, samples)
    stats = D.normalize_fit(samples)
    norm = D.normalize_apply(stats, samples)
    model = M.build(mc)
    log = (lambda ep, t: print(f"epoch {ep:4d}  loss {t.train_loss[-1]:.6f}", flush=True)) if args.verbose else None
    trace = tr.fit(model, norm, None, tc, log=log)
    _, acc = tr.evaluate_loss(model, norm)
    stem = args.out[:-5] if args.out.endswith(".ckpt") else args.out
    M.save(model, args.out, meta={
        "epochs": len(trace),
        "final_loss": trace.train_loss[-1],
        "train_accuracy": acc,
        "manual_features": int(args.manual_features),
        "window": args.window,
        "norm_mean": stats.mean,
        "norm_std": stats.std,
    })
    trace.write_csv(stem + ".trace.csv")
    print(f"trained {mc.variant}: {len(trace)} epochs, final loss {trace.train_loss[-1]:.6f}, "
          f"train accuracy {acc:.4f}")
    _write_manifest(stem + ".manifest.json", _manifest(
        args, argv, outputs=[args.out, stem + ".trace.csv"],
        model_config=asdict(mc), train_config=asdict(tc),
        resolved_config=config_text(mc, tc)))
    return 0


def cmd_crossval(args, argv):
    values = load_config_file(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in M.VARIANTS:
            raise UsageError(f"unknown variant {v!r}; valid variants: {', '.join(M.VARIANTS)}")
    mc, tc = split_config(values, variant=variants[0], seed=args.seed)
    samples = _read_samples(args.data)
    if args.k < 2 or args.k > len(samples):
        raise UsageError(f"--k {args.k} is invalid for {len(samples)} samples")
    plan = E.kfold_plan(len(samples), args.k, args.seed)
    runs = [(v, v, samples) for v in variants]
    if args.manual_features:
        runs.append((FEATURE_ROW, "bilstm_attention", _prepare(samples, True, args.window)))
    results = {}
    for label, variant, data in runs:
        cfg = _model_config_for(replace(mc, variant=variant), data)

        def log(f, label=label):
            if f.report is None:
                print(f"[{label}] fold {f.fold}: FAILED ({f.error})", flush=True)
            else:
                print(f"[{label}] fold {f.fold}: accuracy {f.report.accuracy:.4f} "
                      f"auc {f.report.roc_auc:.4f}", flush=True)

        results[label] = E.crossval(cfg, tc, data, plan, jobs=args.jobs, log=log)
    summary = D.summarize(samples)
    manifest = _manifest(
        args, argv, model_config=asdict(mc), train_config=asdict(tc),
        resolved_config=config_text(mc, tc), fold_sizes=plan.sizes(),
        data_summary={"households": summary.households, "total_days": summary.total_days,
                      "overall_ratio": summary.overall_ratio})
    paths = E.emit_report(results, args.out, manifest)
    with open(os.path.join(args.out, "summary.txt")) as fh:
        print(fh.read(), end="")
    print("wrote " + ", ".join(paths))
    if all(r.aggregate is None for r in results.values()):
        print("every fold aborted numerically", file=sys.stderr)
        return 3
    return 0


def cmd_gradcheck(args, argv):
    from . import gradcheck
    from . import tensor as tn

    if args.corrupt_op:
        with tn.corrupt_backward(args.corrupt_op):
            rows = gradcheck.run_suite(args.seed)
    else:
        rows = gradcheck.run_suite(args.seed)
    failing = []
    for name, err, tol in rows:
        ok = err < tol
        print(f"{name:34s} {err:.3e}  (< {tol:.0e})  {'ok' if ok else 'FAIL'}")
        if not ok:
            failing.append(name)
    print(f"kernel backend: {kernels.BACKEND}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report = os.path.join(args.out, "gradcheck.csv")
        with open(report, "w") as fh:
            fh.write("component,max_rel_error,tolerance\n")
            fh.writelines(f"{n},{e!r},{t!r}\n" for n, e, t in rows)
        _write_manifest(os.path.join(args.out, "manifest.json"), _manifest(
            args, argv, outputs=[report], failing=failing))
    if failing:
        print("failing components: " + ", ".join(failing))
        return 1
    print("all components pass")
    return 0


def cmd_replay(args, argv):
    with open(args.manifest) as fh:
        man = json.load(fh)
    old = list(man["argv"])
    tmp = None
    if "resolved_config" in man:
        tmp = tempfile.NamedTemporaryFile("w", suffix=".conf", delete=False)
        tmp.write(man["resolved_config"])
        tmp.close()
        if "--config" in old:
            i = old.index("--config")
            del old[i:i + 2]
        old += ["--config", tmp.name]
    try:
        return main(old)
    finally:
        if tmp is not None:
            os.unlink(tmp.name)


def build_parser():
    p = argparse.ArgumentParser(prog="hybridocc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="resample raw 1 Hz data to hourly day samples")
    s.add_argument("--raw", help=f"raw data root (default: ${DATA_DIR_ENV})")
    s.add_argument("--out", required=True)
    s.add_argument("--min-complete", type=float, default=0.95,
                   help="minimum non-missing fraction per hour (default 0.95)")
    s.add_argument("--tie-label", type=int, choices=(0, 1), default=1)
    s.add_argument("--features", type=int, default=None, help="expected meter columns")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("synth", help="write a synthetic processed dataset")
    s.add_argument("--households", type=int, default=5)
    s.add_argument("--days", type=int, default=60)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--boost", type=float, default=1.0, help="occupied appliance load scale (0: no signal)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one model on a processed dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--variant", default=None, help="one of: " + ", ".join(M.VARIANTS))
    s.add_argument("--config", default=None, help="key = value file")
    s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--manual-features", action="store_true")
    s.add_argument("--window", type=int, default=3)
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("crossval", help="K-fold cross-validation of one or more variants")
    s.add_argument("--data", required=True)
    s.add_argument("--variants", default=",".join(M.VARIANTS))
    s.add_argument("--config", default=None)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--manual-features", action="store_true",
                   help="add a bilstm_attention row on windowed-statistics features")
    s.add_argument("--window", type=int, default=3)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_crossval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op, layer and model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None, help="directory for a csv report and manifest")
    s.add_argument("--corrupt-op", default=None, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("replay", help="re-run a subcommand from its manifest")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args, argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (D.DataFormatError, M.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except tr.NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
