"""Command-line pipeline: file-based stages over a run directory.

Stages communicate only through the documented formats (flow JSON-lines,
dataset CSV, split JSON, model JSON, curve CSV). Every command is
deterministic given its inputs and seeds, writes a ``<output>.meta.json``
sidecar echoing its arguments, and leaves its inputs untouched.

Exit codes: 0 success, 2 invalid configuration or malformed input, 1
runtime failure. ``FLOWDOOR_THREADS`` caps the BLAS thread count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_TARGETS = {"benign": 0, "attack": 1}


def _apply_thread_env():
    n = os.environ.get("FLOWDOOR_THREADS")
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, n)


def _write_meta(out_path, args):
    skip = {"func"}
    meta = {"command": args.command,
            "args": {k: v for k, v in sorted(vars(args).items()) if k not in skip}}
    path = Path(str(out_path) + ".meta.json")
    path.write_text(json.dumps(meta, indent=2, default=str) + "\n")


def _run_dir(args):
    d = Path(args.run_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _default(args, attr, filename):
    val = getattr(args, attr)
    return Path(val) if val else _run_dir(args) / filename


def _load_split(path):
    from .errors import ParseError
    import numpy as np
    try:
        obj = json.loads(Path(path).read_text())
        return {part: np.asarray(obj[part], dtype=int)
                for part in ("train", "validation", "test")}
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: bad split file ({exc})") from exc


def _part_rows(splits, part):
    from .errors import ConfigError
    import numpy as np
    if part == "all":
        return np.sort(np.concatenate(list(splits.values())))
    if part not in splits:
        raise ConfigError(f"unknown part {part!r}")
    return splits[part]


def _load_model(path, kind):
    if kind == "rf":
        from .forest import load_forest
        return load_forest(path)
    from .mlp import load_mlp
    return load_mlp(path)


def _scorer(model, kind, stats):
    from .explain import forest_predictor, mlp_predictor
    return forest_predictor(model, stats) if kind == "rf" else mlp_predictor(model, stats)


def _load_norm(path):
    from .errors import ParseError
    from .features import NormStats
    import numpy as np
    try:
        obj = json.loads(Path(path).read_text())
        return NormStats(mean=np.asarray(obj["mean"], dtype=float),
                         std=np.asarray(obj["std"], dtype=float))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: bad normalization file ({exc})") from exc


def _save_norm(stats, path):
    Path(path).write_text(json.dumps(
        {"mean": stats.mean.tolist(), "std": stats.std.tolist()},
        separators=(",", ":")) + "\n")


def _backdoored_dataset(flows, rows, stats):
    """Normalized features of backdoored copies of the attack flows at rows."""
    from .errors import ConfigError
    from .features import Dataset, zscore_transform
    from .metrics import backdoored_features
    import numpy as np
    attack = [flows[i] for i in rows if flows[i].label == 1]
    if not attack:
        raise ConfigError("selected part holds no attack flows")
    X = zscore_transform(stats, backdoored_features(attack))
    return Dataset(X, np.ones(len(attack), dtype=int),
                   np.ones(len(attack), dtype=bool)), attack


# --- commands ---------------------------------------------------------------

def cmd_generate(args):
    from .traffic import GenConfig, generate_flows, write_flows
    out = _default(args, "out", "flows.jsonl")
    config = GenConfig(n_benign=args.benign, n_attack=args.attack, seed=args.seed,
                       benign_short_rate=args.short_rate,
                       benign_nonconstant_ttl_rate=args.nonconstant_ttl)
    write_flows(generate_flows(config), out)
    _write_meta(out, args)
    print(f"wrote {out}")


def cmd_featurize(args):
    from .traffic import read_flows
    from .features import dataset_from_flows, write_dataset_csv
    out = _default(args, "out", "features.csv")
    ds = dataset_from_flows(read_flows(args.flows))
    write_dataset_csv(ds, out)
    _write_meta(out, args)
    print(f"wrote {out} ({len(ds)} rows)")


def cmd_poison(args):
    from .traffic import read_flows, write_flows, poison_training_set
    out = _default(args, "out", "train_flows.jsonl")
    flows = read_flows(args.flows)
    if args.split:
        rows = _part_rows(_load_split(args.split), args.part)
        flows = [flows[i] for i in rows]
    poisoned = poison_training_set(flows, args.rate, _TARGETS[args.target], args.seed)
    write_flows(poisoned, out)
    _write_meta(out, args)
    print(f"wrote {out} ({len(poisoned) - len(flows)} backdoored copies added)")


def cmd_split(args):
    from .features import read_dataset_csv, split
    out = _default(args, "out", "split.json")
    spec = split(read_dataset_csv(args.features), args.seed)
    obj = {"seed": spec.seed, "train": spec.train.tolist(),
           "validation": spec.validation.tolist(), "test": spec.test.tolist()}
    Path(out).write_text(json.dumps(obj, separators=(",", ":")) + "\n")
    _write_meta(out, args)
    print(f"wrote {out} (train {len(spec.train)}, val {len(spec.validation)}, "
          f"test {len(spec.test)})")


def cmd_train_rf(args):
    import numpy as np
    from .features import read_dataset_csv, zscore_fit, zscore_apply, kfold
    from .forest import ForestParams, train_forest, predict_forest, save_forest
    out = _default(args, "out", "rf.json")
    norm_out = _default(args, "norm_out", "norm.json")
    train = read_dataset_csv(args.train_features)
    stats = zscore_fit(train)
    _save_norm(stats, norm_out)
    params = ForestParams(n_estimators=args.trees, max_depth=args.max_depth,
                          min_samples_leaf=args.min_leaf, seed=args.seed)
    forest = train_forest(zscore_apply(stats, train), params)
    save_forest(forest, out)
    _write_meta(out, args)
    print(f"wrote {out} and {norm_out}")
    if args.cv:
        accs = []
        for tr_idx, te_idx in kfold(train, k=args.cv, seed=args.seed):
            tr, te = train.subset(tr_idx), train.subset(te_idx)
            st = zscore_fit(tr)
            f = train_forest(zscore_apply(st, tr), params)
            _, labels = predict_forest(f, zscore_apply(st, te).X)
            accs.append(float(np.mean(labels == te.y)))
        cv_out = _run_dir(args) / "rf_cv.json"
        cv_out.write_text(json.dumps(
            {"k": args.cv, "fold_accuracies": accs,
             "spread": max(accs) - min(accs)}, indent=2) + "\n")
        print(f"wrote {cv_out} (fold accuracies {[round(a, 4) for a in accs]})")


def cmd_train_mlp(args):
    from .features import read_dataset_csv, zscore_fit, zscore_apply
    from .mlp import train_mlp, save_mlp
    out = _default(args, "out", "mlp.json")
    norm_out = _default(args, "norm_out", "norm.json")
    train = read_dataset_csv(args.train_features)
    stats = zscore_fit(train)
    _save_norm(stats, norm_out)
    hidden = tuple(int(h) for h in args.hidden.split(","))
    net = train_mlp(zscore_apply(stats, train), epochs=args.epochs, batch=args.batch,
                    lr=args.lr, momentum=args.momentum, hidden=hidden,
                    dropout=args.dropout, seed=args.seed)
    save_mlp(net, out)
    _write_meta(out, args)
    loss = f" (final train loss {net.train_loss[-1]:.4f})" if net.train_loss else ""
    print(f"wrote {out} and {norm_out}{loss}")


def _eval_sets(args, stats):
    """(clean part Dataset normalized, part rows, flows) for eval-style commands."""
    from .traffic import read_flows
    from .features import read_dataset_csv, zscore_apply
    ds = read_dataset_csv(args.features)
    splits = _load_split(args.split)
    rows = _part_rows(splits, args.part)
    flows = read_flows(args.flows)
    return zscore_apply(stats, ds.subset(rows)), splits, rows, flows


def cmd_eval(args):
    import numpy as np
    from .metrics import confusion, metrics_report, backdoor_accuracy, write_report_json
    out = _default(args, "out", f"eval_{args.model_kind}.json")
    stats = _load_norm(args.norm)
    model = _load_model(args.model, args.model_kind)
    scorer = _scorer(model, args.model_kind, stats)
    clean, splits, rows, flows = _eval_sets(args, stats)
    if args.model_kind == "rf":
        from .forest import predict_forest
        _, labels = predict_forest(model, clean.X)
    else:
        from .mlp import predict_mlp
        _, labels = predict_mlp(model, clean.X)
    report = metrics_report(confusion(clean.y, labels))
    attack = [flows[i] for i in rows if flows[i].label == 1]
    if attack:
        report.backdoor_accuracy = backdoor_accuracy(scorer, attack,
                                                     _TARGETS[args.target])
    write_report_json(report, out)
    _write_meta(out, args)
    print(f"wrote {out} (accuracy {report.accuracy:.4f}, "
          f"backdoor {report.backdoor_accuracy})")


def cmd_prune_rf(args):
    import numpy as np
    from .errors import ConfigError
    from .features import zscore_apply, read_dataset_csv
    from .traffic import read_flows
    from .forest import (record_leaf_usage, prune_forest, save_forest,
                         write_prune_curve_csv)
    out_model = _default(args, "out_model", "rf_pruned.json")
    out_curve = _default(args, "out_curve", "rf_prune_curve.csv")
    if not 0 < args.validation_scale <= 1:
        raise ConfigError(f"--validation-scale {args.validation_scale} outside (0,1]")
    stats = _load_norm(args.norm)
    forest = _load_model(args.model, "rf")
    ds = read_dataset_csv(args.features)
    splits = _load_split(args.split)
    flows = read_flows(args.flows)

    val_rows = splits["validation"]
    if args.validation_scale < 1.0:
        rng = np.random.default_rng(args.val_seed)
        keep = max(1, int(len(val_rows) * args.validation_scale))
        val_rows = np.sort(rng.choice(val_rows, size=keep, replace=False))
    validation = zscore_apply(stats, ds.subset(val_rows))
    record_leaf_usage(forest, validation)

    clean = zscore_apply(stats, ds.subset(splits["test"]))
    bd, _ = _backdoored_dataset(flows, splits["test"], stats)
    report = prune_forest(forest, args.variant, args.fraction, clean, bd,
                          target_label=_TARGETS[args.target],
                          checkpoint_every=args.checkpoint_every)
    write_prune_curve_csv(report, out_curve)
    save_forest(forest, out_model)
    _write_meta(out_curve, args)
    last = report.curve[-1]
    print(f"wrote {out_curve} and {out_model} "
          f"(final clean {last[2]:.4f}, backdoor {last[3]:.4f})")


def _write_mlp_prune_log(log, path):
    with open(path, "w") as fh:
        fh.write("step,layer,neuron,value\n")
        for s in log:
            fh.write(f"{s.step},{s.layer},{s.neuron},{s.value!r}\n")


def cmd_prune_mlp(args):
    from .mlp import (activation_stats, prune_neurons, save_mlp,
                      _accuracy_pair, write_accuracy_curve_csv)
    tag = f"{args.scope.split('_')[0]}_{args.mode}"
    out_curve = _default(args, "out_curve", f"mlp_prune_{tag}.csv")
    out_log = _default(args, "out_log", f"mlp_prune_{tag}_log.csv")
    out_model = _default(args, "out_model", f"mlp_pruned_{tag}.json")
    from .features import zscore_apply, read_dataset_csv
    stats = _load_norm(args.norm)
    net = _load_model(args.model, "mlp")
    clean, splits, rows, flows = _eval_sets(args, stats)
    ds = read_dataset_csv(args.features)
    validation = zscore_apply(stats, ds.subset(splits["validation"]))
    bd, _ = _backdoored_dataset(flows, rows, stats)
    target = _TARGETS[args.target]

    fractions = [args.checkpoint_every * i for i in
                 range(1, int(args.fraction / args.checkpoint_every) + 1)]
    if not fractions or fractions[-1] < args.fraction:
        fractions.append(args.fraction)
    curve = [(0.0, *_accuracy_pair(net, clean, bd, target))]
    full_log = []
    for frac in fractions:
        st = activation_stats(net, validation)
        net, log = prune_neurons(net, st, scope=args.scope, mode=args.mode,
                                 fraction=frac)
        full_log.extend(log)
        curve.append((frac, *_accuracy_pair(net, clean, bd, target)))
    write_accuracy_curve_csv(curve, out_curve, step_name="fraction_pruned")
    _write_mlp_prune_log(full_log, out_log)
    save_mlp(net, out_model)
    _write_meta(out_curve, args)
    last = curve[-1]
    print(f"wrote {out_curve}, {out_log}, {out_model} "
          f"(final clean {last[1]:.4f}, backdoor {last[2]:.4f})")


def cmd_finetune(args):
    from .features import zscore_apply, read_dataset_csv
    from .mlp import finetune, save_mlp, write_accuracy_curve_csv
    out_curve = _default(args, "out_curve", "finetune_curve.csv")
    out_model = _default(args, "out_model", "mlp_finetuned.json")
    stats = _load_norm(args.norm)
    net = _load_model(args.model, "mlp")
    clean, splits, rows, flows = _eval_sets(args, stats)
    ds = read_dataset_csv(args.features)
    validation = zscore_apply(stats, ds.subset(splits["validation"]))
    bd, _ = _backdoored_dataset(flows, rows, stats)
    net, curve = finetune(net, validation, args.epochs, args.lr, clean, bd,
                          target_label=_TARGETS[args.target], batch=args.batch,
                          momentum=args.momentum, seed=args.seed)
    write_accuracy_curve_csv(curve, out_curve)
    save_mlp(net, out_model)
    _write_meta(out_curve, args)
    print(f"wrote {out_curve} and {out_model} "
          f"(final backdoor {curve[-1][2]:.4f})")


def cmd_fine_prune(args):
    from .features import zscore_apply, read_dataset_csv
    from .mlp import fine_prune, save_mlp, write_accuracy_curve_csv
    tag = f"{args.scope.split('_')[0]}_{args.mode}"
    out_curve = _default(args, "out_curve", f"fine_prune_{tag}_curve.csv")
    out_log = _default(args, "out_log", f"fine_prune_{tag}_log.csv")
    out_model = _default(args, "out_model", f"mlp_fine_pruned_{tag}.json")
    out_report = _default(args, "out_report", f"fine_prune_{tag}.json")
    stats = _load_norm(args.norm)
    net = _load_model(args.model, "mlp")
    clean, splits, rows, flows = _eval_sets(args, stats)
    ds = read_dataset_csv(args.features)
    validation = zscore_apply(stats, ds.subset(splits["validation"]))
    bd, _ = _backdoored_dataset(flows, rows, stats)
    net, report = fine_prune(net, validation, args.scope, args.mode, args.fraction,
                             args.epochs, args.lr, clean, bd,
                             target_label=_TARGETS[args.target],
                             batch=args.batch, momentum=args.momentum,
                             seed=args.seed)
    write_accuracy_curve_csv(report["curve"], out_curve)
    _write_mlp_prune_log(report["prune_log"], out_log)
    save_mlp(net, out_model)
    Path(out_report).write_text(json.dumps(
        {"backdoor_before": report["backdoor_before"],
         "backdoor_after": report["backdoor_after"],
         "backdoor_dropped": report["backdoor_dropped"]}, indent=2) + "\n")
    _write_meta(out_report, args)
    print(f"wrote {out_report} (backdoor {report['backdoor_before']:.4f} -> "
          f"{report['backdoor_after']:.4f}, dropped: {report['backdoor_dropped']})")


def cmd_explain(args):
    import numpy as np
    from .errors import ConfigError
    from .features import FEATURE_INDEX, read_dataset_csv
    from .explain import make_grid, pdp, ale, write_curve_csv, write_curve_dat
    out = _default(args, "out", f"{args.kind}_{args.feature}.csv")
    if args.feature not in FEATURE_INDEX:
        raise ConfigError(f"unknown feature {args.feature!r}")
    fi = FEATURE_INDEX[args.feature]
    stats = _load_norm(args.norm)
    model = _load_model(args.model, args.model_kind)
    scorer = _scorer(model, args.model_kind, stats)
    ds = read_dataset_csv(args.features)
    rows = _part_rows(_load_split(args.split), args.part) if args.split \
        else np.arange(len(ds))
    ds = ds.subset(rows)
    if args.balanced:
        rng = np.random.default_rng(args.seed)
        idx0 = np.flatnonzero(ds.y == 0)
        idx1 = np.flatnonzero(ds.y == 1)
        n = min(len(idx0), len(idx1))
        if n == 0:
            raise ConfigError("balanced evaluation needs both classes")
        keep = np.sort(np.concatenate([rng.choice(idx0, n, replace=False),
                                       rng.choice(idx1, n, replace=False)]))
        ds = ds.subset(keep)
    if args.grid_min is not None and args.grid_max is not None:
        grid = make_grid(ds, fi, args.grid_points, (args.grid_min, args.grid_max))
    else:
        grid = make_grid(ds, fi, args.grid_points)
    if args.kind == "pdp":
        curve = pdp(scorer, ds, fi, grid)
    else:
        curve = ale(scorer, ds, fi, grid, k=args.k)
    write_curve_csv(curve, args.feature, out)
    write_curve_dat(curve, args.feature, Path(out).with_suffix(".dat"))
    _write_meta(out, args)
    print(f"wrote {out} ({len(curve.grid)} grid points)")


def cmd_correlate(args):
    import numpy as np
    from .errors import ParseError
    from .features import Dataset, zscore_apply, read_dataset_csv
    from .mlp import (neuron_backdoor_correlation, write_correlation_csv,
                      PruneNeuronStep)
    out = _default(args, "out", "correlation.csv")
    stats = _load_norm(args.norm)
    net = _load_model(args.model, "mlp")
    clean, splits, rows, flows = _eval_sets(args, stats)
    bd, _ = _backdoored_dataset(flows, rows, stats)
    rng = np.random.default_rng(args.seed)
    n = min(len(clean), len(bd))
    ci = np.sort(rng.choice(len(clean), n, replace=False))
    bi = np.sort(rng.choice(len(bd), n, replace=False))
    mixed = Dataset(np.vstack([clean.X[ci], bd.X[bi]]),
                    np.concatenate([clean.y[ci], bd.y[bi]]),
                    np.concatenate([np.zeros(n, dtype=bool), np.ones(n, dtype=bool)]))
    log = []
    with open(args.prune_log) as fh:
        header = fh.readline().strip()
        if header != "step,layer,neuron,value":
            raise ParseError(f"{args.prune_log}:1: unexpected header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                s, l, nrn, v = line.strip().split(",")
                log.append(PruneNeuronStep(step=int(s), layer=int(l),
                                           neuron=int(nrn), value=float(v)))
            except ValueError as exc:
                raise ParseError(f"{args.prune_log}:{lineno}: {exc}") from exc
    records = neuron_backdoor_correlation(net, mixed, log)
    write_correlation_csv(records, out)
    _write_meta(out, args)
    defined = [r.correlation for r in records if not r.undefined]
    mid = sum(1 for r in defined if 0.1 < r < 0.9)
    print(f"wrote {out} ({len(defined)} defined, {mid} in (0.1,0.9))")


def _curve_summary(path):
    import csv as _csv
    with open(path, newline="") as fh:
        rows = list(_csv.DictReader(fh))
    if not rows:
        return None
    first, last = rows[0], rows[-1]
    key = [k for k in first if k not in ("clean_accuracy", "backdoor_accuracy")][0]
    return {"points": len(rows),
            "baseline_clean": float(first["clean_accuracy"]),
            "baseline_backdoor": float(first["backdoor_accuracy"]),
            f"final_{key}": float(last[key]),
            "final_clean": float(last["clean_accuracy"]),
            "final_backdoor": float(last["backdoor_accuracy"])}


def cmd_report(args):
    run = Path(args.run_dir)
    out = run / "report.json"
    summary = {"run_dir": str(run), "models": {}, "defenses": {}, "artifacts": []}
    for p in sorted(run.glob("eval_*.json")):
        summary["models"][p.stem.removeprefix("eval_")] = json.loads(p.read_text())
    for p in sorted(run.glob("*prune_curve*.csv")) + sorted(run.glob("mlp_prune_*[!g].csv")):
        if p.name.endswith("_log.csv"):
            continue
        cs = _curve_summary(p)
        if cs:
            summary["defenses"][p.stem] = cs
    for p in sorted(run.glob("finetune_curve.csv")):
        cs = _curve_summary(p)
        if cs:
            summary["defenses"][p.stem] = cs
    for p in sorted(run.glob("fine_prune_*.json")):
        if p.name.endswith(".meta.json"):
            continue
        summary["defenses"][p.stem] = json.loads(p.read_text())
    corr = run / "correlation.csv"
    if corr.exists():
        import csv as _csv
        with open(corr, newline="") as fh:
            rows = list(_csv.DictReader(fh))
        defined = [float(r["correlation"]) for r in rows
                   if r["undefined_flag"] == "0"]
        mid = sum(1 for v in defined if 0.1 < v < 0.9)
        summary["correlation"] = {
            "records": len(rows), "defined": len(defined),
            "mid_fraction": mid / len(defined) if defined else 0.0}
    cv = run / "rf_cv.json"
    if cv.exists():
        summary["cross_validation"] = json.loads(cv.read_text())
    summary["artifacts"] = sorted(p.name for p in run.iterdir()
                                  if p.is_file() and p.name != "report.json")
    out.write_text(json.dumps(summary, indent=2) + "\n")
    _write_meta(out, args)
    print(f"wrote {out}")


# --- parser -----------------------------------------------------------------

def _add_common(p):
    p.add_argument("--run-dir", default="run", help="directory for artifacts")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="flowdoor",
        description=__doc__.splitlines()[0],
        epilog="Set FLOWDOOR_THREADS to cap the BLAS thread count.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate labeled synthetic flows")
    _add_common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--benign", type=int, default=8000)
    p.add_argument("--attack", type=int, default=2000)
    p.add_argument("--short-rate", type=float, default=0.10,
                   help="fraction of benign flows with short attack-sized packets")
    p.add_argument("--nonconstant-ttl", type=float, default=0.0,
                   help="fraction of benign flows with a non-constant TTL")
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("featurize", help="extract the 42-entry vectors to CSV")
    _add_common(p)
    p.add_argument("--flows", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("poison", help="append backdoored relabeled flow copies")
    _add_common(p)
    p.add_argument("--flows", required=True)
    p.add_argument("--split", help="restrict to one part of a split first")
    p.add_argument("--part", default="train",
                   choices=("train", "validation", "test", "all"))
    p.add_argument("--rate", type=float, default=0.5)
    p.add_argument("--target", default="benign", choices=tuple(_TARGETS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("split", help="stratified train/validation/test split")
    _add_common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-rf", help="train the random forest")
    _add_common(p)
    p.add_argument("--train-features", required=True)
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--min-leaf", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cv", type=int, default=0,
                   help="also run stratified k-fold CV and write rf_cv.json")
    p.add_argument("--norm-out")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_rf)

    p = sub.add_parser("train-mlp", help="train the MLP")
    _add_common(p)
    p.add_argument("--train-features", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--hidden", default="512,512,512,512,512")
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--norm-out")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_mlp)

    def eval_style(p, with_part=True):
        _add_common(p)
        p.add_argument("--model", required=True)
        p.add_argument("--norm", required=True)
        p.add_argument("--features", required=True)
        p.add_argument("--split", required=True)
        p.add_argument("--flows", required=True)
        if with_part:
            p.add_argument("--part", default="test",
                           choices=("train", "validation", "test", "all"))
        p.add_argument("--target", default="benign", choices=tuple(_TARGETS))

    p = sub.add_parser("eval", help="detection metrics plus backdoor accuracy")
    eval_style(p)
    p.add_argument("--model-kind", required=True, choices=("rf", "mlp"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prune-rf", help="leaf-pruning defense on the forest")
    eval_style(p, with_part=False)
    p.add_argument("--variant", type=int, default=3, choices=(1, 2, 3))
    p.add_argument("--fraction", type=float, default=0.9)
    p.add_argument("--validation-scale", type=float, default=1.0,
                   help="use only this fraction of the validation set")
    p.add_argument("--val-seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=float, default=0.01)
    p.add_argument("--out-model")
    p.add_argument("--out-curve")
    p.set_defaults(func=cmd_prune_rf, part="test")

    p = sub.add_parser("prune-mlp", help="neuron-pruning defense on the MLP")
    eval_style(p)
    p.add_argument("--scope", default="all_layers",
                   choices=("all_layers", "first_layer", "last_layer"))
    p.add_argument("--mode", default="mean", choices=("mean", "binary"))
    p.add_argument("--fraction", type=float, default=0.9)
    p.add_argument("--checkpoint-every", type=float, default=0.05)
    p.add_argument("--out-curve")
    p.add_argument("--out-log")
    p.add_argument("--out-model")
    p.set_defaults(func=cmd_prune_mlp)

    p = sub.add_parser("finetune", help="continue MLP training on clean validation")
    eval_style(p)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-curve")
    p.add_argument("--out-model")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("fine-prune", help="neuron pruning followed by fine-tuning")
    eval_style(p)
    p.add_argument("--scope", default="first_layer",
                   choices=("all_layers", "first_layer", "last_layer"))
    p.add_argument("--mode", default="mean", choices=("mean", "binary"))
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-curve")
    p.add_argument("--out-log")
    p.add_argument("--out-model")
    p.add_argument("--out-report")
    p.set_defaults(func=cmd_fine_prune)

    p = sub.add_parser("explain", help="PDP or ALE curve for one feature")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--model-kind", required=True, choices=("rf", "mlp"))
    p.add_argument("--norm", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--split")
    p.add_argument("--part", default="test",
                   choices=("train", "validation", "test", "all"))
    p.add_argument("--kind", default="pdp", choices=("pdp", "ale"))
    p.add_argument("--feature", required=True)
    p.add_argument("--grid-points", type=int, default=21)
    p.add_argument("--grid-min", type=float, default=None)
    p.add_argument("--grid-max", type=float, default=None)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--balanced", action="store_true",
                   help="evaluate over a class-balanced subset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("correlate",
                       help="neuron-activation vs backdoor correlation records")
    eval_style(p)
    p.add_argument("--prune-log", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("report", help="collate run artifacts into report.json")
    _add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    _apply_thread_env()
    args = _build_parser().parse_args(argv)
    from .errors import ConfigError, DimensionError, ParseError, SplitError
    try:
        args.func(args)
        return 0
    except (ConfigError, DimensionError, ParseError, SplitError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
