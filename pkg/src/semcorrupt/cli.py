"""Command line front end.

Exit codes: 0 success, 1 a verification check failed, 2 bad usage or
configuration, 3 runtime failure (diverged training, unreadable files,
undefined reweighting).
"""

from __future__ import annotations

import argparse
import json
import sys

from .corruptions import CorruptionSpec, Grid, SentencePair, apply
from .errors import TrainingError, UndefinedWeightError
from .families import Dataset
from .harness import (
    MethodSpec,
    desk_image_experiment,
    desk_nli_experiment,
    evaluate,
    generate_task,
    load_dataset,
    load_model,
    predictor_table_csv,
    run_experiment,
    run_method,
    save_dataset,
    save_model,
    verify_theory,
)
from .learner import FeatureSpec, LinearModel, TrainConfig, featurize, train
from .rng import derive_seed


def _infer_feature_spec(dataset: Dataset, ngram: int, buckets: int) -> FeatureSpec:
    first = dataset.covariates[0]
    if isinstance(first, Grid):
        return FeatureSpec("flatten_grid")
    if isinstance(first, SentencePair):
        return FeatureSpec("bag_of_ngrams", ngram=ngram, buckets=buckets)
    return FeatureSpec("raw_vector")


def _cmd_gen(args) -> int:
    ds = generate_task(args.task, args.rho, args.n, args.seed, args.flip)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} {args.task} examples to {args.out}")
    return 0


def _cmd_corrupt(args) -> int:
    ds = load_dataset(args.src)
    spec = CorruptionSpec(args.kind, args.param, args.seed)
    covs = [apply(spec, cov, i) for i, cov in enumerate(ds.covariates)]
    out = Dataset(
        covariates=covs,
        labels=ds.labels,
        n_classes=ds.n_classes,
        nuisances=ds.nuisances,
        groups=ds.groups,
        provenance=ds.provenance | {"corruption": spec.label, "corruption_seed": spec.seed},
    )
    save_dataset(out, args.out)
    print(f"applied {spec.label} to {len(ds)} examples -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    ds = load_dataset(args.src)
    fs = _infer_feature_spec(ds, args.ngram, args.buckets)
    X = featurize(fs, ds.covariates)
    model = LinearModel(X.shape[1], ds.n_classes, args.hidden, seed=args.seed)
    cfg = TrainConfig(args.epochs, args.batch, args.lr, args.wd, seed=args.seed)
    losses = train(model, X, ds.labels, cfg)
    save_model(model, args.out)
    final = losses[-1] if losses else float("nan")
    print(f"trained {args.epochs} epochs, final loss {final:.4f} -> {args.out}")
    return 0


def _cmd_scam(args) -> int:
    ds = load_dataset(args.src)
    fs = _infer_feature_spec(ds, args.ngram, args.buckets)
    corruption = CorruptionSpec(args.kind, args.param, args.corruption_seed)
    method = MethodSpec(args.method, corruption, lambda_up=args.lambda_up,
                        gamma=args.gamma)
    cfg_main = TrainConfig(args.epochs, args.batch, args.lr, args.wd, seed=args.seed)
    cfg_aux = TrainConfig(args.aux_epochs, args.batch, args.aux_lr, args.wd,
                          seed=derive_seed(args.seed, 11))
    model = run_method(method, ds, fs, cfg_main, cfg_aux, args.hidden)
    save_model(model, args.out)
    print(f"{method.label} trained on {len(ds)} examples -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ds = load_dataset(args.src)
    model = load_model(args.model)
    fs = _infer_feature_spec(ds, args.ngram, args.buckets)
    rec = evaluate(model, ds, fs)
    if args.as_json:
        out = {"accuracy": rec.accuracy, "n": rec.n}
        if rec.worst_group is not None:
            out["worst_group"] = rec.worst_group
            out["groups"] = [
                {"group": g, "accuracy": a, "n": c} for g, a, c in rec.group_accuracies
            ]
        print(json.dumps(out, indent=2))
    else:
        print(f"accuracy {rec.accuracy:.4f} on {rec.n} examples")
        if rec.worst_group is not None:
            print(f"worst-group accuracy {rec.worst_group:.4f}")
            for g, a, c in rec.group_accuracies:
                print(f"  group {g}: {a:.4f} ({c} examples)")
    return 0


def _cmd_verify(args) -> int:
    report = verify_theory(args.fuzz, args.seed)
    for line in report.lines():
        print(line)
    if args.table:
        with open(args.table, "w") as fh:
            fh.write(predictor_table_csv())
        print(f"wrote predictor table to {args.table}")
    return 0 if report.ok else 1


def _cmd_report(args) -> int:
    preset = desk_image_experiment if args.task == "image" else desk_nli_experiment
    config, methods = preset(tuple(range(args.seeds)))
    result = run_experiment(config, methods)
    csv = result.to_csv()
    with open(args.out, "w") as fh:
        fh.write(csv)
    if args.per_seed:
        with open(args.per_seed, "w") as fh:
            fh.write(result.per_seed_csv())
    summ = result.summary()
    for m in methods:
        acc = summ[m.label]["test_flipped"].get("accuracy")
        if acc is None:
            print(f"{m.label}: no completed seeds")
        else:
            mean, sd, se, k = acc
            print(f"{m.label}: flipped-test accuracy {mean:.3f} "
                  f"(stddev {sd:.3f}, stderr {se:.3f}, {k} seeds)")
    failures = [(m.label, e) for m in methods
                for e in result.outcomes[m.label].errors]
    for label, (seed, msg) in failures:
        print(f"warning: {label} seed {seed} failed: {msg}", file=sys.stderr)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semcorrupt",
                                description="semantic corruptions toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--task", choices=("image", "nli"), required=True)
    g.add_argument("--rho", type=float, required=True,
                   help="label-nuisance relationship strength in [0, 1]")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--flip", action="store_true",
                   help="invert the label-nuisance relationship")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen)

    c = sub.add_parser("corrupt", help="apply a corruption to a saved dataset")
    c.add_argument("--in", dest="src", required=True)
    c.add_argument("--kind", required=True)
    c.add_argument("--param", type=float, default=None)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=_cmd_corrupt)

    t = sub.add_parser("train", help="train a plain ERM model")
    _add_train_args(t)
    t.set_defaults(func=_cmd_train)

    s = sub.add_parser("scam", help="train a debiasing method")
    _add_train_args(s)
    s.add_argument("--method", choices=("nurd", "jtt", "poe", "dfl"), required=True)
    s.add_argument("--kind", required=True, help="corruption kind")
    s.add_argument("--param", type=float, default=None)
    s.add_argument("--corruption-seed", type=int, default=0)
    s.add_argument("--lambda-up", type=int, default=6)
    s.add_argument("--gamma", type=float, default=2.0)
    s.add_argument("--aux-epochs", type=int, default=30)
    s.add_argument("--aux-lr", type=float, default=0.1)
    s.set_defaults(func=_cmd_scam)

    e = sub.add_parser("eval", help="evaluate a saved model on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--in", dest="src", required=True)
    e.add_argument("--json", dest="as_json", action="store_true")
    e.add_argument("--ngram", type=int, default=2)
    e.add_argument("--buckets", type=int, default=64)
    e.set_defaults(func=_cmd_eval)

    v = sub.add_parser("verify-theory", help="run the exact-distribution checks")
    v.add_argument("--fuzz", type=int, default=200)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--table", default=None,
                   help="also write the 16-predictor table as CSV here")
    v.set_defaults(func=_cmd_verify)

    r = sub.add_parser("report", help="run a desk benchmark and write CSV")
    r.add_argument("--task", choices=("image", "nli"), required=True)
    r.add_argument("--seeds", type=int, default=5, help="number of seeds")
    r.add_argument("--out", required=True)
    r.add_argument("--per-seed", default=None)
    r.set_defaults(func=_cmd_report)
    return p


def _add_train_args(sp) -> None:
    sp.add_argument("--in", dest="src", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--batch", type=int, default=64)
    sp.add_argument("--lr", type=float, default=0.1)
    sp.add_argument("--wd", type=float, default=0.0)
    sp.add_argument("--hidden", type=int, default=0)
    sp.add_argument("--ngram", type=int, default=2)
    sp.add_argument("--buckets", type=int, default=64)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TrainingError, UndefinedWeightError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, TypeError) as exc:
        # includes dispatch errors from feature/covariate kind mismatches
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
