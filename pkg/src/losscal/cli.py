"""``losscal`` command line: data generation, joint training, ODIN tuning,
OOD and unseen-class evaluation, gradient self-checks and the full pipeline.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(including a failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics, odin, pipeline, synthdata
from .config import ConfigParseError, RunConfig, clamp_range, load_config
from .nets import ConfigError
from .training import CheckpointError, NumericalError, load_checkpoint, save_checkpoint

log = logging.getLogger("losscal")

GRADCHECK_TOL = 1e-5


class UsageError(Exception):
    pass


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    for assignment in args.set or ():
        cfg.override(assignment)
    # dedicated flags win over both the file and --set
    for flag, (section, key) in {
        "seed": ("run", "seed"), "seeds": ("run", "seeds"), "split": ("run", "split"),
        "aux": ("loss", "aux"), "epochs": ("train", "epochs"),
    }.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg.set(section, key, value, where=f"--{flag}")
    return cfg.validate()


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args):
    cfg = _resolve_config(args)
    out = _out_dir(args)
    bench = pipeline.build_benchmark(cfg)
    sets = {
        "full-train": bench.full_train, "full-val": bench.full_val,
        "seen-train": bench.seen_train, "seen-val": bench.seen_val, "novel": bench.novel,
        **{f"ood-{k}": v for k, v in bench.ood.items()}, f"ood-{bench.tune.tag}": bench.tune,
    }
    with open(out / "datasets.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tag", "rows", "sha256"])
        for tag, data in sets.items():
            synthdata.save_csv(data, out / f"{tag}.csv")
            w.writerow([tag, len(data), data.checksum()])
    cfg.save(out / "config.resolved.ini")
    print(f"wrote {len(sets)} datasets to {out}")


def cmd_train(args):
    cfg = _resolve_config(args)
    out = _out_dir(args)
    bench = pipeline.build_benchmark(cfg)
    aux = cfg["loss"]["aux"]
    model, history = pipeline.train_model(cfg, bench, cfg["run"]["split"], aux)
    save_checkpoint(model, out / f"model-{aux}.ckpt")
    history.write_csv(out / f"history-{aux}.csv")
    cfg.save(out / "config.resolved.ini")
    last = history[-1]
    print(f"trained aux={aux} split={cfg['run']['split']}: val balanced accuracy {last.val_balacc:.4f}")


def _load_model(path):
    return load_checkpoint(path)


def cmd_eval(args):
    cfg = _resolve_config(args)
    out = _out_dir(args)
    model = _load_model(args.checkpoint)
    if args.data:
        data = synthdata.load_csv(args.data, tag=args.data)
        if data.labels is None:
            raise UsageError(f"{args.data}: evaluation data needs a label column")
        data.class_names = [f"class{c}" for c in range(model.arch.num_classes)]
    else:
        tag = args.dataset or f"{model.meta.get('split', cfg['run']['split'])}-val"
        data = pipeline.build_benchmark(cfg).labeled(tag)
    summary = pipeline.classification_summary(model, data)
    stem = Path(args.checkpoint).stem
    pipeline.write_classification_report(out / f"eval-{stem}.csv", summary, data.class_names)
    pipeline.write_predictions(out / f"predictions-{stem}.csv", summary)
    print(f"balanced accuracy {summary['balacc']:.4f}, Kendall tau {summary['kendall_tau']:.4f}")


def cmd_odin_tune(args):
    cfg = _resolve_config(args)
    out = _out_dir(args)
    model = _load_model(args.checkpoint)
    params = pipeline.tune_odin(cfg, model, pipeline.build_benchmark(cfg))
    path = out / f"odin-{Path(args.checkpoint).stem}.txt"
    params.save(path)
    print(f"T={params.temperature:g} eta={params.eta:g} tau={params.tau:.6g} "
          f"tuning FPR@TPR95={params.tuning_metric:.4f} -> {path}")


def _score_rows(scores, bench):
    for tag, values in scores.items():
        for i, s in enumerate(values):
            yield i, tag, s, None


def cmd_ood_eval(args):
    cfg = _resolve_config(args)
    out = _out_dir(args)
    if args.scores:
        scores = odin.read_scores(args.scores)
        if "inliers" not in scores:
            raise UsageError(f"{args.scores}: no rows tagged 'inliers'")
        if not args.include_tuning_set:
            scores = {k: v for k, v in scores.items() if not k.endswith("-tune")}
        stem = Path(args.scores).stem
    else:
        if not (args.checkpoint and args.params):
            raise UsageError("ood-eval needs --checkpoint and --params (or --scores)")
        model = _load_model(args.checkpoint)
        params = odin.OdinParams.load(args.params)
        bench = pipeline.build_benchmark(cfg)
        scores = pipeline.score_sets(cfg, model, bench, params, include_tuning=args.include_tuning_set)
        stem = Path(args.checkpoint).stem
        odin.write_scores(out / f"scores-{stem}.csv", _score_rows(scores, bench))
    table = pipeline.ood_table(scores)
    metrics.write_table(table, out / f"ood-{stem}.csv")
    for tag, rep in table:
        print(f"{tag:>18s}  AUROC {rep.auroc:.4f}  FPR@TPR95 {rep.fpr_at_tpr95:.4f}")


def cmd_novel_eval(args):
    cfg = _resolve_config(args)
    out = _out_dir(args)
    model = _load_model(args.checkpoint)
    params = odin.OdinParams.load(args.params)
    report, ins, outs = pipeline.novel_report(cfg, model, pipeline.build_benchmark(cfg), params)
    stem = Path(args.checkpoint).stem
    metrics.write_table([("novel", report)], out / f"novel-{stem}.csv")
    odin.write_scores(out / f"novel-scores-{stem}.csv",
                      [(i, "inliers", s, None) for i, s in enumerate(ins)]
                      + [(i, "novel", s, None) for i, s in enumerate(outs)])
    print(f"unseen-class AUROC {report.auroc:.4f}")


def cmd_gradcheck(args):
    rows = pipeline.gradient_self_check(seeds=range(args.seeds), epsilon=args.epsilon)
    worst = max(err for *_, err in rows)
    if args.out:
        out = _out_dir(args)
        with open(out / "gradcheck.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "aux", "leaf", "max_rel_error"])
            w.writerows([s, a, leaf, repr(float(e))] for s, a, leaf, e in rows)
    for aux in sorted({a for _, a, _, _ in rows}):
        per_leaf = {}
        for _, a, leaf, err in rows:
            if a == aux:
                per_leaf[leaf] = max(per_leaf.get(leaf, 0.0), err)
        print(f"[{aux}]")
        for leaf, err in per_leaf.items():
            print(f"  {leaf:<12s} {err:.3e}  {'ok' if err < args.tol else 'FAIL'}")
    status = "PASS" if worst < args.tol else "FAIL"
    print(f"gradcheck {status}: max relative error {worst:.3e} (tolerance {args.tol:g})")
    return 0 if worst < args.tol else 2


def _summary_rows(results):
    kinds = list(results[0].ood_auroc.get("none", {}))
    header = ["seed", "aux", "balacc", "kendall_tau", "var_ratio", "novel_auroc"] + [f"auroc_{k}" for k in kinds]
    rows = []
    for r in results:
        for aux in r.balacc:
            ood = r.ood_auroc.get(aux, {})
            rows.append([r.seed, aux, r.balacc[aux], r.kendall[aux], r.var_ratio[aux],
                         r.novel_auroc.get(aux, np.nan)] + [ood.get(k, np.nan) for k in kinds])
    for aux in results[0].balacc:
        sel = np.array([row[2:] for row in rows if row[1] == aux], dtype=float)
        # models without detection runs (mse) keep NaN columns
        rows.append(["mean", aux] + [col.mean() if np.isfinite(col).any() else np.nan for col in sel.T])
    return header, rows


def cmd_reproduce_all(args):
    cfg = _resolve_config(args)
    out = _out_dir(args)
    cfg.save(out / "config.resolved.ini")
    results = []
    base = cfg["run"]["seed"]
    for i in range(cfg["run"]["seeds"]):
        seed_cfg = pipeline.with_seed(cfg, base + i)
        seed_dir = out / f"seed-{base + i}"
        seed_dir.mkdir(exist_ok=True)
        log.info("seed %d", base + i)
        results.append(pipeline.run_seed(seed_cfg, out_dir=seed_dir))
    header, rows = _summary_rows(results)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(row[:2] + [repr(float(v)) for v in row[2:]])
    for row in rows:
        if row[0] == "mean":
            print(f"{row[1]:>12s}  balacc {row[2]:.4f}  tau {row[3]:.4f}  novel AUROC {row[5]:.4f}")
    print(f"wrote {out / 'summary.csv'}")


def _add_common(p, *, out_required=True):
    p.add_argument("--config", help="run configuration file (defaults apply when omitted)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, help="root seed (overrides run.seed)")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="losscal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write every benchmark set as CSV")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    _add_common(p)
    p.add_argument("--aux", choices=("contrastive", "mse", "none"))
    p.add_argument("--split", choices=("seen", "full"))
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class sensitivity and balanced accuracy")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--dataset", help="benchmark tag: full-train, full-val, seen-train, seen-val")
    group.add_argument("--data", help="labeled CSV file instead of a benchmark set")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("odin-tune", help="grid-search T and eta on the tuning OOD set")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_odin_tune)

    p = sub.add_parser("ood-eval", help="detection metrics for every evaluation OOD set")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--params", help="tuned ODIN parameter file")
    p.add_argument("--scores", help="score CSV to evaluate instead of a checkpoint")
    p.add_argument("--include-tuning-set", action="store_true", help="also report the tuning OOD set")
    p.set_defaults(func=cmd_ood_eval)

    p = sub.add_parser("novel-eval", help="unseen-class detection metrics")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--params", required=True)
    p.set_defaults(func=cmd_novel_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training graph")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    p.add_argument("--out", help="also write gradcheck.csv here")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("reproduce-all", help="every experiment for run.seeds root seeds")
    _add_common(p)
    p.add_argument("--seeds", type=int, help="number of root seeds (overrides run.seeds)")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_reproduce_all)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (NumericalError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigParseError, ConfigError, CheckpointError, UsageError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
