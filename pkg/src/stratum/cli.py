"""Command-line entry point: ``stratum <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import harness, riskest, synthgen


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _echo(out: Path, args) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {k: v for k, v in vars(args).items() if k != "func"}
    (out / "config.echo").write_text(yaml.safe_dump(doc, sort_keys=True))


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    changes = {}
    if args.trials is not None:
        changes["trials"] = args.trials
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.workers is not None:
        changes["workers"] = args.workers
    return cfg.replace(**changes) if changes else cfg


def _print_summary(report: harness.RunReport) -> None:
    s = report.summary
    print(f"completed trials: {len(s['completed_trials'])}/{s['trials']}")
    for f in s["failed_trials"]:
        print(f"  trial {f['trial']} failed: {f['error']}")
    for method, splits in sorted(s["metrics"].items()):
        test = splits.get("test", {})
        parts = []
        for kind in ("superclass", "cluster", "true_subclass"):
            if kind in test:
                key = "overall" if kind == "superclass" else "robust"
                e = test[kind][key]
                label = "overall" if kind == "superclass" else f"{kind}_robust"
                parts.append(f"{label}={e['mean']:.4f}±{e['ci95']:.4f}")
        if parts:
            print(f"  {method}: " + "  ".join(parts))
    if report.out_dir is not None:
        print(f"run directory: {report.out_dir}")


def cmd_synth(args) -> int:
    out = Path(args.out)
    _echo(out, args)
    if args.source == "example1":
        spec = synthgen.example1_spec(args.alpha)
    elif args.source == "lemma1":
        spec = synthgen.lemma1_spec(args.d, args.seed)
    else:
        if not args.spec:
            raise harness.ConfigError("--spec is required with --source spec")
        spec = synthgen.GenerativeSpec.loads(Path(args.spec).read_text())
    (out / "spec.json").write_text(spec.dumps() + "\n")
    data = synthgen.sample_dataset(spec, args.n, args.seed)
    name = "data.csv" if args.format == "csv" else "data.f32bin"
    harness.write_dataset(data, out / name, args.format, include_z=not args.no_z)
    print(f"wrote {data.n} rows x {data.d} features to {out / name}")
    return 0


def cmd_method(methods):
    def run(args) -> int:
        cfg = _config(args)
        chosen = methods
        if methods is None:
            chosen = _kinds(args.kinds)
        reuse = getattr(args, "clusters", None)
        report = harness.run_experiment(cfg, chosen, args.out, reuse=reuse)
        _print_summary(report)
        return 0 if report.summary["completed_trials"] else 1
    return run


def _kinds(text):
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    for k in kinds:
        if k not in harness.BASELINES:
            raise harness.ConfigError(f"unknown baseline {k!r}; choose from {harness.BASELINES}")
    return kinds


def cmd_eval(args) -> int:
    run = Path(args.run)
    out = Path(args.out) if args.out else run / "eval"
    report = harness.evaluate_run(run, out)
    same = all((run / f).read_bytes() == (out / f).read_bytes()
               for f in ("metrics.csv", "summary.json"))
    _print_summary(report)
    print("reports identical to the saved run" if same else "reports differ from the saved run")
    return 0 if same else 1


def cmd_lemma1(args) -> int:
    out = Path(args.out)
    _echo(out, args)
    res = riskest.lemma1_experiment(args.d, args.n_grid, args.trials, args.seed)
    (out / "lemma1.csv").write_text(res.to_csv())
    summary = {"d": args.d, "trials": args.trials, "seed": args.seed,
               "n_grid": [int(n) for n in res.n_grid], "mean_gaps": res.mean_gaps.tolist(),
               "slope": res.slope, "intercept": res.intercept}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    for n, g in zip(res.n_grid, res.mean_gaps):
        print(f"n={int(n):6d}  mean max-gap={g:.5f}")
    print(f"log-log slope: {res.slope:.4f}")
    return 0


def cmd_example1(args) -> int:
    out = Path(args.out)
    _echo(out, args)
    rows = harness.example1_sweep(args.alpha, args.n, args.trials, args.seed)
    table = harness.sweep_table(rows)
    (out / "example1.csv").write_text(table)
    summary = {}
    for alpha in args.alpha:
        sel = [r for r in rows if r.alpha == alpha]
        summary[repr(alpha)] = {
            "erm_robust_acc": sum(r.erm_robust for r in sel) / len(sel),
            "gdro_robust_acc": sum(r.gdro_robust for r in sel) / len(sel),
            "erm_angle_deg": sum(r.erm_angle for r in sel) / len(sel),
            "gdro_angle_deg": sum(r.gdro_angle for r in sel) / len(sel),
        }
    (out / "summary.json").write_text(
        json.dumps({"n": args.n, "seed": args.seed, "trials": args.trials, "alpha": summary},
                   indent=1, sort_keys=True) + "\n")
    print(f"{'alpha':>8} {'ERM robust':>11} {'GDRO robust':>12} {'ERM angle':>10} {'GDRO angle':>11}")
    for alpha, e in summary.items():
        print(f"{float(alpha):8.3f} {e['erm_robust_acc']:11.4f} {e['gdro_robust_acc']:12.4f} "
              f"{e['erm_angle_deg']:10.2f} {e['gdro_angle_deg']:11.2f}")
    return 0


def _experiment_flags(p, default_out):
    p.add_argument("--config", help="YAML/JSON experiment configuration")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="trials run in parallel processes")
    p.add_argument("--out", default=default_out, help="run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stratum",
        description="Hidden-subclass discovery by clustering, then worst-group robust training.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="sample a synthetic dataset")
    p.add_argument("--source", choices=("example1", "lemma1", "spec"), default="example1")
    p.add_argument("--alpha", type=float, default=0.02)
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--spec", help="serialized generative spec (with --source spec)")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "f32bin"), default="csv")
    p.add_argument("--no-z", action="store_true", help="omit subclass labels")
    p.add_argument("--out", default="runs/synth")
    p.set_defaults(func=cmd_synth)

    for name, methods, helptext in (
            ("erm", ["erm"], "ERM baseline"),
            ("cluster", ["cluster"], "ERM featurizer and per-superclass clustering"),
            ("george", ["george"], "full pipeline: ERM, cluster, GDRO on clusters")):
        p = sub.add_parser(name, help=helptext)
        _experiment_flags(p, f"runs/{name}")
        p.set_defaults(func=cmd_method(methods))

    p = sub.add_parser("gdro", help="GDRO on the clusters of a saved cluster run")
    _experiment_flags(p, "runs/gdro")
    p.add_argument("--clusters", required=True, help="run directory written by `stratum cluster`")
    p.set_defaults(func=cmd_method(["george"]))

    p = sub.add_parser("baselines", help="ERM and GDRO baselines")
    _experiment_flags(p, "runs/baselines")
    p.add_argument("--kinds", default=",".join(harness.BASELINES),
                   help="comma-separated subset of " + ",".join(harness.BASELINES))
    p.set_defaults(func=cmd_method(None))

    p = sub.add_parser("eval", help="recompute the reports of a saved run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", help="where to write the recomputed reports (default RUN/eval)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lemma1", help="reweighted-risk error versus sample size")
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-grid", type=_ints, default=[250, 500, 1000, 2000, 4000, 8000])
    p.add_argument("--out", default="runs/lemma1")
    p.set_defaults(func=cmd_lemma1)

    p = sub.add_parser("example1", help="ERM versus subclass GDRO across alpha")
    p.add_argument("--alpha", type=_floats, default=[0.1, 0.05, 0.02, 0.01])
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/example1")
    p.set_defaults(func=cmd_example1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, harness.DatasetParseError, FileNotFoundError) as exc:
        print(f"stratum {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
