"""Command line entry point: ``calsal <subcommand>``.

Exit codes: 0 on success, 2 for configuration errors, 3 for pipeline failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from . import harness as h
from .mapio import write_raw, write_saliency
from .model import accuracy, save_model
from .saliency import explain


EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE = 0, 2, 3


def _common(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="experiment TOML file (defaults built in)")
    parser.add_argument("--seed", type=int, default=default, help="master seed, overrides the config")
    parser.add_argument("--out", default=default, help="output directory, overrides the config")
    parser.add_argument("--jobs", type=int, default=default, help="worker processes for per-sample work")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calsal", description="Calibration and saliency experiments.")
    parser.add_argument("--version", action="version", version=f"calsal {__version__}")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _common(p, suppress=True)
        return p

    add("train", "train the classifier and save it as model.ctim")
    add("calibrate", "fit the calibrators and write ECE tables and reliability curves")
    p = add("explain", "write saliency maps for the first evaluation samples")
    p.add_argument("--samples", type=int, default=5, help="number of evaluation samples (default 5)")
    add("evaluate", "run the full evaluation protocol")
    p = add("sweep-temperature", "deletion area and ECE over a temperature grid")
    p.add_argument("--grid", type=float, nargs="+", help="temperatures (the fitted T is always added)")
    p = add("stability", "Lipschitz estimates of the saliency methods")
    p.add_argument("--points", type=int, help="number of evaluation samples to perturb")
    p.add_argument("--long-run", action="store_true", help="allow RISE and MP stability runs")
    add("report", "re-render CSV aggregates and plots from an existing output directory")
    return parser


def resolve_config(args) -> h.ExperimentConfig:
    config = h.load_config(args.config) if args.config else h.ExperimentConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.output_dir = args.out
    if getattr(args, "long_run", False):
        config.stability.long_run = True
    h.validate_config(config)
    return config


def cmd_train(config, args):
    with h.Run(config.output_dir) as run:
        run.enter("data")
        splits = h.make_splits(config)
        run.enter("model")
        model = h.obtain_model(config, splits)
        save_model(model, run.staging / "model.ctim")
        ev = splits.evaluation
        acc = accuracy(model, ev.images, ev.labels)
        run.write("train.json", json.dumps({"train_accuracy": model.meta.get("train_accuracy"),
                                            "evaluation_accuracy": acc,
                                            "config_hash": h.config_hash(config)}, indent=1, sort_keys=True))
    print(f"model written to {Path(config.output_dir) / 'model.ctim'}; evaluation accuracy {acc:.4f}")


def cmd_calibrate(config, args):
    with h.Run(config.output_dir) as run:
        splits, ctx = h._prepare(config, run)
        run.enter("ece")
        bundle = h.ReportBundle(config, model=ctx.base)
        bundle.calibration, bundle.reliability = h.calibration_table(config, ctx.variants, ctx.images,
                                                                     ctx.labels, ctx.base_logits)
        cal_hash = h.dataset_hash(splits.calibration)
        bundle.calibrators = {v.tag: h.calibrator_params(v, config.seed, cal_hash) for v in ctx.variants}
        bundle.seeds = {"master": config.seed}
        run.enter("report")
        h._write_bundle(bundle, run)
    for r in bundle.calibration:
        print(f"{r['variant']:>14}: accuracy {r['accuracy']:.4f}  ECE binned {r['ece_binned']:.4f}  "
              f"density {r['ece_density']:.4f}")


def cmd_explain(config, args):
    n = min(args.samples, config.split.evaluation)
    digest = h.config_hash(config)
    with h.Run(config.output_dir) as run:
        _, ctx = h._prepare(config, run)
        run.enter("saliency")
        (run.staging / "maps").mkdir()
        for i in range(n):
            for v in ctx.variants:
                c = int(v.scores_from_base_logits(ctx.base_logits[i:i + 1]).argmax())
                for method in config.methods.names:
                    seed = h.derive_seed(config.seed, i, method)
                    smap = explain(method, v, ctx.images[i], c, config.methods.config_for(method), seed)
                    stem = run.staging / "maps" / f"{i:05d}_{method}_{v.tag}"
                    write_saliency(stem.with_suffix(".pgm"), smap, seed, digest)
                    write_raw(stem.with_suffix(".ctsm"), smap.raw if smap.raw is not None else smap.values)
    print(f"wrote {n * len(ctx.variants) * len(config.methods.names)} maps to {Path(config.output_dir) / 'maps'}")


def cmd_evaluate(config, args):
    bundle = h.run_experiment(config, jobs=args.jobs or 1)
    for a in bundle.aggregates:
        print(f"{a['method']:>24} {a['variant']:>14}: area {a['mean_deletion_area']:.4f}  "
              f"random {a['mean_random_area']:.4f}  BTR {a['btr']:.3f}  TV {a['mean_otsu_tv']:.1f}")
    print(f"report written to {config.output_dir} in {bundle.timings['total_s']:.1f} s")


def cmd_sweep(config, args):
    bundle = h.temperature_sweep(config, args.grid, jobs=args.jobs or 1)
    for r in bundle.sweep:
        mark = " *" if r["is_fitted"] else ""
        print(f"T={r['temperature']:<8.4g} ECE {r['ece_binned']:.4f}  {r['method']}: {r['mean_deletion_area']:.4f}{mark}")


def cmd_stability(config, args):
    bundle = h.stability_experiment(config, args.points)
    for s in bundle.stability_summary:
        print(f"{s['method']:>24} {s['variant']:>14}: median {s['median']:.4f}  "
              f"[{s['min']:.4f}, {s['max']:.4f}]")


def cmd_report(config, args):
    bundle = h.bundle_from_dir(config.output_dir)
    names = h.emit_report(bundle, config.output_dir)
    print(f"re-rendered {len(names)} files in {config.output_dir}")


COMMANDS = {
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "explain": cmd_explain,
    "evaluate": cmd_evaluate,
    "sweep-temperature": cmd_sweep,
    "stability": cmd_stability,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report" and args.config is None and args.out is not None:
            manifest = Path(args.out) / "manifest.json"
            if not manifest.is_file():
                raise h.ConfigError(f"{manifest} not found")
            config = h.config_from_dict(json.loads(manifest.read_text())["config"])
            config.output_dir = args.out
        else:
            config = resolve_config(args)
        if args.jobs is not None and args.jobs < 1:
            raise h.ConfigError("--jobs must be at least 1")
        COMMANDS[args.command](config, args)
    except h.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except h.PipelineError as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except Exception as exc:  # anything escaping outside a staged run
        print(f"pipeline failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
