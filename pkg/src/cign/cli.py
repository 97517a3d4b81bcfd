"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 data or checkpoint
error, 4 diverged training run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import architectures, checkpoint, config, dataio, report, trainer
from .graph import CIGN
from .substrate import ConfigurationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

log = logging.getLogger("cign")


def _seeds(cfg: config.ExperimentConfig, args) -> list[int]:
    return [args.seed] if args.seed is not None else list(cfg.seeds)


def _out(cfg: config.ExperimentConfig, args) -> Path:
    return Path(args.out or cfg.output_dir)


def cmd_train(args) -> int:
    cfg = config.load(args.config)
    out = _out(cfg, args)
    train_set, test_set = config.load_datasets(cfg)
    with report.OutputLock(out):
        for seed in _seeds(cfg, args):
            try:
                res = trainer.train(
                    cfg.build_tree(),
                    train_set,
                    cfg.schedule,
                    seed=seed,
                    test_set=test_set,
                    dtype=cfg.dtype,
                    config_snapshot=cfg.to_dict(),
                )
            except trainer.DivergedRun as exc:
                rec = exc.record
                report.append_records(out / "metrics.jsonl", [
                    {"type": "record", "model": cfg.label, **rec.to_dict()},
                    report.run_summary(cfg.label, seed, float("nan"), 0, "diverged"),
                ])
                print(f"seed {seed}: diverged ({exc})", file=sys.stderr)
                return EXIT_DIVERGED
            rec = res.record
            ckpt = checkpoint.save(
                res.model, out / f"checkpoint_seed{seed}.npz", {"label": cfg.label, "seed": seed}
            )
            report.append_records(out / "metrics.jsonl", [
                {"type": "record", "model": cfg.label, **rec.to_dict()},
                report.run_summary(cfg.label, seed, rec.final["test_accuracy"], rec.final["params"]),
            ])
            print(f"seed {seed}: test accuracy {rec.final['test_accuracy']:.4f} -> {ckpt}")
    return EXIT_OK


def _test_split(args, cfg: config.ExperimentConfig | None) -> dataio.LabeledDataset:
    if cfg is not None:
        return config.load_datasets(cfg)[1]
    name = args.dataset
    if name == "synthetic":
        return dataio.make_synthetic(500, seed=2, split="test")
    return dataio.load_split(dataio.dataset_dir(name, args.data_root), "test")


def cmd_evaluate(args) -> int:
    if not args.checkpoint:
        raise ConfigurationError("--checkpoint is required")
    model, _ = checkpoint.load(args.checkpoint)
    cfg = config.load(args.config) if args.config else None
    result = trainer.evaluate(model, _test_split(args, cfg))
    print(json.dumps({"accuracy": result["accuracy"], "n": result["n"],
                      "leaf_counts": {str(k): v for k, v in sorted(result["leaf_counts"].items())}}))
    return EXIT_OK


def cmd_histogram(args) -> int:
    if not args.checkpoint:
        raise ConfigurationError("--checkpoint is required")
    model, _ = checkpoint.load(args.checkpoint)
    cfg = config.load(args.config) if args.config else None
    data = _test_split(args, cfg)
    dataset_name = cfg.dataset.name if cfg else args.dataset
    names = dataio.FASHION_CLASSES if dataset_name == "fashion" else dataio.MNIST_CLASSES
    hist = report.leaf_histogram(model, data, class_names=names)
    print(hist.render(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "histogram.txt").write_text(hist.render())
        (out / "histogram.csv").write_text(hist.to_csv())
        (out / "histogram.json").write_text(json.dumps(hist.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_count_params(args) -> int:
    if args.checkpoint:
        model, header = checkpoint.load(args.checkpoint)
        label = header.get("extra", {}).get("label", "checkpoint")
    elif args.config:
        cfg = config.load(args.config)
        model, label = CIGN(cfg.build_tree()), cfg.label
    else:
        tree = architectures.build(args.architecture, args.variant)
        model, label = CIGN(tree), f"{args.architecture}/{args.variant}"
    counts = report.count_params(model)
    print(render := report.render_param_counts(counts, label), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "params.txt").write_text(render)
        (out / "params.json").write_text(json.dumps(counts, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = config.load(args.config)
    if not cfg.grid:
        raise ConfigurationError("config has no 'grid' section")
    out = _out(cfg, args)
    train_set, test_set = config.load_datasets(cfg)
    seed = _seeds(cfg, args)[0]

    def run(schedule) -> float:
        point = cfg.with_schedule(schedule)
        res = trainer.train(point.build_tree(), train_set, schedule, seed=seed,
                            test_set=test_set, dtype=cfg.dtype, config_snapshot=point.to_dict())
        return res.record.final["test_accuracy"]

    with report.OutputLock(out):
        results = trainer.sequential_grid_search(
            cfg.schedule, [(g.axis, g.values) for g in cfg.grid], run
        )
        recs = []
        for r in results:
            for value, acc in r.rows:
                recs.append({"type": "grid", "model": cfg.label, "axis": r.axis,
                             "value": value, "test_accuracy": acc, "seed": seed})
            recs.append({"type": "grid_best", "model": cfg.label, "axis": r.axis, "value": r.best_value})
            print(f"{r.axis}: best {r.best_value:g}")
        report.append_records(out / "metrics.jsonl", recs)
    return EXIT_OK


def cmd_report(args) -> int:
    paths = [Path(p) for p in args.metrics] if args.metrics else []
    if not paths:
        cfg = config.load(args.config) if args.config else None
        base = Path(args.out or (cfg.output_dir if cfg else "."))
        paths = [base / "metrics.jsonl"]
    records = []
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"metrics file {p} not found")
        records.extend(report.read_records(p))
    rows = report.aggregate(records)
    table = report.render_table(rows)
    print(table, end="")
    if args.csv:
        Path(args.csv).write_text(report.render_csv(rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cign", description="Conditional information gain networks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required)
        sp.add_argument("--checkpoint")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        return sp

    common(sub.add_parser("train", help="train every seed in the config"), True).set_defaults(fn=cmd_train)
    for name, fn, helptext in (
        ("evaluate", cmd_evaluate, "test accuracy of a checkpoint under single-leaf routing"),
        ("histogram", cmd_histogram, "per-node class histogram of a checkpoint"),
    ):
        sp = common(sub.add_parser(name, help=helptext))
        sp.add_argument("--dataset", default="mnist", choices=config.DATASETS)
        sp.add_argument("--data-root")
        sp.set_defaults(fn=fn)
    sp = common(sub.add_parser("count-params", help="parameter budget per node, path and total"))
    sp.add_argument("--architecture", default="mnist", choices=architectures.ARCHITECTURES)
    sp.add_argument("--variant", default="cign_fed", choices=architectures.VARIANTS)
    sp.set_defaults(fn=cmd_count_params)
    common(sub.add_parser("grid", help="sequential grid search over the config's grid axes"), True).set_defaults(fn=cmd_grid)
    sp = common(sub.add_parser("report", help="Max/Min/Avg accuracy table from metrics logs"))
    sp.add_argument("--metrics", nargs="*")
    sp.add_argument("--csv")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except (config.ConfigError, ConfigurationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, dataio.FormatError, checkpoint.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
