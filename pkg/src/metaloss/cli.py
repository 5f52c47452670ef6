"""Command-line surface.

Subcommands: gen-data, train, eval, inspect, compare-sampling. Exit codes:
0 on success, 1 on usage errors, 2 on runtime or numeric failures. The
METALOSS_OUTPUT_ROOT environment variable sets the default output
directory (default: current directory).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from . import datasets as ds
from . import reporting, sampling, trainer
from .classifier import forward, per_sample_cross_entropy


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems instead of exiting with code 2."""

    def error(self, message: str):  # noqa: D401 - argparse hook
        raise UsageError(f"{self.prog}: {message}")


def output_root() -> Path:
    return Path(os.environ.get("METALOSS_OUTPUT_ROOT", "."))


def _resolve_out(value: str | None, default_name: str) -> Path:
    if value:
        return Path(value)
    return output_root() / default_name


def _parse_pair_map(text: str, num_classes: int) -> dict[int, int]:
    mapping: dict[int, int] = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            src, dst = item.split(":")
            mapping[int(src)] = int(dst)
        except ValueError:
            raise UsageError(f"bad pair-map entry {item!r}; expected src:dst") from None
    for src, dst in mapping.items():
        if not (0 <= src < num_classes and 0 <= dst < num_classes):
            raise UsageError(f"pair-map entry {src}:{dst} out of range for {num_classes} classes")
    return mapping


def cmd_gen_data(args: argparse.Namespace) -> int:
    if not args.blobs:
        raise UsageError("gen-data: only --blobs generation is available")
    data = ds.gen_blobs(args.classes, args.per_class, args.dims, args.separation, args.seed)
    if args.rho > 1:
        data = ds.apply_longtail(data, args.rho, seed=args.seed + 1)
    if args.noise != "none" and args.rate > 0:
        if args.noise == "sym":
            data = ds.inject_symmetric_noise(data, args.rate, seed=args.seed + 2)
        elif args.noise == "dist":
            data = ds.inject_distribution_noise(data, args.rate, seed=args.seed + 2)
        else:
            if not args.pair_map:
                raise UsageError("asymmetric noise requires --pair-map")
            pair_map = _parse_pair_map(args.pair_map, args.classes)
            data = ds.inject_asymmetric_noise(data, args.rate, pair_map, seed=args.seed + 2)
    name = f"blobs_c{args.classes}_n{args.per_class}_rho{args.rho:g}_{args.noise}{args.rate:g}_seed{args.seed}.csv"
    out = _resolve_out(args.out, name)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save_csv(data, out)
    print(json.dumps({
        "dataset": str(out),
        "provenance": str(out) + ".prov.json",
        "num_samples": data.n,
        "noisy_fraction": data.noisy_fraction(),
    }))
    return 0


_CONFIG_FLAGS = [
    ("epochs", int), ("warmup_epochs", int), ("batch_size", int),
    ("lr", float), ("momentum", float), ("weight_decay", float),
    ("meta_lr", float), ("rank_bins", int), ("m0_frac", float),
    ("m1_frac", float), ("seed", int), ("baseline", str), ("sampler", str),
    ("hidden", int), ("corrector_hidden", int), ("predicted_labels", str),
]


def _load_train_inputs(args: argparse.Namespace) -> tuple[trainer.TrainConfig, str, str | None]:
    """Merge manifest/config file/flag layers into a validated config."""
    payload: dict = {}
    dataset_path: str | None = None
    holdout_path: str | None = None
    if args.manifest:
        manifest = reporting.read_manifest(args.manifest)
        payload.update(manifest["config"])
        dataset_path = manifest["dataset"]
        holdout_path = manifest.get("holdout")
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(file_cfg, dict):
            raise trainer.ConfigError("config file must hold a JSON object")
        dataset_path = file_cfg.pop("dataset", dataset_path)
        holdout_path = file_cfg.pop("holdout", holdout_path)
        payload.update(file_cfg)
    for key, _ in _CONFIG_FLAGS:
        value = getattr(args, key)
        if value is not None:
            payload[key] = value
    if args.dataset:
        dataset_path = args.dataset
    if args.holdout:
        holdout_path = args.holdout
    if not dataset_path:
        raise UsageError("train: a dataset is required (--dataset, config key, or manifest)")
    config = trainer.config_from_dict(payload)
    return config, dataset_path, holdout_path


def cmd_train(args: argparse.Namespace) -> int:
    config, dataset_path, holdout_path = _load_train_inputs(args)
    watch = reporting.Stopwatch()
    data = ds.load_csv(dataset_path)
    holdout = ds.load_csv(holdout_path) if holdout_path else None
    result = trainer.train(data, config, holdout=holdout,
                           record_tables=args.dump_tables)

    out_dir = _resolve_out(args.out, "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": str(out_dir / "metrics.jsonl"),
        "checkpoint": str(out_dir / "checkpoint.json"),
        "best_checkpoint": str(out_dir / "best_checkpoint.json"),
        "manifest": str(out_dir / "manifest.json"),
    }
    reporting.write_metrics_jsonl(result.history, paths["metrics"])
    if args.dump_tables:
        paths["tables"] = str(out_dir / "inspection.jsonl")
        reporting.write_metrics_jsonl(result.tables, paths["tables"])
    reporting.save_checkpoint(result.final_state, config, paths["checkpoint"])
    reporting.save_checkpoint(result.best_state, config, paths["best_checkpoint"])
    manifest = reporting.RunManifest(
        config=config.to_dict(),
        dataset=str(Path(dataset_path).resolve()),
        holdout=str(Path(holdout_path).resolve()) if holdout_path else None,
        dataset_provenance=data.provenance,
        seed=config.seed,
        outputs=paths,
        wall_clock_sec=watch.elapsed(),
        kernel_backend=kernels.BACKEND,
    )
    reporting.write_manifest(manifest, paths["manifest"])
    last = result.history[-1]
    print(json.dumps({
        "out_dir": str(out_dir),
        "final_test_acc": last["test_acc"],
        "best_test_acc": result.history[result.best_epoch]["test_acc"],
        "best_epoch": result.best_epoch,
        "wall_clock_sec": manifest.wall_clock_sec,
    }))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ck = reporting.load_checkpoint(args.checkpoint)
    data = ds.load_csv(args.dataset)
    acc, per_class = trainer.evaluate(ck.model, data)
    print(json.dumps({"accuracy": acc, "per_class_accuracy": per_class}))
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    ck = reporting.load_checkpoint(args.checkpoint)
    data = ds.load_csv(args.dataset)
    report = reporting.inspect_checkpoint(ck, data)
    out_dir = _resolve_out(args.out, "inspect")
    paths = reporting.write_inspection(report, out_dir)
    print(json.dumps({"out_dir": str(out_dir), **report.summary(), "files": paths}))
    return 0


def cmd_compare_sampling(args: argparse.Namespace) -> int:
    data = ds.load_csv(args.dataset)
    config = trainer.config_from_dict({
        "epochs": max(args.warmup_epochs + 1, 2),
        "warmup_epochs": args.warmup_epochs,
        "m0_frac": args.m0_frac,
        "m1_frac": args.m1_frac,
        "seed": args.seed,
    })
    rng = np.random.default_rng(config.seed)
    state = trainer.init_state(data, config)
    for epoch in range(config.warmup_epochs):
        lr = trainer.cosine_lr(config.lr, epoch, config.epochs)
        trainer.warmup_epoch(state, data, config, rng, lr)
    losses = per_sample_cross_entropy(
        forward(state.model, data.features), data.given_labels
    )

    rows = []
    for seed in range(args.seeds):
        hier = sampling.hierarchical_sample(data, losses, args.m0_frac, args.m1_frac, seed)
        rows.append(("hierarchical", seed, sampling.dispersion(
            data.features[hier.meta_indices], data.given_labels[hier.meta_indices]
        )))
    naive = sampling.naive_sample(data, losses, args.m1_frac)
    naive_disp = sampling.dispersion(
        data.features[naive.meta_indices], data.given_labels[naive.meta_indices]
    )
    for seed in range(args.seeds):
        rows.append(("naive", seed, naive_disp))

    out = _resolve_out(args.out, "dispersion.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sampler", "seed", "dispersion"])
        for sampler_name, seed, value in rows:
            writer.writerow([sampler_name, seed, repr(float(value))])
    means = {
        name: float(np.mean([v for s, _, v in rows if s == name]))
        for name in ("hierarchical", "naive")
    }
    print(json.dumps({"table": str(out), "mean_dispersion": means}))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="metaloss", description=__doc__)
    parser.add_argument("--version", action="version", version=f"metaloss {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic biased dataset")
    g.add_argument("--blobs", action="store_true", help="Gaussian blob generator")
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--per-class", type=int, required=True)
    g.add_argument("--dims", type=int, default=8)
    g.add_argument("--separation", type=float, default=8.0)
    g.add_argument("--rho", type=float, default=1.0, help="imbalance ratio (1 = balanced)")
    g.add_argument("--noise", choices=["none", "sym", "asym", "dist"], default="none")
    g.add_argument("--rate", type=float, default=0.0)
    g.add_argument("--pair-map", default="", help="asymmetric map, e.g. 0:1,1:0")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a classifier")
    t.add_argument("--config", default=None, help="flat JSON config file")
    t.add_argument("--manifest", default=None, help="rerun from a run manifest")
    t.add_argument("--dataset", default=None)
    t.add_argument("--holdout", default=None)
    t.add_argument("--out", default=None, help="output directory")
    t.add_argument("--dump-tables", action="store_true",
                   help="also write per-epoch trust-weight/margin tables")
    for key, kind in _CONFIG_FLAGS:
        t.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="emit report tables for a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--dataset", required=True)
    i.add_argument("--out", default=None)
    i.set_defaults(func=cmd_inspect)

    c = sub.add_parser("compare-sampling", help="dispersion of both samplers over seeds")
    c.add_argument("--dataset", required=True)
    c.add_argument("--seeds", type=int, default=10)
    c.add_argument("--m0-frac", type=float, default=0.5)
    c.add_argument("--m1-frac", type=float, default=0.25)
    c.add_argument("--warmup-epochs", type=int, default=5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_compare_sampling)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, trainer.ConfigError) as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help/--version
        return int(exc.code or 0)
    except (ds.DatasetError, sampling.SamplingError, trainer.TrainingError,
            ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
