"""Command-line entry point: ``mewunet <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import ablation, checks
from .data import DatasetManifest, synth_generate
from .metrics import METRIC_COLUMNS
from .training import PRESETS, TrainConfig, describe, evaluate, network_config_for, read_config_file, train

# dedicated flags that map one-to-one onto TrainConfig fields
OVERRIDES = ("lr", "epochs", "optimizer", "batch_size", "seed", "branches", "norm")


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file with TrainConfig fields")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    p.add_argument("--manifest", help="dataset manifest (manifest.tsv)")
    p.add_argument("--out-dir", help="directory for logs and checkpoints")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--optimizer", choices=("adamw", "sgd"))
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--branches", help="comma list from hw,cw,ch,dw")
    p.add_argument("--norm", choices=("group", "batch"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any other config field; repeatable")


def build_train_config(args: argparse.Namespace) -> TrainConfig:
    """Preset, then config file, then --set pairs, then dedicated flags."""
    values: dict = dict(PRESETS[args.preset]) if args.preset else {}
    if args.config:
        values.update(read_config_file(args.config))
    for pair in args.set:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {pair!r}")
        values[key.strip()] = value.strip()
    for name in OVERRIDES:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if getattr(args, "manifest", None):
        values["manifest"] = args.manifest
    if getattr(args, "out_dir", None):
        values["out_dir"] = args.out_dir
    return TrainConfig.from_mapping(values)


def cmd_synth(args) -> int:
    m = synth_generate(args.n, args.extent, args.classes, args.seed, args.out, args.train_fraction)
    print(f"wrote {len(m.entries)} samples to {Path(args.out) / 'manifest.tsv'} "
          f"(train {len(m.ids('train'))}, test {len(m.ids('test'))})")
    return 0


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    manifest = DatasetManifest.load(cfg.manifest) if cfg.manifest else None
    if manifest is None:
        raise FileNotFoundError("no dataset manifest given (--manifest or manifest= in --config)")
    print(f"network: {describe(network_config_for(cfg, manifest))}")
    result = train(cfg, manifest)
    last = result.records[-1]
    print(f"trained {last.epoch} epochs: final loss {last.loss:.5f}, best val DSC {result.best_val_dsc:.4f}")
    print(f"best checkpoint: {result.best_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    stem = args.report or str(Path(args.checkpoint).with_name(f"eval_{args.split}"))
    report = evaluate(args.checkpoint, args.manifest, args.split, tuple(args.spacing), args.export, stem)
    print("class\t" + "\t".join(METRIC_COLUMNS))
    rows = [(str(k), v) for k, v in report["per_class"].items()] + [("mean", report["mean"])]
    for name, row in rows:
        print(name + "\t" + "\t".join("NA" if row[c] is None else f"{row[c]:.4f}" for c in METRIC_COLUMNS))
    print(f"report written to {stem}.tsv and {stem}.json")
    return 0


def _print_checks(results) -> int:
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_gradcheck(args) -> int:
    return _print_checks(checks.gradient_suite(args.seed, include_network=not args.skip_network))


def cmd_fftcheck(args) -> int:
    return _print_checks(checks.fft_suite(args.trials, args.max_length, args.seed) + checks.spectral_suite(args.seed))


def cmd_ablate(args) -> int:
    base = build_train_config(args)
    if args.no_augment:
        base = replace(base, augment=False)
    out = Path(base.out_dir)
    manifest = DatasetManifest.load(base.manifest) if base.manifest else ablation.make_dataset(out / "data")
    seeds = tuple(int(s) for s in args.seeds.split(","))
    result = ablation.run_ablation(out, base, seeds, manifest, ablation.ABLATION_ROWS)
    print(ablation.format_table(result))
    verdict = "yes" if result.full_beats_baseline else "no"
    print(f"all branches >= DW only (median mIoU): {verdict}")
    print(f"table written to {result.table_path}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mewunet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic segmentation dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--extent", type=int, default=64)
    p.add_argument("--classes", type=int, default=2, help="including background")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a network")
    _add_train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--spacing", type=float, nargs=2, default=(1.0, 1.0), metavar=("ROW", "COL"))
    p.add_argument("--export", help="directory for predicted masks (PGM)")
    p.add_argument("--report", help="output stem for the .tsv/.json report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-network", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("fftcheck", help="FFT and spectral modulation oracle suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--max-length", type=int, default=64)
    p.set_defaults(func=cmd_fftcheck)

    p = sub.add_parser("ablate", help="branch / norm ablation table")
    _add_train_options(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
