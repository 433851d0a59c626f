"""Command-line entry point: ``skipcross <command> [--config run.ini] ...``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checks, config as cfgmod, data, geometry, metrics, model, synth, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("skipcross")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- shared helpers -----------------------------------------------------------------


def resolve_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.RunConfig()
    if args.seed is not None:
        cfg.run = replace(cfg.run, seed=args.seed)
    if args.out is not None:
        cfg.run = replace(cfg.run, out_dir=str(args.out))
    if args.deterministic:
        cfg.run = replace(cfg.run, deterministic=True)
    return cfg.validate()


def _out_dir(cfg) -> Path:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_config(cfg, out / "config.ini")
    return out


def load_splits(cfg: cfgmod.RunConfig):
    """(train, val) sample lists from the configured roots, or synthesized in memory."""
    size = (cfg.data.height, cfg.data.width)
    geo = cfg.geometry_kwargs()
    if cfg.data.train_root:
        train_set = data.load_dataset(cfg.data.train_root, size, split="train", **geo)
    else:
        train_set = None
    if cfg.data.val_root:
        val_set = data.load_dataset(cfg.data.val_root, size, split="val", **geo)
    else:
        val_set = None
    if train_set is None or val_set is None:
        ds = synth.synth_generate(cfg.scene_spec(), cfg.synth.n_train + cfg.synth.n_val, **geo)
        train_set = ds.samples[: cfg.synth.n_train] if train_set is None else train_set
        val_set = ds.samples[cfg.synth.n_train :] if val_set is None else val_set
    return train_set, val_set


def _numeric_context(cfg):
    return train.single_threaded() if cfg.run.deterministic else contextlib.nullcontext()


def _train_one(cfg, topology, train_set, val_set, out: Path | None, init_checkpoint=None):
    if init_checkpoint:
        net = model.load_weights(init_checkpoint, topology)
    else:
        net = model.build(topology, seed=cfg.run.seed)
    hist_path = out / "history.csv" if out else None
    history = train.fit(net, train_set, val_set, cfg.train_config(), history_path=hist_path, restore_best=False)
    if out:
        model.save_weights(net, out / "last.skxc")
    if history.best_state is not None:
        net.load_state_dict(history.best_state)
    if out:
        model.save_weights(net, out / "best.skxc")
    return net, history


def _evaluate(net, samples):
    rgb, adi, mask = data.stack(samples)
    conf = net.predict(rgb, adi)
    return metrics.evaluate_dataset(conf, mask)


# -- commands -------------------------------------------------------------------------


def cmd_synth(cfg, args) -> int:
    out = _out_dir(cfg)
    ds = synth.synth_generate(cfg.scene_spec(), cfg.synth.n_train + cfg.synth.n_val)
    n = cfg.synth.n_train
    train_part = synth.SynthDataset(ds.scenes[:n], ds.samples[:n])
    val_part = synth.SynthDataset(ds.scenes[n:], ds.samples[n:])
    synth.write_dataset(out / "train", train_part, prefix="synth")
    synth.write_dataset(out / "val", val_part, prefix="synth")
    print(f"wrote {n} training and {len(val_part)} validation samples under {out}")
    return EXIT_OK


def cmd_project(cfg, args) -> int:
    out = _out_dir(cfg)
    cloud = geometry.read_velodyne(args.cloud)
    calib = geometry.read_calibration(args.calib)
    g = cfg.geometry
    adi = geometry.cloud_to_adi(
        cloud, calib, cfg.data.width, cfg.data.height, radius=g.radius, clip=g.clip, densify=g.densify, knn_k=g.knn_k
    )
    target = out / f"{Path(args.cloud).stem}_adi.pgm"
    data.write_image(target, adi)
    print(f"{target}  ({cfg.data.width}x{cfg.data.height}, max {adi.max():.3f})")
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    out = _out_dir(cfg)
    train_set, val_set = load_splits(cfg)
    with _numeric_context(cfg):
        _, history = _train_one(cfg, cfg.topology(), train_set, val_set, out, init_checkpoint=args.checkpoint)
    print(f"best val MaxF {history.best_maxf:.4f} at epoch {history.best_epoch}; checkpoints in {out}")
    return EXIT_OK


def cmd_eval(cfg, args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    out = _out_dir(cfg)
    net = model.load_weights(args.checkpoint)
    _, val_set = load_splits(cfg)
    with _numeric_context(cfg):
        agg, per_image = _evaluate(net, val_set)
    report = {
        "checkpoint": str(args.checkpoint),
        "n_images": len(val_set),
        "conventions": {
            "positive_class": "road",
            "prediction": "confidence > t",
            "thresholds": "t_i = i/255, i = 0..255",
            "ap": "11-point interpolated over recall 0, 0.1, ..., 1",
            "pooling": "counts summed over images before ratios",
            "operating_point": "PRE/REC/F/FPR/FNR/MIOU/ACC at the MaxF threshold",
        },
        "aggregate": agg.to_dict(),
        "per_image": [dict(source=s.source, **r.to_dict()) for s, r in zip(val_set, per_image)],
    }
    (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(" ".join(f"{k}={v:.4f}" for k, v in agg.to_dict().items()))
    return EXIT_OK


def cmd_predict(cfg, args) -> int:
    if not args.checkpoint:
        raise UsageError("predict needs --checkpoint")
    out = _out_dir(cfg)
    image = Path(args.sample)
    root, stem = image.parent.parent, image.stem
    manifest = data.load_manifest(root)
    entry = next((e for e in manifest if e.stem == stem), None)
    if entry is None:
        raise data.DataError(f"{image}: no complete sample with stem {stem!r} under {root}")
    sample = data.load_sample(entry, (cfg.data.height, cfg.data.width), **cfg.geometry_kwargs())
    net = model.load_weights(args.checkpoint)
    conf = net.predict(sample.rgb[None], sample.adi[None])[0]
    data.write_image(out / f"{stem}_conf.pgm", conf)
    data.write_mask(out / f"{stem}_mask.pgm", conf > 0.5)
    print(f"{out / (stem + '_conf.pgm')}  road fraction {float((conf > 0.5).mean()):.3f}")
    return EXIT_OK


TABLE_COLUMNS = ("maxf", "ap", "pre", "rec", "fpr", "fnr")


def format_table(rows) -> str:
    head = f"{'rank':>4}  {'strategy':<10}" + "".join(f"{c.upper():>8}" for c in TABLE_COLUMNS)
    lines = [head, "-" * len(head)]
    for rank, row in enumerate(rows, start=1):
        lines.append(f"{rank:>4}  {row['strategy']:<10}" + "".join(f"{100 * row[c]:>8.2f}" for c in TABLE_COLUMNS))
    return "\n".join(lines)


def cmd_compare(cfg, args) -> int:
    out = _out_dir(cfg)
    train_set, val_set = load_splits(cfg)
    rows = []
    with _numeric_context(cfg):
        for strat in model.STRATEGIES:
            topo = model.configure_strategy(strat, cfg.topology())
            sub = out / strat
            sub.mkdir(exist_ok=True)
            net, _ = _train_one(cfg, topo, train_set, val_set, sub)
            agg, _ = _evaluate(net, val_set)
            rows.append(dict(strategy=strat, **agg.to_dict()))
            log.info("%s: MaxF %.4f", strat, agg.maxf)
    rows.sort(key=lambda r: (-r["maxf"], r["strategy"]))
    table = format_table(rows)
    (out / "compare.txt").write_text(table + "\n")
    (out / "compare.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(table)
    return EXIT_OK


def cmd_gradcheck(cfg, args) -> int:
    results = checks.run_suite(seed=cfg.run.seed, strategies=model.ALL_STRATEGIES)
    for name, err in results.items():
        print(f"{name:28s} {err:.3e}")
    worst = max(results.values())
    print(f"worst relative error {worst:.3e}")
    return EXIT_OK if worst < checks.TOLERANCE else EXIT_NUMERIC


COMMANDS = {
    "synth": (cmd_synth, "write a synthetic dataset (train/ and val/) to --out"),
    "project": (cmd_project, "project a point cloud to a normalized ADI image (PGM)"),
    "train": (cmd_train, "train a network; --checkpoint fine-tunes from saved weights"),
    "eval": (cmd_eval, "evaluate a checkpoint on the validation split, JSON report"),
    "predict": (cmd_predict, "confidence map and binary mask for one sample image"),
    "compare": (cmd_compare, "train and rank the five fusion strategies under one seed"),
    "gradcheck": (cmd_gradcheck, "64-bit finite-difference check of ops and tiny networks"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", type=Path, help="override [run] out_dir")
    common.add_argument("--checkpoint", type=Path, help="weights file (SKXC)")
    common.add_argument("--deterministic", action="store_true", help="single-threaded numeric paths")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    epilog = "configuration keys (INI sections) and defaults:\n" + cfgmod.describe_keys()
    parser = _Parser(
        prog="skipcross",
        description="Camera/LiDAR road segmentation with skip-cross fusion.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(
            name, parents=[common], help=help_text, description=help_text, epilog=epilog,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        if name == "project":
            p.add_argument("cloud", type=Path, help="Velodyne .bin file")
            p.add_argument("calib", type=Path, help="calibration text file")
        elif name == "predict":
            p.add_argument("sample", type=Path, help="image inside a dataset root (root/image_2/<stem>.*)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command][0](cfg, args)
    except (cfgmod.ConfigError, UsageError, model.TopologyError) as exc:
        print(f"skipcross {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DataError, geometry.CalibrationError, geometry.CloudFormatError, model.CheckpointError, OSError) as exc:
        print(f"skipcross {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (train.NumericalError, FloatingPointError) as exc:
        print(f"skipcross {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
