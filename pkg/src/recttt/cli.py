"""Command-line entry point: ``recttt <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import SWEEP_AXES, ConfigError, ExperimentConfig, load_config
from .data import CORRUPTIONS, CorruptionSpec, Dataset, corrupt, export_dataset, gen_dataset
from .gradcheck import format_table, run_gradcheck
from .harness import (ModelStore, NumericalError, Setting, aggregate, checkpoint_name, dump_features,
                      make_test_suite, method_kind, model_from_checkpoint, model_to_checkpoint,
                      run_setting, run_sweep, write_report)
from .tensor import Rng

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

log = logging.getLogger("recttt")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.set)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _train_kinds(cfg: ExperimentConfig) -> list[str]:
    if cfg.method == "simsiam_ttt":
        return ["simsiam"]
    return ["recttt_single" if cfg.ablation.single_encoder_train else "recttt"]


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    store = ModelStore(cfg, None, train_missing=True)
    for seed in cfg.seeds:
        for kind in _train_kinds(cfg):
            model = store.get(kind, seed)
            path = ckpt_io.save_checkpoint(out / checkpoint_name(kind, seed),
                                           model_to_checkpoint(model, cfg, kind, seed))
            store.logs[(kind, seed)].write_csv(path.with_suffix(".train.csv"))
            print(f"wrote {path}")
    return EXIT_OK


def _checkpoint_paths(items: list[str]) -> list[Path]:
    paths: list[Path] = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.rctt")))
        elif p.exists():
            paths.append(p)
        else:
            raise FileNotFoundError(f"no such checkpoint: {p}")
    if not paths:
        raise FileNotFoundError("no checkpoints found")
    return paths


def _load_store(cfg: ExperimentConfig, items: list[str], train_missing: bool) -> tuple[ModelStore, list[int]]:
    first = Path(items[0])
    store = ModelStore(cfg, first if first.is_dir() else first.parent, train_missing=train_missing)
    seeds = []
    for path in _checkpoint_paths(items):
        ck = ckpt_io.load_checkpoint(path)
        seed = int(ck.metadata["seed"])
        store.put(ck.metadata["kind"], seed, model_from_checkpoint(ck, cfg))
        seeds.append(seed)
    return store, sorted(set(seeds))


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.method:
        cfg.method = args.method
    cfg.validate()
    store, seeds = _load_store(cfg, args.ckpt, train_missing=False)
    kind = "recttt_single" if cfg.ablation.single_encoder_train else method_kind(cfg.method)
    seeds = [s for s in seeds if (kind, s) in store.models]
    if not seeds:
        raise ConfigError(f"no '{kind}' checkpoint matches method {cfg.method}")
    setting = Setting(cfg.method, kind=kind)
    rows = aggregate(run_setting(cfg, store, setting, seeds))
    paths = write_report(rows, cfg, cfg.out_dir)
    _print_summary(rows)
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.ckpt:
        store, seeds = _load_store(cfg, args.ckpt, train_missing=True)
        seeds = seeds if args.seeds_from_ckpt else cfg.seeds
    else:
        store, seeds = ModelStore(cfg, Path(cfg.out_dir)), cfg.seeds
    rows = run_sweep(cfg, store, args.axis, seeds)
    paths = write_report(rows, cfg, cfg.out_dir, stem=f"sweep_{args.axis}")
    _print_summary(rows)
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def _print_summary(rows: list[dict]) -> None:
    for r in rows:
        if r["seed"] == "mean" and r["corruption"] == "average":
            label = r["method"] + (f" [{r['setting']}]" if r["setting"] else "")
            print(f"{label:<28} {r['accuracy']:6.2f} +- {r['accuracy_std']:.2f}")


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(seed=args.seed, instances=args.instances)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_dump_features(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    for path in _checkpoint_paths(args.ckpt):
        ck = ckpt_io.load_checkpoint(path)
        seed = int(ck.metadata["seed"])
        model = model_from_checkpoint(ck, cfg)
        suite = make_test_suite(cfg, seed, include_clean=True)
        for corruption in args.corruption or list(suite):
            x, y = suite[corruption]
            target = out / f"features_{ck.metadata['kind']}_seed{seed}_{corruption}.csv"
            dump_features(model, x, y, target, cfg.adapt.iterations, cfg.adapt.lr,
                          cfg.adapt.batch_size, cfg.adapt.momentum)
            print(f"wrote {target}")
    return EXIT_OK


def cmd_export_data(args) -> int:
    cfg = _config(args)
    rng = Rng(args.seed if args.seed is not None else cfg.seeds[0])
    n = cfg.data.n_train if args.split == "train" else cfg.data.n_test
    ds = gen_dataset(rng.spawn("data"), n, args.split)
    if args.corruption:
        sev = cfg.data.severity
        images = corrupt(ds.images, CorruptionSpec(args.corruption, sev), rng.spawn("corrupt", args.corruption, sev))
        ds = Dataset(images, ds.labels, ds.split)
    print(f"wrote {export_dataset(ds, cfg.out_dir)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="recttt", description="Cross-reconstruction test-time training experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log training and evaluation progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=False, ckpt_required=False):
        sp.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. adapt.iterations=10 (repeatable)")
        sp.add_argument("--out", help="output directory (overrides out_dir)")
        if ckpt:
            sp.add_argument("--ckpt", action="append", default=[] if not ckpt_required else None,
                            required=ckpt_required, help="checkpoint file or directory (repeatable)")

    sp = sub.add_parser("train", help="pretrain the source encoder and train the model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a method over the corruption suite")
    common(sp, ckpt=True, ckpt_required=True)
    sp.add_argument("--method", choices=["recttt", "source", "ptbn", "simsiam_ttt"])
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="grid over iterations, batch size, depth or ensemble mode")
    common(sp, ckpt=True)
    sp.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sp.add_argument("--seeds-from-ckpt", action="store_true",
                    help="use the seeds of the given checkpoints instead of the config's")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every gradient rule")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--instances", type=int, default=20)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("dump-features", help="pooled features before/after adaptation as CSV")
    common(sp, ckpt=True, ckpt_required=True)
    sp.add_argument("--corruption", action="append", choices=["clean", *CORRUPTIONS])
    sp.set_defaults(func=cmd_dump_features)

    sp = sub.add_parser("export-data", help="write a dataset split as raw float32 files plus index.json")
    common(sp)
    sp.add_argument("--split", choices=["train", "test"], default="test")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--corruption", choices=CORRUPTIONS)
    sp.set_defaults(func=cmd_export_data)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        # overflow shows up as a non-finite loss, which is reported below with exit code 3
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except (ConfigError, ckpt_io.LayoutError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ckpt_io.CheckpointError as exc:
        print(f"checkpoint error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
