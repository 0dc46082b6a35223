"""Command-line entry point: ``uadi <command> [flags]``.

Exit status is 0 on success, 1 on a usage or validation error and 2 when a
run fails at runtime.  Every run directory gets ``config.cfg`` (the resolved
configuration) and ``manifest.txt``.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import SIZES, ConfigError, RunConfig, dump_config, git_blob_hash, load_config, preset
from .data import generate_dataset, load_dataset, save_dataset, split_dataset
from .gradsuite import run_suite, tolerance
from .metrics import metric_rows, write_metrics_csv
from .network import MultiTaskNet, load_checkpoint
from .trainer import ABLATION_ROWS, ablation_run, diagnose, evaluate, train

log = logging.getLogger("uadi")

SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; this CLI reserves 2 for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, out_default: Optional[str], seed_default=None, size_default=None):
    p.add_argument("--config", metavar="FILE", help="key = value config file (default: none, preset values)")
    p.add_argument("--seed", type=int, default=seed_default,
                   help=f"seed for data, weights, shuffling and splits (default: {seed_default or 'from config'})")
    p.add_argument("--out", metavar="DIR", default=out_default, help="output directory (default: %(default)s)")
    p.add_argument("--size", choices=SIZES, default=size_default,
                   help="preset bundle applied before the config file "
                        f"(default: {size_default or 'library defaults, 64 px'})")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch (default: off)")


def _data_flag(p):
    p.add_argument("--data", metavar="DIR",
                   help="dataset directory (images/, masks/, labels.csv); default: generate from data.* config")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uadi", description="Multi-task lesion segmentation and classification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset to disk")
    _common(p, "runs/data")
    p.add_argument("--format", choices=("png", "pgm"), default="png", help="image file format (default: png)")

    p = sub.add_parser("train", help="train a model; writes history.csv, best.ckpt, metrics.csv")
    _common(p, "runs/train")
    _data_flag(p)

    p = sub.add_parser("eval", help="score a checkpoint on a split; writes metrics.csv")
    _common(p, "runs/eval")
    _data_flag(p)
    p.add_argument("--checkpoint", required=True, metavar="FILE", help="checkpoint from train (required)")
    p.add_argument("--split", choices=SPLITS, default="test", help="split to score (default: test)")

    p = sub.add_parser("ablate", help="component grid; writes ablation.csv and one subdirectory per row")
    _common(p, "runs/ablate")
    _data_flag(p)
    p.add_argument("--n-seeds", type=int, default=1,
                   help="seeds per row, counting up from --seed (default: 1)")

    p = sub.add_parser("diagnose", help="per-level displacement and task weights; writes diagnostics CSVs")
    _common(p, "runs/diagnose")
    _data_flag(p)
    p.add_argument("--checkpoint", metavar="FILE",
                   help="checkpoint to inspect (default: train one first under OUT/train)")
    p.add_argument("--split", choices=SPLITS, default="val", help="split to inspect (default: val)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every component; prints max errors")
    _common(p, None, seed_default=7, size_default="tiny")
    p.add_argument("--skip-model", action="store_true", help="skip the end-to-end model check (default: off)")
    return parser


# ------------------------------------------------------------------ helpers

def _resolve(args) -> RunConfig:
    cfg = preset(args.size)
    if args.config:
        cfg, _ = load_config(args.config, cfg)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg.validate()


def _prepare_out(args, cfg: RunConfig) -> tuple[Path, float]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = dump_config(cfg).encode()
    (out / "config.cfg").write_bytes(text)
    return out, time.time()


def write_manifest(out: Path, args, cfg: RunConfig, started: float, argv: Sequence[str]) -> Path:
    resolved = (out / "config.cfg").read_bytes()
    lines = [
        f"command = {args.command}",
        f"argv = {' '.join(argv)}",
        f"version = {__version__}",
        f"config_source = {args.config or '-'}",
        f"config_path = config.cfg",
        f"config_hash = {git_blob_hash(resolved)}",
    ]
    if args.config:
        lines.append(f"config_source_hash = {git_blob_hash(Path(args.config).read_bytes())}")
    lines += [
        f"seed = {cfg.train.seed}",
        f"out = {out}",
        f"started = {time.strftime('%Y-%m-%dT%H:%M:%S', time.localtime(started))}",
        f"finished = {time.strftime('%Y-%m-%dT%H:%M:%S')}",
    ]
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _splits(args, cfg: RunConfig) -> dict:
    if args.data:
        samples = load_dataset(args.data, size=cfg.data.image_size)
    else:
        samples = generate_dataset(cfg.data)
    labels = [s.label for s in samples]
    idx = split_dataset(labels, seed=cfg.data.seed)
    return {name: [samples[i] for i in ids] for name, ids in zip(SPLITS, idx)}


def _run_id(out: Path) -> str:
    # derived from the resolved config, so identical runs write identical rows wherever they land
    return git_blob_hash((out / "config.cfg").read_bytes())[:12]


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, cfg, out):
    samples = generate_dataset(cfg.data)
    save_dataset(samples, out, fmt=args.format)
    print(f"wrote {len(samples)} samples to {out}")


def cmd_train(args, cfg, out):
    splits = _splits(args, cfg)
    model = MultiTaskNet(cfg.model)
    res = train(model, splits["train"], splits["val"], cfg.train, out_dir=out)
    rows = []
    for split in ("val", "test"):
        if splits[split]:
            rows += metric_rows(_run_id(out), res.best_epoch, split, *evaluate(model, splits[split]))
    write_metrics_csv(out / "metrics.csv", rows)
    print(f"best epoch {res.best_epoch} of {res.epochs_run}; checkpoint {res.checkpoint}")


def cmd_eval(args, cfg, out):
    model = load_checkpoint(args.checkpoint)
    if model.config.input_size != cfg.data.image_size:
        raise ConfigError(f"checkpoint expects {model.config.input_size} px images, config gives "
                          f"{cfg.data.image_size}; pass the config used for training")
    samples = _splits(args, cfg)[args.split]
    sm, cm = evaluate(model, samples)
    write_metrics_csv(out / "metrics.csv", metric_rows(Path(args.checkpoint).stem, -1, args.split, sm, cm))
    for k, v in {**sm.as_dict(), **cm.as_dict()}.items():
        print(f"{k:>16s} {v:.4f}")


def cmd_ablate(args, cfg, out):
    if args.n_seeds < 1:
        raise ConfigError("--n-seeds must be >= 1")
    splits = _splits(args, cfg)
    seeds = tuple(cfg.train.seed + k for k in range(args.n_seeds))
    table = ablation_run(cfg.train, splits["train"], splits["val"], splits["val"], out, seeds=seeds,
                         rows=ABLATION_ROWS)
    for r in table:
        print(f"{r['row']:>8s}  dice {r['dice']:.4f}  iou {r['iou']:.4f}  acc {r['acc']:.4f}  auc {r['auc']:.4f}")


def cmd_diagnose(args, cfg, out):
    splits = _splits(args, cfg)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = MultiTaskNet(cfg.model)
        train(model, splits["train"], splits["val"], cfg.train, out_dir=out / "train")
    diagnose(model, splits[args.split], out)
    print(f"wrote {out / 'diagnostics.csv'} and {out / 'diagnostics_summary.csv'}")


def cmd_gradcheck(args, cfg, out):
    results = run_suite(args.size, args.seed, include_model=not args.skip_model)
    failed = [k for k, v in results.items() if not v < tolerance(k)]
    for k, v in results.items():
        print(f"{k:<16s} {v:.3e}  (tol {tolerance(k):.0e})  {'ok' if k not in failed else 'FAIL'}")
    if out is not None:
        with (out / "gradcheck.csv").open("w") as fh:
            fh.write("component,max_rel_error,tolerance\n")
            fh.writelines(f"{k},{v!r},{tolerance(k)!r}\n" for k, v in results.items())
    if failed:
        raise RuntimeError(f"gradient check failed for {', '.join(failed)}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "diagnose": cmd_diagnose, "gradcheck": cmd_gradcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _resolve(args)
        out, started = (None, time.time()) if args.out is None else _prepare_out(args, cfg)
    except (ValueError, FileNotFoundError) as exc:
        print(f"uadi {args.command}: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args, cfg, out)
    except (ValueError, FileNotFoundError) as exc:
        print(f"uadi {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001  any other failure is a runtime failure
        log.debug("traceback", exc_info=True)
        print(f"uadi {args.command}: runtime failure: {exc}", file=sys.stderr)
        return 2
    finally:
        if out is not None:
            write_manifest(out, args, cfg, started, argv)
    return 0


if __name__ == "__main__":
    sys.exit(main())
