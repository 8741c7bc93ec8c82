"""Command-line entry point: forge, train, eval, diagnose, gradcheck.

Exit codes: 0 success, 1 verification failure, 2 configuration or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .episodes import EpisodeDataset, ForgeConfigError, SamplingError, forge_arrays, forge_dataset, sample_episode
from .formats import FormatError, load_checkpoint, quantize, save_tensor, write_pgm
from .ire import active_matching_count
from .seat import DegenerateInputError
from .segmenter import EpisodeError, FewShotSegmenter, run_episode
from .trainer import (
    TrainingDiverged,
    evaluate,
    gradcheck,
    infer_model_config,
    load_model,
    train,
    write_metrics,
)

log = logging.getLogger("cdfss")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG = 0, 1, 2
GRADCHECK_SIZE = 16


def _attach_log(run_dir: Path) -> logging.Handler:
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / "log.txt", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def _open_dataset(path) -> EpisodeDataset:
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise FileNotFoundError(f"dataset not found: {p} has no manifest.json")
    return EpisodeDataset.open(p)


def _run_config_near(checkpoint: Path, explicit) -> RunConfig:
    if explicit is not None:
        return load_config(explicit)
    resolved = checkpoint.parent / "config.resolved.json"
    return load_config(resolved) if resolved.is_file() else RunConfig()


def _load_checkpoint_model(path, cfg: RunConfig) -> tuple[FewShotSegmenter, int]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    arrays = load_checkpoint(path)
    shaped = infer_model_config(arrays)
    model_cfg = cfg.model_config(shaped.image_size, shaped.in_channels)
    model_cfg = dataclasses.replace(model_cfg, dtype=shaped.dtype)
    return load_model(path, model_cfg)


# ---------------------------------------------------------------------------
# commands


def cmd_forge(args) -> int:
    cfg = load_config(args.config)
    f = cfg.forge
    out = Path(args.out)
    forge_dataset(f.source, f.target, f.n_images_per_class, f.image_size, out, f.channels, exact=f.exact or args.exact)
    print(f"forged {out / 'manifest.json'}")
    return EXIT_OK


def _gradcheck_episode(cfg: RunConfig, size: int):
    f = cfg.forge
    arrays = forge_arrays(f.source, f.target, max(cfg.train.k_shot + 1, 2), size, f.channels)
    ds = EpisodeDataset(arrays, size, f.channels)
    ep = sample_episode(ds, f.source.domain_id, cfg.train.k_shot, cfg.train.seed)
    return ep


def _print_report(report) -> None:
    for line in report.lines():
        print(line)
    print(f"gradcheck {'passed' if report.passed else 'FAILED'} (tolerance {report.tolerance:g})")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.dtype:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, dtype=args.dtype))
    ds = _open_dataset(args.dataset)
    out = Path(args.out)
    handler = _attach_log(out)
    try:
        (out / "config.resolved.json").write_text(cfg.dumps())
        model = FewShotSegmenter(cfg.model_config(ds.image_size, ds.channels))
        if args.gradcheck_first:
            if cfg.train.dtype != "float64":
                raise ConfigError("--gradcheck-first needs --dtype float64")
            ep = sample_episode(ds, cfg.train.domain, cfg.train.k_shot, (cfg.train.seed, 0, 0))
            report = gradcheck(model, ep, tolerance=args.tolerance, weights=cfg.train.loss_weights)
            _print_report(report)
            if not report.passed:
                return EXIT_VERIFY
        result = train(model, ds, cfg.train, out)
        for epoch, loss in enumerate(result.epoch_losses, start=1):
            print(f"epoch {epoch} loss={loss:.6f}")
        return EXIT_OK
    except TrainingDiverged as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg = _run_config_near(ckpt, args.config)
    model, _ = _load_checkpoint_model(ckpt, cfg)
    ds = _open_dataset(args.dataset)
    domain = args.domain or cfg.eval.domain
    k = args.k if args.k is not None else cfg.eval.k
    n = args.n if args.n is not None else cfg.eval.n_episodes
    seed = args.seed if args.seed is not None else cfg.eval.seed
    result = evaluate(model, ds, domain, n, k, seed, jobs=args.jobs)
    if args.out:
        out = Path(args.out)
        masks = out / "masks"
        masks.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.csv", result.rows)
        for i, probs in enumerate(result.fine_probs):
            write_pgm(masks / f"ep{i:04d}.pgm", quantize((probs > 0.5).astype(np.float64)))
            if args.dump_soft:
                save_tensor(masks / f"ep{i:04d}_soft.rtnt", probs)
    print(f"episodes={n} k={k} domain={domain} mean_coarse_iou={result.mean_coarse_iou:.4f}")
    print(f"mean_iou={result.mean_iou:.4f}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    ds = _open_dataset(args.dataset)
    rows = []
    for ckpt in args.checkpoint:
        ckpt = Path(ckpt)
        cfg = _run_config_near(ckpt, args.config)
        model, epoch = _load_checkpoint_model(ckpt, cfg)
        domain = args.domain or cfg.eval.domain
        counts: dict[int, list[int]] = {}
        for i in range(args.n):
            ep = sample_episode(ds, domain, args.k, (args.seed, i))
            ep.episode_id = f"{domain}-{i}"
            trace = run_episode(model, ep)
            for c in trace.coarse.correlations:
                acc = counts.setdefault(c.level + 1, [0, 0])
                acc[0] += active_matching_count(c)
                acc[1] += c.total_pairs
        for level in sorted(counts):
            rows.append((epoch, level, *counts[level]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "active_matching.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "level", "count", "total_pairs"))
        w.writerows(rows)
    for r in rows:
        print(",".join(str(x) for x in r))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    model_cfg = dataclasses.replace(cfg.model_config(GRADCHECK_SIZE, cfg.forge.channels), dtype="float64")
    model = FewShotSegmenter(model_cfg)
    ep = _gradcheck_episode(cfg, GRADCHECK_SIZE)
    report = gradcheck(model, ep, tolerance=args.tolerance, weights=cfg.train.loss_weights)
    _print_report(report)
    return EXIT_OK if report.passed else EXIT_VERIFY


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdfss", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("forge", help="render a synthetic two-domain dataset")
    f.add_argument("--config")
    f.add_argument("--out", required=True)
    f.add_argument("--exact", action="store_true", help="also write lossless RTNT image mirrors")
    f.set_defaults(func=cmd_forge)

    t = sub.add_parser("train", help="episodic training on the source domain")
    t.add_argument("--config")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--gradcheck-first", action="store_true")
    t.add_argument("--tolerance", type=float, default=1e-4)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mean IoU of a checkpoint on seeded episodes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--config")
    e.add_argument("--domain")
    e.add_argument("--k", type=int)
    e.add_argument("--n", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.add_argument("--dump-soft", action="store_true")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", help="active-matching counts per level")
    d.add_argument("--checkpoint", required=True, nargs="+")
    d.add_argument("--dataset", required=True)
    d.add_argument("--config")
    d.add_argument("--domain")
    d.add_argument("--k", type=int, default=1)
    d.add_argument("--n", type=int, default=20)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_diagnose)

    g = sub.add_parser("gradcheck", help="finite-difference check of every trainable group")
    g.add_argument("--config")
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EpisodeError as exc:
        if isinstance(exc.__cause__, DegenerateInputError):
            print(f"error: degenerate checkpoint or input: {exc}", file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, ForgeConfigError, SamplingError, FormatError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
