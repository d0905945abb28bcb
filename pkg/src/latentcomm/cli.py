"""Command-line interface.

Verbs: train-ae, train-diff, eval, sweep-snr, sweep-steps, report.
Every verb reads the layered configuration (defaults < config file <
LATENTCOMM_SECTION__KEY environment variables < --set overrides) and the
few convenience flags map onto config keys with the highest precedence.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autoencoder import load_stage1, train_stage1
from .config import ConfigError, load_config
from .data import ingest_dataset
from .diffusion import load_stage2, train_stage2
from .pipeline import CSV_HEADER, transmit, transmit_ablation
from .seeding import Streams
from .sweeps import SweepResult, emit_report, run_snr_sweep, run_steps_sweep, \
    scaled_step_counts


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file (ini sections: model, train, "
                                         "channel, diffusion, eval)")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    parser.add_argument("--data-dir", help="image directory (train.data_dir)")
    parser.add_argument("--out-dir", help="output directory (eval.out_dir)")
    parser.add_argument("--seed", type=int, help="master seed (train.master_seed)")


def _build_config(args: argparse.Namespace):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        dotted, value = item.split("=", 1)
        overrides[dotted.strip()] = value.strip()
    if getattr(args, "data_dir", None):
        overrides["train.data_dir"] = args.data_dir
    if getattr(args, "out_dir", None):
        overrides["eval.out_dir"] = args.out_dir
    if getattr(args, "seed", None) is not None:
        overrides["train.master_seed"] = str(args.seed)
    if getattr(args, "epochs", None) is not None:
        key = "diffusion.epochs" if args.command == "train-diff" else "train.epochs"
        overrides[key] = str(args.epochs)
    if getattr(args, "snr", None) is not None:
        overrides["channel.snr_db"] = str(args.snr)
        overrides["eval.steps_snr_db"] = str(args.snr)
    return load_config(args.config, overrides)


def _ingest(cfg):
    size = cfg.model.image_size
    dataset = ingest_dataset(cfg.train.data_dir, (size, size))
    m = dataset.manifest
    print(f"dataset: {m.count} images ({m.n_train} train / {m.n_val} val / "
          f"{m.n_test} test), hash {m.content_hash[:12]}")
    for warning in m.warnings:
        print(f"  warning: {warning}")
    return dataset


def _limit(ids, images, max_images: int):
    if max_images and len(ids) > max_images:
        return ids[:max_images], images[:max_images]
    return ids, images


def cmd_train_ae(args) -> int:
    cfg = _build_config(args)
    dataset = _ingest(cfg)
    _, train_images = dataset.subset("train")
    _, val_images = dataset.subset("val")
    out = Path(cfg.eval.out_dir) / "stage1.pt"
    system = train_stage1(train_images, val_images, cfg, out_path=out,
                          resume_from=args.resume, log_every=args.log_every)
    best = min(system.history["val_recon"]) if system.history["val_recon"] else float("nan")
    print(f"stage-1 checkpoint: {out} (best val recon {best:.5f})")
    return 0


def cmd_train_diff(args) -> int:
    cfg = _build_config(args)
    dataset = _ingest(cfg)
    _, train_images = dataset.subset("train")
    stage1 = load_stage1(args.stage1)
    out = Path(cfg.eval.out_dir) / "stage2.pt"
    system = train_stage2(stage1, train_images, cfg, out_path=out,
                          resume_from=args.resume, log_every=args.log_every)
    tail = np.mean(system.history["loss"][-50:]) if system.history["loss"] else float("nan")
    print(f"stage-2 checkpoint: {out} (final loss ~{tail:.4f})")
    return 0


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    dataset = _ingest(cfg)
    ids, images = _limit(*dataset.subset("test"), cfg.eval.max_images)
    stage1 = load_stage1(args.stage1)
    if not args.ablation and not args.stage2:
        raise ConfigError("eval needs --stage2 unless --ablation is given")
    stage2 = None if args.ablation else load_stage2(args.stage2)
    snr_db = cfg.channel.snr_db
    rows = []
    for image_id, image in zip(ids, images):
        rng = Streams(cfg.train.master_seed, "eval", f"snr={snr_db!r}", image_id)
        if args.ablation:
            rec = transmit_ablation(stage1, image, snr_db, rng, channel=cfg.channel,
                                    image_id=image_id)
        else:
            rec = transmit(stage1, stage2, image, snr_db, rng,
                           steps_override=args.steps, channel=cfg.channel,
                           image_id=image_id)
        rows.append(rec)
    out_dir = Path(cfg.eval.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"eval_snr{snr_db:g}.csv"
    csv_path.write_text("\n".join([CSV_HEADER] + [r.csv_row() for r in rows]) + "\n")
    print(f"snr={snr_db:g} dB over {len(rows)} images: "
          f"psnr={np.mean([r.psnr for r in rows]):.2f} dB "
          f"ssim={np.mean([r.ssim for r in rows]):.4f} -> {csv_path}")
    return 0


def _load_pair(args):
    stage1 = load_stage1(args.stage1)
    stage2 = load_stage2(args.stage2)
    return stage1, stage2


def cmd_sweep_snr(args) -> int:
    cfg = _build_config(args)
    dataset = _ingest(cfg)
    ids, images = _limit(*dataset.subset("test"), cfg.eval.max_images)
    stage1, stage2 = _load_pair(args)
    out_dir = Path(cfg.eval.out_dir)
    result = run_snr_sweep(stage1, stage2, ids, images, cfg.eval.snr_list,
                           cfg.train.master_seed,
                           include_ablation=cfg.eval.include_ablation,
                           channel=cfg.channel, cache_dir=out_dir / "cache",
                           workers=cfg.eval.workers, log=print)
    out = out_dir / "sweep_snr.json"
    result.save(out)
    print(f"sweep result: {out}")
    return 0


def cmd_sweep_steps(args) -> int:
    cfg = _build_config(args)
    dataset = _ingest(cfg)
    ids, images = _limit(*dataset.subset("test"), cfg.eval.max_images)
    stage1, stage2 = _load_pair(args)
    counts = cfg.eval.step_counts or scaled_step_counts(stage2.schedule.T)
    out_dir = Path(cfg.eval.out_dir)
    result = run_steps_sweep(stage1, stage2, ids, images, cfg.eval.steps_snr_db,
                             counts, cfg.train.master_seed, channel=cfg.channel,
                             cache_dir=out_dir / "cache",
                             workers=cfg.eval.workers, log=print)
    out = out_dir / "sweep_steps.json"
    result.save(out)
    print(f"sweep result: {out}")
    return 0


def cmd_report(args) -> int:
    results = [SweepResult.load(p) for p in args.results]
    written = emit_report(results, args.out_dir or "results")
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentcomm",
        description="Latent-space image transmission over AWGN with a "
                    "diffusion de-noiser at the receiver.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-ae", help="train the stage-1 autoencoder")
    _add_common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="stage-1 checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=5)
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("train-diff", help="train the stage-2 de-noiser")
    _add_common(p)
    p.add_argument("--stage1", required=True, help="stage-1 checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="stage-2 checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train_diff)

    p = sub.add_parser("eval", help="evaluate the pipeline at one SNR")
    _add_common(p)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2")
    p.add_argument("--snr", type=float)
    p.add_argument("--steps", type=int, help="override the de-noising step count")
    p.add_argument("--ablation", action="store_true", help="skip the de-noiser")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-snr", help="PSNR/SSIM versus channel SNR")
    _add_common(p)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.set_defaults(func=cmd_sweep_snr)

    p = sub.add_parser("sweep-steps", help="PSNR/SSIM versus de-noising steps")
    _add_common(p)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--snr", type=float, help="fixed channel SNR for the sweep")
    p.set_defaults(func=cmd_sweep_steps)

    p = sub.add_parser("report", help="render CSVs and plots from sweep results")
    p.add_argument("results", nargs="+", help="sweep result JSON files")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
