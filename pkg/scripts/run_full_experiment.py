#!/usr/bin/env python3
"""End-to-end desk-scale experiment.

Generates (or reuses) the toy dataset, trains both stages, runs the SNR
sweep (full pipeline + no-denoiser ablation) and the de-noising-steps
sweep, and renders the report. Everything derives from one master seed;
re-running with the same arguments reproduces every CSV byte-for-byte.
"""

import argparse
import time
from pathlib import Path

from latentcomm.autoencoder import load_stage1, train_stage1
from latentcomm.config import load_config
from latentcomm.data import ingest_dataset, synthesize_images
from latentcomm.diffusion import load_stage2, train_stage2
from latentcomm.schedule import snr_to_start_step
from latentcomm.sweeps import emit_report, run_snr_sweep, run_steps_sweep

T0 = time.time()


def stamp(msg: str) -> None:
    print(f"[{time.time() - T0:7.0f}s] {msg}", flush=True)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="results/full_experiment")
    parser.add_argument("--config", help="optional config file with overrides")
    parser.add_argument("--images", type=int, default=1100)
    parser.add_argument("--set", action="append", default=[],
                        metavar="SECTION.KEY=VALUE")
    args = parser.parse_args()

    overrides = dict(item.split("=", 1) for item in args.set)
    cfg = load_config(args.config, overrides)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    data_dir = out / "images"
    if not data_dir.exists() or not any(data_dir.iterdir()):
        stamp(f"generating {args.images} toy images")
        synthesize_images(data_dir, args.images, size=cfg.model.image_size,
                          seed=cfg.train.master_seed)
    dataset = ingest_dataset(data_dir, (cfg.model.image_size,) * 2)
    stamp(f"dataset: {dataset.manifest.count} images "
          f"({dataset.manifest.n_train}/{dataset.manifest.n_val}/"
          f"{dataset.manifest.n_test} train/val/test)")

    _, train_images = dataset.subset("train")
    _, val_images = dataset.subset("val")
    test_ids, test_images = dataset.subset("test")

    stage1_path = out / "stage1.pt"
    if stage1_path.exists():
        stage1 = load_stage1(stage1_path)
        stamp("reusing stage-1 checkpoint")
    else:
        stage1 = train_stage1(train_images, val_images, cfg, out_path=stage1_path,
                              log_every=5)
        stamp("stage-1 training done")

    stage2_path = out / "stage2.pt"
    if stage2_path.exists():
        stage2 = load_stage2(stage2_path)
        stamp("reusing stage-2 checkpoint")
    else:
        stage2 = train_stage2(stage1, train_images, cfg, out_path=stage2_path,
                              log_every=500)
        stamp("stage-2 training done")

    cache = out / "cache"
    snr_result = run_snr_sweep(stage1, stage2, test_ids, test_images,
                               cfg.eval.snr_list, cfg.train.master_seed,
                               include_ablation=cfg.eval.include_ablation,
                               channel=cfg.channel, cache_dir=cache,
                               workers=cfg.eval.workers, log=stamp)
    snr_result.save(out / "sweep_snr.json")

    counts = cfg.eval.step_counts
    if not counts:
        matched = snr_to_start_step(stage2.schedule, cfg.eval.steps_snr_db)
        counts = sorted({max(1, matched // 2), matched,
                         min(stage2.schedule.T, 2 * matched)})
    steps_result = run_steps_sweep(stage1, stage2, test_ids, test_images,
                                   cfg.eval.steps_snr_db, counts,
                                   cfg.train.master_seed, channel=cfg.channel,
                                   cache_dir=cache, workers=cfg.eval.workers,
                                   log=stamp)
    steps_result.save(out / "sweep_steps.json")

    written = emit_report([snr_result, steps_result], out / "report")
    for path in written:
        stamp(f"wrote {path}")
    stamp("experiment complete")


if __name__ == "__main__":
    main()
