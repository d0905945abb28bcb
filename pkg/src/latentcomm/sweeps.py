"""Sweeps over SNR and de-noising step counts, result persistence, reports.

Each (series, axis value, image) point is an independent transmission
with its own derived RNG streams, cached as one JSON file keyed by the
config hash, so interrupted sweeps resume without recomputing finished
points and a full re-run under the same master seed reproduces every
aggregate exactly.
"""

import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autoencoder import Stage1System
from .channel import ChannelConfig
from .diffusion import Stage2System
from .pipeline import transmit, transmit_ablation
from .schedule import ScheduleError
from .seeding import Streams


class SweepError(ValueError):
    """Inconsistent sweep inputs (mismatched configs, bad step counts...)."""


@dataclass(frozen=True)
class SweepPoint:
    axis_value: float
    mean_psnr: float
    std_psnr: float
    mean_ssim: float
    std_ssim: float
    n: int


@dataclass
class SweepResult:
    """Per-point metric statistics for one or more labeled series."""

    axis_name: str                      # "snr_db" or "steps"
    series: dict                        # label -> list[SweepPoint]
    config_hash: str
    master_seed: int
    snr_db: float | None = None        # fixed SNR of a steps sweep

    def to_json(self) -> str:
        payload = {
            "axis_name": self.axis_name,
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "snr_db": self.snr_db,
            "series": {label: [asdict(p) for p in points]
                       for label, points in self.series.items()},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SweepResult":
        payload = json.loads(text)
        series = {label: [SweepPoint(**p) for p in points]
                  for label, points in payload["series"].items()}
        return cls(axis_name=payload["axis_name"], series=series,
                   config_hash=payload["config_hash"],
                   master_seed=payload["master_seed"], snr_db=payload.get("snr_db"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "SweepResult":
        return cls.from_json(Path(path).read_text())


def scaled_step_counts(T: int) -> tuple:
    """De-noising step counts proportional to a T-step schedule, at the
    standard sweep ratios i/13 for i in 1..4."""
    return tuple(int(round(i * T / 13)) for i in (1, 2, 3, 4))


# ---------------------------------------------------------------------------
# per-point cache


def _cache_path(cache_dir: Path, config_hash: str, series: str, axis_name: str,
                axis_value, image_id: str) -> Path:
    safe_id = image_id.replace("/", "__")
    return (cache_dir / config_hash[:16] / series
            / f"{axis_name}={axis_value!r}" / f"{safe_id}.json")


def _cache_read(path: Path):
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError):
        return None


def _cache_write(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _one_point(stage1, stage2, image_id, image, series, snr_db, steps, channel,
               master_seed) -> dict:
    label = f"snr={float(snr_db)!r}" if steps is None else \
        f"snr={float(snr_db)!r}/steps={steps}"
    rng = Streams(master_seed, "transmit", series, label, image_id)
    if series == "ablation":
        rec = transmit_ablation(stage1, image, snr_db, rng, channel=channel,
                                image_id=image_id)
    else:
        rec = transmit(stage1, stage2, image, snr_db, rng, steps_override=steps,
                       channel=channel, image_id=image_id)
    return {"psnr": rec.psnr, "ssim": rec.ssim, "mse": rec.mse,
            "wall_ms": rec.wall_ms, "t_start": rec.t_start}


def _run_series_point(stage1, stage2, ids, images, series, axis_name, axis_value,
                      snr_db, steps, channel, master_seed, config_hash,
                      cache_dir, workers) -> list:
    """All images of one (series, axis value) sweep point, cache-aware.

    Returns per-image metric dicts ordered by image id.
    """
    jobs = []
    results = {}
    for image_id, image in zip(ids, images):
        cached = None
        if cache_dir is not None:
            cached = _cache_read(_cache_path(cache_dir, config_hash, series,
                                             axis_name, axis_value, image_id))
        if cached is not None:
            results[image_id] = cached
        else:
            jobs.append((image_id, image))

    def work(job):
        image_id, image = job
        out = _one_point(stage1, stage2, image_id, image, series, snr_db, steps,
                         channel, master_seed)
        if cache_dir is not None:
            _cache_write(_cache_path(cache_dir, config_hash, series, axis_name,
                                     axis_value, image_id), out)
        return image_id, out

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for image_id, out in pool.map(work, jobs):
                results[image_id] = out
    else:
        for job in jobs:
            image_id, out = work(job)
            results[image_id] = out
    return [results[i] for i in sorted(results)]


def _aggregate(axis_value, rows: list) -> SweepPoint:
    psnrs = np.asarray([r["psnr"] for r in rows], dtype=np.float64)
    ssims = np.asarray([r["ssim"] for r in rows], dtype=np.float64)
    return SweepPoint(axis_value=float(axis_value),
                      mean_psnr=float(psnrs.mean()), std_psnr=float(psnrs.std()),
                      mean_ssim=float(ssims.mean()), std_ssim=float(ssims.std()),
                      n=len(rows))


def _common_hash(stage1: Stage1System, stage2: Stage2System | None) -> str:
    if stage2 is not None and stage1.config_hash != stage2.config_hash:
        raise SweepError("stage-1 and stage-2 checkpoints carry different configs")
    return stage1.config_hash


def run_snr_sweep(stage1: Stage1System, stage2: Stage2System, ids, images,
                  snr_list, master_seed: int, include_ablation: bool = True,
                  channel: ChannelConfig | None = None, cache_dir=None,
                  workers: int = 1, log=None) -> SweepResult:
    """Transmit the image set at every SNR, full pipeline and (optionally)
    the no-denoiser ablation, aggregating mean/std PSNR and SSIM."""
    if len(ids) == 0:
        raise SweepError("empty image set")
    config_hash = _common_hash(stage1, stage2)
    cache_dir = Path(cache_dir) if cache_dir is not None else None
    series_labels = ["full"] + (["ablation"] if include_ablation else [])
    series = {label: [] for label in series_labels}
    for snr_db in snr_list:
        for label in series_labels:
            rows = _run_series_point(stage1, stage2, ids, images, label, "snr_db",
                                     float(snr_db), snr_db, None, channel,
                                     master_seed, config_hash, cache_dir, workers)
            series[label].append(_aggregate(float(snr_db), rows))
            if log:
                p = series[label][-1]
                log(f"[sweep-snr] {label} snr={snr_db}: "
                    f"psnr={p.mean_psnr:.2f}±{p.std_psnr:.2f} "
                    f"ssim={p.mean_ssim:.4f} (n={p.n})")
    return SweepResult(axis_name="snr_db", series=series, config_hash=config_hash,
                       master_seed=int(master_seed))


def run_steps_sweep(stage1: Stage1System, stage2: Stage2System, ids, images,
                    snr_db: float, step_counts, master_seed: int,
                    channel: ChannelConfig | None = None, cache_dir=None,
                    workers: int = 1, log=None) -> SweepResult:
    """Transmit the image set at one SNR while varying the de-noising step
    count (0 = the ablation path)."""
    if len(ids) == 0:
        raise SweepError("empty image set")
    config_hash = _common_hash(stage1, stage2)
    T = stage2.schedule.T
    for count in step_counts:
        if not 0 <= int(count) <= T:
            raise ScheduleError(f"step count {count} outside [0, {T}]")
    cache_dir = Path(cache_dir) if cache_dir is not None else None
    points = []
    for count in step_counts:
        rows = _run_series_point(stage1, stage2, ids, images, "full", "steps",
                                 int(count), snr_db, int(count), channel,
                                 master_seed, config_hash, cache_dir, workers)
        points.append(_aggregate(int(count), rows))
        if log:
            p = points[-1]
            log(f"[sweep-steps] steps={count}: psnr={p.mean_psnr:.2f} "
                f"ssim={p.mean_ssim:.4f} (n={p.n})")
    return SweepResult(axis_name="steps", series={"full": points},
                       config_hash=config_hash, master_seed=int(master_seed),
                       snr_db=float(snr_db))


# ---------------------------------------------------------------------------
# reports

CSV_COLUMNS = "series,axis,mean_psnr,std_psnr,mean_ssim,std_ssim,n"


def emit_report(results: list, out_dir) -> list:
    """Write one CSV per sweep, one plot per metric per sweep, and a text
    summary of config hashes and seeds. Re-emitting from the same results
    yields byte-identical CSVs."""
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    if not results:
        raise SweepError("emit_report needs at least one SweepResult")
    hashes = {r.config_hash for r in results}
    if len(hashes) != 1:
        raise SweepError(f"refusing to mix config hashes in one report: {sorted(hashes)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    for i, result in enumerate(results):
        # every artifact is keyed by the config hash it was produced under
        stem = f"sweep{i:02d}_{result.axis_name}_{result.config_hash[:8]}"
        csv_path = out_dir / f"{stem}.csv"
        lines = [CSV_COLUMNS]
        for label in sorted(result.series):
            for p in result.series[label]:
                lines.append(f"{label},{p.axis_value!r},{p.mean_psnr!r},"
                             f"{p.std_psnr!r},{p.mean_ssim!r},{p.std_ssim!r},{p.n}")
        csv_path.write_text("\n".join(lines) + "\n")
        written.append(csv_path)

        for metric in ("psnr", "ssim"):
            fig, ax = plt.subplots(figsize=(6, 4))
            for label in sorted(result.series):
                points = result.series[label]
                xs = [p.axis_value for p in points]
                ys = [getattr(p, f"mean_{metric}") for p in points]
                errs = [getattr(p, f"std_{metric}") for p in points]
                ax.errorbar(xs, ys, yerr=errs, marker="o", capsize=3, label=label)
            ax.set_xlabel(result.axis_name)
            ax.set_ylabel(metric.upper())
            title = f"{metric.upper()} vs {result.axis_name}"
            if result.snr_db is not None:
                title += f" @ {result.snr_db:g} dB"
            ax.set_title(f"{title}  [{result.config_hash[:8]}]")
            ax.grid(alpha=0.3)
            ax.legend()
            fig.tight_layout()
            plot_path = out_dir / f"{stem}_{metric}.png"
            fig.savefig(plot_path, dpi=110)
            plt.close(fig)
            written.append(plot_path)

    summary = out_dir / "summary.txt"
    lines = ["sweep report", ""]
    for i, result in enumerate(results):
        lines.append(f"sweep{i:02d}: axis={result.axis_name} "
                     f"series={sorted(result.series)} "
                     f"points={[len(v) for _, v in sorted(result.series.items())]}")
        if result.snr_db is not None:
            lines.append(f"  fixed snr_db={result.snr_db!r}")
        lines.append(f"  config_hash={result.config_hash}")
        lines.append(f"  master_seed={result.master_seed}")
    summary.write_text("\n".join(lines) + "\n")
    written.append(summary)
    return written
