"""Dataset ingestion and the procedural toy image set.

Images are decoded, center-cropped square, resized to the target shape
and mapped to float32 in [-1, 1] (NHWC). The train/val/test split is a
pure function of each file's content hash, so it is stable across runs
and machines for identical inputs.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
TEST_PERCENT = 20
VAL_PERCENT = 10


class DataError(ValueError):
    """Unusable dataset (empty directory, nothing decodable, ...)."""


@dataclass(frozen=True)
class DatasetManifest:
    source_dir: str
    count: int
    target_hw: tuple
    normalization: str
    content_hash: str
    n_train: int
    n_val: int
    n_test: int
    warnings: tuple = ()


@dataclass
class Dataset:
    """Ingested images plus their deterministic split."""

    manifest: DatasetManifest
    ids: list
    images: np.ndarray            # (N, H, W, 3) float32 in [-1, 1]
    split: dict = field(default_factory=dict)   # name -> index array

    def subset(self, name: str) -> tuple[list, np.ndarray]:
        idx = self.split[name]
        return [self.ids[i] for i in idx], self.images[idx]


def _bucket(file_hash: str) -> str:
    b = int(file_hash[:8], 16) % 100
    if b < TEST_PERCENT:
        return "test"
    if b < TEST_PERCENT + VAL_PERCENT:
        return "val"
    return "train"


def _load_image(path: Path, target_hw: tuple) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        side = min(w, h)
        left = (w - side) // 2
        top = (h - side) // 2
        im = im.crop((left, top, left + side, top + side))
        im = im.resize((target_hw[1], target_hw[0]), Image.Resampling.LANCZOS)
        arr = np.asarray(im, dtype=np.float32)
    return arr / 127.5 - 1.0


def ingest_dataset(directory: str | Path, target_hw: tuple = (32, 32)) -> Dataset:
    """Load every decodable PNG/JPEG under ``directory``.

    Undecodable files are skipped with a warning; the ingest fails only
    if nothing remains. Returns the images, ids (relative paths) and the
    hash-based train/val/test split.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory not found: {directory}")
    paths = sorted(p for p in directory.rglob("*")
                   if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
    if not paths:
        raise DataError(f"no PNG/JPEG images under {directory}")

    ids, arrays, hashes, warnings = [], [], [], []
    buckets = {"train": [], "val": [], "test": []}
    for path in paths:
        raw = path.read_bytes()
        file_hash = hashlib.sha256(raw).hexdigest()
        try:
            arr = _load_image(path, target_hw)
        except Exception as exc:  # undecodable or truncated file
            msg = f"skipping {path.name}: {exc}"
            warnings.append(msg)
            logger.warning(msg)
            continue
        rel = path.relative_to(directory).as_posix()
        buckets[_bucket(file_hash)].append(len(ids))
        ids.append(rel)
        arrays.append(arr)
        hashes.append((rel, file_hash))
    if not arrays:
        raise DataError(f"no decodable images under {directory}")

    digest = hashlib.sha256()
    for rel, file_hash in sorted(hashes):
        digest.update(rel.encode())
        digest.update(file_hash.encode())

    split = {name: np.asarray(idx, dtype=np.int64) for name, idx in buckets.items()}
    manifest = DatasetManifest(
        source_dir=str(directory),
        count=len(ids),
        target_hw=tuple(target_hw),
        normalization="[-1,1]",
        content_hash=digest.hexdigest(),
        n_train=len(split["train"]),
        n_val=len(split["val"]),
        n_test=len(split["test"]),
        warnings=tuple(warnings),
    )
    return Dataset(manifest=manifest, ids=ids,
                   images=np.stack(arrays).astype(np.float32), split=split)


# ---------------------------------------------------------------------------
# procedural toy images


def _gradient(rng, size):
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-9)
    lo, hi = rng.uniform(0, 0.45, 3), rng.uniform(0.55, 1.0, 3)
    return lo + ramp[..., None] * (hi - lo)


def _texture(rng, size):
    noise = rng.standard_normal((size, size, 3))
    from scipy.ndimage import gaussian_filter
    smooth = gaussian_filter(noise, sigma=(rng.uniform(1.0, 3.0),) * 2 + (0,))
    smooth -= smooth.min()
    smooth /= smooth.max() + 1e-9
    return smooth


def _shapes(rng, size):
    img = _gradient(rng, size)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(1, 4)):
        color = rng.uniform(0, 1, 3)
        if rng.random() < 0.5:
            cx, cy = rng.uniform(0, size, 2)
            r = rng.uniform(size * 0.1, size * 0.4)
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r**2
        else:
            x0, y0 = rng.integers(0, size - 4, 2)
            x1 = rng.integers(x0 + 3, size)
            y1 = rng.integers(y0 + 3, size)
            mask = (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
        img[mask] = color
    return img


def _checker(rng, size):
    cell = int(rng.integers(2, max(3, size // 4)))
    yy, xx = np.mgrid[0:size, 0:size]
    pattern = ((xx // cell + yy // cell) % 2).astype(np.float64)
    a, b = rng.uniform(0, 1, (2, 3))
    return a + pattern[..., None] * (b - a)


def _plaid(rng, size):
    t = np.arange(size)
    fx, fy = rng.uniform(0.5, 4.0, 2)
    px, py = rng.uniform(0, 2 * np.pi, 2)
    wave = 0.5 + 0.25 * (np.sin(2 * np.pi * fx * t / size + px)[None, :]
                         + np.sin(2 * np.pi * fy * t / size + py)[:, None])
    tint = rng.uniform(0.5, 1.0, 3)
    return np.clip(wave[..., None] * tint, 0, 1)


_FAMILIES = (_gradient, _texture, _shapes, _checker, _plaid)


def synthesize_images(out_dir: str | Path, n: int, size: int = 32,
                      seed: int = 0) -> list[Path]:
    """Write n deterministic procedural PNGs (gradients, textures,
    shapes, checkers, plaids) into out_dir and return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        maker = _FAMILIES[i % len(_FAMILIES)]
        img = np.clip(maker(rng, size), 0.0, 1.0)
        arr = (img * 255.0).round().astype(np.uint8)
        path = out_dir / f"toy_{i:05d}.png"
        Image.fromarray(arr).save(path)
        paths.append(path)
    return paths
