"""End-to-end transmit/receive path.

One transmission: encode, sample a latent, normalize its power, push it
through the AWGN channel, rescale at the receiver, optionally walk the
reverse de-noising chain, undo the transmit normalization and decode.
The no-denoiser ablation skips the reverse chain and hands the received
latent (rescaled back to the trained latent scale) straight to the
decoder.

Channel-domain arithmetic runs in float64 and converts back to float32
at the model boundary, so a noiseless zero-step transmission reproduces
the plain autoencoder round trip bit-for-bit.
"""

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autoencoder import ShapeError, Stage1System, decode, encode, sample_latent
from .channel import ChannelConfig, awgn_transmit, power_normalize, receiver_normalize
from .checkpoint import CheckpointError
from .diffusion import Stage2System, denoise
from .metrics import compute_metrics
from .schedule import ScheduleError
from .seeding import Streams

STAGE_ORDER = ("clean", "normalized", "received", "denoising", "denoised")

CSV_HEADER = "image_id,snr_db,t_start,psnr,ssim,ms"


@dataclass
class TransmissionRecord:
    """Everything observable about one image's trip through the link."""

    image_id: str
    snr_db: float
    t_start: int
    steps_applied: int
    psnr: float
    ssim: float
    mse: float
    wall_ms: float
    norm_mode: str
    stages: tuple = ()
    latents: dict = field(default_factory=dict)   # stage -> array, when retained
    reconstruction: np.ndarray | None = None

    def csv_row(self) -> str:
        return (f"{self.image_id},{self.snr_db!r},{self.t_start},"
                f"{self.psnr!r},{self.ssim!r},{self.wall_ms!r}")


def _check_power(z_nor: np.ndarray, power: float) -> None:
    msp = float(np.mean(z_nor**2))
    if abs(msp - power) > 1e-9 * max(1.0, power):
        raise AssertionError(f"post-normalization power {msp} != {power}")


def _prepare_latent(stage1: Stage1System, x: np.ndarray, rng: Streams,
                    latent_mode: str):
    """Encode one image and draw (or take the mean of) its latent."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise ShapeError(f"transmit expects one (H, W, 3) image, got {x.shape}")
    params = encode(stage1.encoder, x)
    if latent_mode == "mu":
        return x, params.mu.astype(np.float64)
    return x, sample_latent(params, rng.torch("latent")).astype(np.float64)


def transmit(stage1: Stage1System, stage2: Stage2System, x: np.ndarray,
             snr_db: float, rng: Streams, steps_override: int | None = None,
             channel: ChannelConfig | None = None, image_id: str = "img",
             latent_mode: str = "sample", keep_latents: bool = False,
             keep_reconstruction: bool = False, step_hook=None) -> TransmissionRecord:
    """Full transmission with receiver-side de-noising.

    The de-noising start step is ``steps_override`` when given (0 skips
    the reverse chain entirely, reducing to the ablation path), otherwise
    the step whose marginal SNR matches the channel.
    """
    if stage2.stage1_fingerprint != stage1.fingerprint:
        raise CheckpointError(
            "stage-2 checkpoint was trained against a different stage-1 model")
    sched = stage2.schedule
    if steps_override is not None and not 0 <= steps_override <= sched.T:
        raise ScheduleError(f"steps_override {steps_override} outside [0, {sched.T}]")
    channel = channel or ChannelConfig(snr_db=snr_db)
    t0 = time.perf_counter()

    x, z = _prepare_latent(stage1, x, rng, latent_mode)
    stages = ["clean"]
    latents = {"clean": z.copy()} if keep_latents else {}

    z_norm_record = float(np.linalg.norm(z))
    z_nor = power_normalize(z, channel.power)
    _check_power(z_nor, channel.power)
    stages.append("normalized")
    if keep_latents:
        latents["normalized"] = z_nor.copy()

    cfg = ChannelConfig(power=channel.power, snr_db=snr_db, seed=channel.seed,
                        norm_mode=channel.norm_mode)
    z_tilde = awgn_transmit(z_nor, cfg, rng.numpy("channel"))
    stages.append("received")
    if keep_latents:
        latents["received"] = z_tilde.copy()

    # undoing the transmit normalization restores the trained latent scale
    unscale = z_norm_record / np.sqrt(z.size * channel.power)

    steps_applied = 0
    if steps_override == 0:
        z_out = z_tilde
        t_start = 0
    else:
        z_rx, t_matched = receiver_normalize(z_tilde, snr_db, sched,
                                             mode=cfg.norm_mode, power=channel.power)
        t_start = int(steps_override) if steps_override is not None else t_matched
        counter = {"n": 0}

        def hook(t, z_state):
            counter["n"] += 1
            if step_hook is not None:
                step_hook(t, z_state)

        stages.append("denoising")
        z_hat = denoise(stage2.denoiser, z_rx.astype(np.float32), t_start, sched,
                        rng.torch("reverse"), stage2.config.diffusion.sigma_mode,
                        step_hook=hook)
        steps_applied = counter["n"]
        stages.append("denoised")
        z_out = z_hat.astype(np.float64)
        if keep_latents:
            latents["denoised"] = z_out.copy()

    x_rec = decode(stage1.decoder, (z_out * unscale).astype(np.float32))
    result = compute_metrics(x, x_rec)
    wall_ms = (time.perf_counter() - t0) * 1e3
    return TransmissionRecord(
        image_id=image_id, snr_db=float(snr_db), t_start=t_start,
        steps_applied=steps_applied, psnr=result.psnr, ssim=result.ssim,
        mse=result.mse, wall_ms=wall_ms, norm_mode=cfg.norm_mode,
        stages=tuple(stages), latents=latents,
        reconstruction=x_rec if keep_reconstruction else None)


def transmit_ablation(stage1: Stage1System, x: np.ndarray, snr_db: float,
                      rng: Streams, channel: ChannelConfig | None = None,
                      image_id: str = "img", latent_mode: str = "sample",
                      keep_latents: bool = False,
                      keep_reconstruction: bool = False) -> TransmissionRecord:
    """No-denoiser baseline: the received latent goes straight to the
    decoder after the transmit normalization is undone."""
    channel = channel or ChannelConfig(snr_db=snr_db)
    t0 = time.perf_counter()

    x, z = _prepare_latent(stage1, x, rng, latent_mode)
    stages = ["clean"]
    latents = {"clean": z.copy()} if keep_latents else {}

    z_norm_record = float(np.linalg.norm(z))
    z_nor = power_normalize(z, channel.power)
    _check_power(z_nor, channel.power)
    stages.append("normalized")
    if keep_latents:
        latents["normalized"] = z_nor.copy()

    cfg = ChannelConfig(power=channel.power, snr_db=snr_db, seed=channel.seed,
                        norm_mode=channel.norm_mode)
    z_tilde = awgn_transmit(z_nor, cfg, rng.numpy("channel"))
    stages.append("received")
    if keep_latents:
        latents["received"] = z_tilde.copy()

    unscale = z_norm_record / np.sqrt(z.size * channel.power)
    x_rec = decode(stage1.decoder, (z_tilde * unscale).astype(np.float32))
    result = compute_metrics(x, x_rec)
    wall_ms = (time.perf_counter() - t0) * 1e3
    return TransmissionRecord(
        image_id=image_id, snr_db=float(snr_db), t_start=0, steps_applied=0,
        psnr=result.psnr, ssim=result.ssim, mse=result.mse, wall_ms=wall_ms,
        norm_mode=cfg.norm_mode, stages=tuple(stages), latents=latents,
        reconstruction=x_rec if keep_reconstruction else None)


# ---------------------------------------------------------------------------
# debug latent dumps: tiny binary tensor container

_TENSOR_MAGIC = b"LTNT"
_DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_tensor(path, array: np.ndarray) -> None:
    """Write an array as magic + dtype tag + shape prefix + raw data."""
    array = np.ascontiguousarray(array)
    if array.dtype not in _DTYPE_CODES:
        array = array.astype(np.float64)
    with open(path, "wb") as fh:
        fh.write(_TENSOR_MAGIC)
        fh.write(struct.pack("<BB", 1, _DTYPE_CODES[array.dtype]))
        fh.write(struct.pack("<B", array.ndim))
        fh.write(struct.pack(f"<{array.ndim}q", *array.shape))
        fh.write(array.tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != _TENSOR_MAGIC:
            raise ValueError(f"{path} is not a tensor container")
        version, dtype_code = struct.unpack("<BB", fh.read(2))
        if version != 1 or dtype_code not in _CODE_DTYPES:
            raise ValueError(f"unsupported tensor container version/dtype in {path}")
        ndim, = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
        data = np.frombuffer(fh.read(), dtype=_CODE_DTYPES[dtype_code])
    return data.reshape(shape).copy()


def dump_latents(record: TransmissionRecord, out_dir) -> list:
    """Persist every retained per-stage latent of a record."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for stage, array in record.latents.items():
        path = out_dir / f"{record.image_id}_{stage}.ltnt"
        save_tensor(path, array)
        written.append(path)
    return written
