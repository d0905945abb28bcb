"""Stage-2 model and training: the latent-space de-noiser.

A small U-shaped network conditioned on the step index predicts the
noise component of a noised latent. Training minimizes the mean squared
error between drawn and predicted noise over uniformly sampled steps;
inference walks the learned reverse chain from a start step matched to
the channel SNR down to a clean latent.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import (AttnBlock, ShapeError, Stage1System, TrainingDivergedError,
                          _group_norm, load_stage1)
from .checkpoint import (CheckpointError, FORMAT_VERSION, load_checkpoint,
                         save_checkpoint)
from .config import ExperimentConfig
from .schedule import NoiseSchedule, ScheduleError, schedule_from_betas, \
    make_linear_schedule
from .seeding import derive_seed, torch_generator


# ---------------------------------------------------------------------------
# model


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic sin/cos positional features of the integer step index."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32)
                      / max(half - 1, 1))
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeResBlock(nn.Module):
    """Residual block conditioned on the step embedding.

    The embedding enters as a per-channel scale and shift of the second
    normalization, so step-dependent gains on the signal are linearly
    representable.
    """

    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = _group_norm(in_ch, groups)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, 2 * out_ch)
        self.norm2 = _group_norm(out_ch, groups)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.time_proj(F.silu(temb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class DenoiserUNet(nn.Module):
    """Noise predictor: latent and step index in, estimated noise out.

    Two (configurable) resolution levels with skip connections, one
    attention block at the bottleneck, and a zero-initialized output
    projection so the initial prediction is zero.
    """

    def __init__(self, latent_channels: int = 4, width: int = 64, levels: int = 2,
                 time_dim: int = 128, max_step: int = 200, groups: int = 8):
        super().__init__()
        self.latent_channels = latent_channels
        self.max_step = max_step
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.time_dim = time_dim

        widths = [width * 2**i for i in range(levels)]
        self.stem = nn.Conv2d(latent_channels, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        for i, w in enumerate(widths):
            in_w = widths[max(i - 1, 0)]
            self.down_blocks.append(nn.ModuleList([
                TimeResBlock(in_w if j == 0 else w, w, time_dim, groups)
                for j in range(2)]))
            self.downsamplers.append(
                nn.Conv2d(w, w, 3, stride=2, padding=1) if i < levels - 1 else nn.Identity())

        mid_w = widths[-1]
        self.mid1 = TimeResBlock(mid_w, mid_w, time_dim, groups)
        self.mid_attn = AttnBlock(mid_w, groups)
        self.mid2 = TimeResBlock(mid_w, mid_w, time_dim, groups)

        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for i in reversed(range(levels)):
            w = widths[i]
            in_w = widths[min(i + 1, levels - 1)]
            self.upsamplers.append(
                nn.Conv2d(in_w, w, 3, padding=1) if i < levels - 1 else nn.Identity())
            self.up_blocks.append(nn.ModuleList([
                TimeResBlock(w * 2 if j == 0 else w, w, time_dim, groups)
                for j in range(2)]))

        self.out_norm = _group_norm(widths[0], groups)
        self.out = nn.Conv2d(widths[0], latent_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, z: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.latent_channels:
            raise ShapeError(
                f"latent has {z.shape[1]} channels, model expects {self.latent_channels}")
        temb = self.time_mlp(sinusoidal_time_embedding(t, self.time_dim))
        h = self.stem(z)
        skips = []
        for blocks, down in zip(self.down_blocks, self.downsamplers):
            for block in blocks:
                h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid2(self.mid_attn(self.mid1(h, temb)), temb)
        for up, blocks in zip(self.upsamplers, self.up_blocks):
            skip = skips.pop()
            if not isinstance(up, nn.Identity):
                h = up(F.interpolate(h, size=skip.shape[-2:], mode="nearest"))
            h = torch.cat([h, skip], dim=1)
            for block in blocks:
                h = block(h, temb)
        return self.out(F.silu(self.out_norm(h)))


class ModuleEMA:
    """Exponential moving average of a module's parameters and buffers."""

    def __init__(self, module: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone().double()
                       for k, v in module.state_dict().items()}

    @torch.no_grad()
    def update(self, module: nn.Module) -> None:
        for key, value in module.state_dict().items():
            self.shadow[key].mul_(self.decay).add_(value.double(), alpha=1 - self.decay)

    def state_dict_float(self) -> dict:
        return {k: v.float() for k, v in self.shadow.items()}

    def load_state(self, state: dict) -> None:
        self.shadow = {k: v.detach().clone().double() for k, v in state.items()}


# ---------------------------------------------------------------------------
# process math


def _check_steps(t, T: int) -> None:
    t_arr = np.asarray(t)
    if t_arr.size == 0 or (t_arr < 1).any() or (t_arr > T).any():
        raise ScheduleError(f"step(s) {t!r} outside [1, {T}]")


def forward_diffuse(z0, t, eps, s: NoiseSchedule):
    """Closed-form forward marginal sqrt(abar_t) z0 + sqrt(1-abar_t) eps.

    Works on numpy arrays or torch tensors; ``t`` may be a scalar step or
    a per-item vector matching the leading batch dimension.
    """
    _check_steps(t, s.T)
    if isinstance(z0, torch.Tensor):
        t_idx = torch.as_tensor(np.asarray(t), dtype=torch.long) - 1
        abar = torch.from_numpy(s.alpha_bars.copy()).to(z0.dtype)[t_idx]
        while abar.dim() < z0.dim():
            abar = abar.unsqueeze(-1)
        return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps
    abar = s.alpha_bars[np.asarray(t) - 1]
    abar = np.reshape(abar, np.shape(abar) + (1,) * (np.ndim(z0) - np.ndim(abar)))
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def _to_torch_latent(z: np.ndarray) -> tuple[torch.Tensor, bool]:
    z = np.asarray(z, dtype=np.float32)
    if z.ndim == 3:
        z = z[None]
        squeeze = True
    elif z.ndim == 4:
        squeeze = False
    else:
        raise ShapeError(f"latent must be (h, w, c) or (N, h, w, c), got {z.shape}")
    return torch.from_numpy(np.ascontiguousarray(z)).permute(0, 3, 1, 2), squeeze


def _from_torch_latent(z: torch.Tensor, squeeze: bool) -> np.ndarray:
    out = z.permute(0, 2, 3, 1).contiguous().numpy()
    return out[0] if squeeze else out


def denoiser_predict(model: DenoiserUNet, z_t: np.ndarray, t: int) -> np.ndarray:
    """Deterministic noise estimate for a latent at step t (numpy surface)."""
    if not 1 <= int(t) <= model.max_step:
        raise ScheduleError(f"step {t} outside [1, {model.max_step}]")
    z, squeeze = _to_torch_latent(z_t)
    model.eval()
    with torch.no_grad():
        pred = model(z, torch.full((z.shape[0],), int(t), dtype=torch.long))
    return _from_torch_latent(pred, squeeze)


def diffusion_loss_given(model, z0: torch.Tensor, t: torch.Tensor,
                         eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Noise-prediction loss for explicit (t, eps): mean over the batch of
    the per-item squared error norm ||eps - eps_hat||^2."""
    z_t = forward_diffuse(z0, t, eps, s)
    pred = model(z_t, t)
    return ((eps - pred) ** 2).flatten(1).sum(dim=1).mean()


def diffusion_loss(model, z0: torch.Tensor, s: NoiseSchedule,
                   gen: torch.Generator) -> torch.Tensor:
    """Training objective: t ~ Uniform{1..T}, eps ~ N(0, I) per item, then
    the squared noise-prediction error. Reproducible for a fixed generator."""
    n = z0.shape[0]
    t = torch.randint(1, s.T + 1, (n,), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    return diffusion_loss_given(model, z0, t, eps, s)


def reverse_step(model, z_t: np.ndarray, t: int, s: NoiseSchedule,
                 gen: torch.Generator | None = None,
                 sigma_mode: str = "posterior") -> np.ndarray:
    """One reverse-chain update from step t to t-1 (numpy surface).

    Computes (z_t - (1-alpha_t)/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)
    plus sigma_t * y, with y ~ N(0, I) for t > 1 and y = 0 at the final
    step, so the last update is deterministic.
    """
    z, squeeze = _to_torch_latent(z_t)
    out = _reverse_step_torch(model, z, int(t), s, gen, sigma_mode)
    return _from_torch_latent(out, squeeze)


def _reverse_sigma(s: NoiseSchedule, t: int, sigma_mode: str) -> float:
    if sigma_mode == "posterior":
        return math.sqrt(s.posterior_var(t))
    if sigma_mode == "beta":
        return math.sqrt(s.beta(t))
    raise ScheduleError(f"unknown sigma_mode {sigma_mode!r}")


def _reverse_step_torch(model, z: torch.Tensor, t: int, s: NoiseSchedule,
                        gen: torch.Generator | None, sigma_mode: str) -> torch.Tensor:
    _check_steps(t, s.T)
    with torch.no_grad():
        eps_hat = model(z, torch.full((z.shape[0],), t, dtype=torch.long))
        alpha = s.alpha(t)
        abar = s.alpha_bar(t)
        # a zero-beta step added no noise, so there is nothing to subtract
        coeff = 0.0 if (1.0 - alpha) == 0.0 else (1.0 - alpha) / math.sqrt(1.0 - abar)
        mean = (z - coeff * eps_hat) / math.sqrt(alpha)
        if t > 1:
            sigma = _reverse_sigma(s, t, sigma_mode)
            if sigma > 0.0:
                mean = mean + sigma * torch.randn(z.shape, generator=gen, dtype=z.dtype)
    return mean


def denoise(model, z_start: np.ndarray, t_start: int, s: NoiseSchedule,
            gen: torch.Generator | None = None, sigma_mode: str = "posterior",
            step_hook=None) -> np.ndarray:
    """Run the reverse chain from t_start down to 1 and return the result."""
    _check_steps(t_start, s.T)
    z, squeeze = _to_torch_latent(z_start)
    for t in range(int(t_start), 0, -1):
        z = _reverse_step_torch(model, z, t, s, gen, sigma_mode)
        if step_hook is not None:
            step_hook(t, _from_torch_latent(z, squeeze))
    return _from_torch_latent(z, squeeze)


# ---------------------------------------------------------------------------
# training


@dataclass
class FitResult:
    history: dict
    ema: ModuleEMA


def fit_denoiser(model: DenoiserUNet, sampler, s: NoiseSchedule, total_steps: int,
                 batch_size: int, lr: float, gen: torch.Generator,
                 ema_decay: float = 0.999, lr_min_frac: float = 0.01,
                 start_step: int = 0, run_until: int | None = None,
                 optimizer: torch.optim.Optimizer | None = None,
                 ema: ModuleEMA | None = None, history: dict | None = None,
                 log_every: int = 0) -> tuple[FitResult, torch.optim.Optimizer]:
    """Core noise-prediction training loop with cosine LR decay and EMA.

    ``sampler(n, gen)`` must return a fresh (n, c, h, w) batch of clean
    latents. ``total_steps`` fixes the LR schedule horizon; ``run_until``
    bounds this invocation, so a resumed run (same optimizer, EMA and
    step counter) continues the exact step sequence of an uninterrupted
    one.
    """
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    if ema is None:
        ema = ModuleEMA(model, ema_decay)
    history = {"step": [], "loss": [], "lr": []} if history is None else history
    run_until = total_steps if run_until is None else min(run_until, total_steps)
    t_begin = time.time()
    model.train()
    for step in range(start_step, run_until):
        frac = min(step / max(total_steps - 1, 1), 1.0)
        step_lr = lr * (lr_min_frac + 0.5 * (1 - lr_min_frac) * (1 + math.cos(math.pi * frac)))
        for group in optimizer.param_groups:
            group["lr"] = step_lr
        z0 = sampler(batch_size, gen)
        loss = diffusion_loss(model, z0, s, gen)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite de-noiser loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        ema.update(model)
        history["step"].append(step)
        history["loss"].append(float(loss.detach()))
        history["lr"].append(step_lr)
        if log_every and (step + 1) % log_every == 0:
            recent = history["loss"][-log_every:]
            print(f"[denoiser] step {step + 1}/{total_steps} "
                  f"loss={np.mean(recent):.4f} ({time.time() - t_begin:.0f}s)")
    model.eval()
    return FitResult(history=history, ema=ema), optimizer


@dataclass
class Stage2System:
    """A trained de-noiser bound to its schedule and its stage-1 model."""

    denoiser: DenoiserUNet
    schedule: NoiseSchedule
    config: ExperimentConfig
    config_hash: str
    stage1_fingerprint: str
    history: dict = field(default_factory=dict)
    path: str | None = None


def build_denoiser(cfg: ExperimentConfig, init_seed: int | None = None) -> DenoiserUNet:
    if init_seed is not None:
        torch.manual_seed(init_seed)
    dc = cfg.diffusion
    return DenoiserUNet(latent_channels=cfg.model.latent_channels, width=dc.unet_width,
                        levels=dc.unet_levels, time_dim=dc.time_embed_dim,
                        max_step=dc.T, groups=cfg.model.norm_groups)


def _unit_power(z: torch.Tensor) -> torch.Tensor:
    """Per-sample scaling to mean squared element value 1, matching the
    transmitter's power normalization of the latent."""
    k = z[0].numel()
    norms = z.flatten(1).norm(dim=1).clamp_min(1e-12)
    return z * (math.sqrt(k) / norms)[:, None, None, None]


def encoder_latent_sampler(stage1: Stage1System, images: np.ndarray,
                           latent_source: str = "sample"):
    """Sampler over the frozen encoder's latent distribution.

    Encodes the image pool once; each draw picks images with replacement,
    samples (or takes the mean of) their latent Gaussians, and scales
    every latent to unit power — the scale the receiver reconstructs.
    """
    from .autoencoder import _to_nchw

    encoder = stage1.encoder
    encoder.eval()
    with torch.no_grad():
        mus, sigmas = [], []
        for i in range(0, len(images), 256):
            mu, logvar = encoder(_to_nchw(images[i:i + 256]))
            mus.append(mu)
            sigmas.append(torch.exp(0.5 * logvar))
        mu_all = torch.cat(mus)
        sigma_all = torch.cat(sigmas)

    def sampler(n: int, gen: torch.Generator) -> torch.Tensor:
        idx = torch.randint(0, len(mu_all), (n,), generator=gen)
        z = mu_all[idx]
        if latent_source == "sample":
            z = z + sigma_all[idx] * torch.randn(z.shape, generator=gen)
        return _unit_power(z)

    return sampler


def train_stage2(stage1, train_images: np.ndarray, cfg: ExperimentConfig,
                 out_path=None, resume_from=None, epochs: int | None = None,
                 log_every: int = 0) -> Stage2System:
    """Train the de-noiser on the frozen encoder's latents.

    The stage-1 system may be given as a checkpoint path or a loaded
    Stage1System; its fingerprint is embedded in the resulting checkpoint
    and inference refuses to pair mismatched models.
    """
    if not isinstance(stage1, Stage1System):
        stage1 = load_stage1(stage1)
    if len(train_images) == 0:
        raise ValueError("empty training set")
    dc = cfg.diffusion
    # the config defines the experiment plan (and the LR horizon); the
    # epochs argument only bounds how far this invocation runs
    run_epochs = dc.epochs if epochs is None else epochs
    s = make_linear_schedule(dc.T, dc.beta_start, dc.beta_end)
    steps_per_epoch = max(1, math.ceil(len(train_images) / dc.batch_size))
    planned_steps = dc.epochs * steps_per_epoch
    run_until = run_epochs * steps_per_epoch

    model = build_denoiser(cfg, init_seed=derive_seed(cfg.train.master_seed,
                                                      "stage2", "init"))
    gen = torch_generator(cfg.train.master_seed, "stage2", "train-noise")
    sampler = encoder_latent_sampler(stage1, train_images, dc.latent_source)

    start_step = 0
    optimizer = None
    ema = None
    history = None
    if resume_from is not None:
        payload = load_checkpoint(resume_from, expect_kind="stage2")
        if payload["config_hash"] != cfg.config_hash():
            raise CheckpointError("resume config does not match the checkpoint's config")
        if payload["stage1_fingerprint"] != stage1.fingerprint:
            raise CheckpointError("checkpoint was trained against a different stage-1 model")
        model.load_state_dict(payload["models"]["denoiser"])
        optimizer = torch.optim.Adam(model.parameters(), lr=dc.lr)
        optimizer.load_state_dict(payload["optimizer"])
        ema = ModuleEMA(model, dc.ema_decay)
        ema.load_state(payload["models"]["denoiser_ema"])
        gen.set_state(payload["rng"]["train_noise"])
        start_step = payload["global_step"]
        planned_steps = payload["planned_steps"]
        history = {k: list(v) for k, v in payload["history"].items()}

    fit, optimizer = fit_denoiser(
        model, sampler, s, planned_steps, dc.batch_size, dc.lr, gen,
        ema_decay=dc.ema_decay, start_step=start_step, run_until=run_until,
        optimizer=optimizer, ema=ema, history=history, log_every=log_every)

    payload = {
        "format_version": FORMAT_VERSION,
        "kind": "stage2",
        "config_ini": cfg.to_ini(),
        "config_hash": cfg.config_hash(),
        "schedule": {"T": s.T, "beta_start": s.beta_start, "beta_end": s.beta_end,
                     "betas": np.asarray(s.betas)},
        "models": {"denoiser": model.state_dict(),
                   "denoiser_ema": fit.ema.state_dict_float()},
        "optimizer": optimizer.state_dict(),
        "epoch": max(start_step, min(run_until, planned_steps)) // steps_per_epoch,
        "global_step": max(start_step, min(run_until, planned_steps)),
        "planned_steps": planned_steps,
        "rng": {"train_noise": gen.get_state()},
        "stage1_fingerprint": stage1.fingerprint,
        "history": fit.history,
    }
    if out_path is not None:
        save_checkpoint(out_path, payload)

    inference_model = build_denoiser(cfg, init_seed=0)
    inference_model.load_state_dict(fit.ema.state_dict_float())
    inference_model.eval()
    return Stage2System(
        denoiser=inference_model, schedule=s, config=cfg,
        config_hash=cfg.config_hash(), stage1_fingerprint=stage1.fingerprint,
        history=fit.history, path=str(out_path) if out_path else None)


def load_stage2(path) -> Stage2System:
    """Rebuild a Stage2System (EMA weights, embedded schedule) from disk."""
    from .config import config_from_ini_text

    payload = load_checkpoint(path, expect_kind="stage2")
    cfg = config_from_ini_text(payload["config_ini"])
    sched_info = payload["schedule"]
    s = schedule_from_betas(sched_info["betas"], sched_info["beta_start"],
                            sched_info["beta_end"])
    model = build_denoiser(cfg, init_seed=0)
    model.load_state_dict(payload["models"]["denoiser_ema"])
    model.eval()
    return Stage2System(
        denoiser=model, schedule=s, config=cfg, config_hash=payload["config_hash"],
        stage1_fingerprint=payload["stage1_fingerprint"],
        history=payload.get("history", {}), path=str(path))
