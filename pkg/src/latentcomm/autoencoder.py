"""Stage-1 model and training.

A convolutional encoder maps images to the mean and standard deviation
of a small latent Gaussian; the mirrored decoder reconstructs images
from latent samples. Training combines pixel reconstruction, a tiny KL
regularizer toward N(0, 1) and a patch-discriminator adversarial term,
with the generator and discriminator updated alternately.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import (CheckpointError, FORMAT_VERSION, fingerprint_state_dicts,
                         load_checkpoint, save_checkpoint)
from .config import ExperimentConfig
from .data import DataError
from .seeding import derive_seed, numpy_rng, torch_generator


class ShapeError(ValueError):
    """Tensor shape incompatible with the configured architecture."""


class DomainError(ValueError):
    """Value outside the mathematical domain of a loss term."""


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite during training."""


# ---------------------------------------------------------------------------
# building blocks


def _group_norm(channels: int, groups: int) -> nn.GroupNorm:
    if channels % groups != 0:
        raise ShapeError(f"width {channels} not divisible by {groups} norm groups")
    return nn.GroupNorm(groups, channels, eps=1e-6)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, groups: int):
        super().__init__()
        self.norm1 = _group_norm(in_ch, groups)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = _group_norm(out_ch, groups)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttnBlock(nn.Module):
    """Single-head self-attention over all spatial positions."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm = _group_norm(channels, groups)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(n, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class EncoderNet(nn.Module):
    """Image -> (mu, logvar) with spatial size divided by 2^m."""

    def __init__(self, m: int, stem_width: int, body_width: int,
                 latent_channels: int, groups: int):
        super().__init__()
        self.m = m
        self.latent_channels = latent_channels
        self.stem = nn.Conv2d(3, stem_width, 3, padding=1)
        stages = []
        ch = stem_width
        for _ in range(m):
            stages += [ResBlock(ch, body_width, groups), Downsample(body_width)]
            ch = body_width
        self.stages = nn.Sequential(*stages)
        self.mid = nn.Sequential(
            ResBlock(body_width, body_width, groups),
            AttnBlock(body_width, groups),
            ResBlock(body_width, body_width, groups),
        )
        self.head_norm = _group_norm(body_width, groups)
        self.head = nn.Conv2d(body_width, 2 * latent_channels, 3, padding=1)

    def forward(self, x):
        if x.shape[-1] % 2**self.m or x.shape[-2] % 2**self.m:
            raise ShapeError(
                f"image size {tuple(x.shape[-2:])} not divisible by 2^{self.m}")
        h = self.mid(self.stages(self.stem(x)))
        h = self.head(F.silu(self.head_norm(h)))
        mu, logvar = h.chunk(2, dim=1)
        return mu, logvar.clamp(-30.0, 20.0)


class DecoderNet(nn.Module):
    """Latent -> image in [-1, 1], mirror of the encoder."""

    def __init__(self, m: int, stem_width: int, body_width: int,
                 latent_channels: int, groups: int):
        super().__init__()
        self.latent_channels = latent_channels
        self.stem = nn.Conv2d(latent_channels, body_width, 3, padding=1)
        self.mid = nn.Sequential(
            ResBlock(body_width, body_width, groups),
            AttnBlock(body_width, groups),
            ResBlock(body_width, body_width, groups),
        )
        stages = []
        for i in range(m):
            out_ch = stem_width if i == m - 1 else body_width
            stages += [ResBlock(body_width, out_ch, groups), Upsample(out_ch)]
        self.stages = nn.Sequential(*stages)
        self.head_norm = _group_norm(stem_width, groups)
        self.head = nn.Conv2d(stem_width, 3, 3, padding=1)

    def forward(self, z):
        if z.shape[1] != self.latent_channels:
            raise ShapeError(
                f"latent has {z.shape[1]} channels, decoder expects {self.latent_channels}")
        h = self.stages(self.mid(self.stem(z)))
        return torch.tanh(self.head(F.silu(self.head_norm(h))))


class PatchDiscriminator(nn.Module):
    """Convolutional classifier emitting one realness logit per patch."""

    def __init__(self, width: int = 32, layers: int = 3, groups: int = 8):
        super().__init__()
        blocks = [nn.Conv2d(3, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        ch = width
        for _ in range(layers - 1):
            blocks += [nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1),
                       _group_norm(ch * 2, groups), nn.LeakyReLU(0.2)]
            ch *= 2
        blocks.append(nn.Conv2d(ch, 1, 3, padding=1))
        self.net = nn.Sequential(*blocks)

    def forward(self, x):
        return self.net(x)


# ---------------------------------------------------------------------------
# functional surface (numpy in, numpy out, NHWC images / HWC latents)


@dataclass(frozen=True)
class LatentParams:
    """Mean and standard deviation of the encoder's latent Gaussian."""

    mu: np.ndarray
    sigma: np.ndarray


def _to_nchw(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x)).float().permute(0, 3, 1, 2)


def _to_nhwc(x: torch.Tensor) -> np.ndarray:
    return x.permute(0, 2, 3, 1).contiguous().numpy()


def _lift(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise ShapeError(f"expected rank {rank - 1} or {rank} array, got shape {x.shape}")
    return x, False


def encode(encoder: EncoderNet, x: np.ndarray) -> LatentParams:
    """Deterministic image -> latent-Gaussian parameters."""
    x, squeeze = _lift(x, 4)
    encoder.eval()
    with torch.no_grad():
        mu, logvar = encoder(_to_nchw(x))
        sigma = torch.exp(0.5 * logvar)
    mu_np, sigma_np = _to_nhwc(mu), _to_nhwc(sigma)
    if squeeze:
        mu_np, sigma_np = mu_np[0], sigma_np[0]
    return LatentParams(mu=mu_np, sigma=sigma_np)


def sample_latent(params: LatentParams, gen: torch.Generator) -> np.ndarray:
    """Reparameterized draw mu + sigma * eps, eps ~ N(0, I).

    (Training uses the same reparameterization inline on the torch graph,
    where it is differentiable in mu and sigma.)
    """
    eps = torch.randn(params.mu.shape, generator=gen, dtype=torch.float32).numpy()
    return params.mu + params.sigma * eps


def decode(decoder: DecoderNet, z: np.ndarray) -> np.ndarray:
    """Latent -> image batch in [-1, 1]."""
    z, squeeze = _lift(z, 4)
    decoder.eval()
    with torch.no_grad():
        x = decoder(_to_nchw(z))
    out = _to_nhwc(x)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# losses


@dataclass
class Stage1Losses:
    """Terms of the composite stage-1 objective (torch scalars)."""

    recon: torch.Tensor
    adv_disc: torch.Tensor   # log D(x) + log(1 - D(x_rec)); the discriminator maximizes this
    adv_gen: torch.Tensor    # -log D(x_rec); the generator minimizes this
    reg: torch.Tensor
    total: torch.Tensor


def kl_divergence(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Mean per-element KL(N(mu, sigma) || N(0, 1))."""
    if bool((sigma <= 0).any()):
        raise DomainError("sigma must be strictly positive")
    return torch.mean(0.5 * (mu**2 + sigma**2 - torch.log(sigma**2) - 1.0))


def stage1_losses(x: torch.Tensor, x_recon: torch.Tensor, mu: torch.Tensor,
                  sigma: torch.Tensor, d_real: torch.Tensor, d_fake: torch.Tensor,
                  lambda_adv: float, lambda_reg: float) -> Stage1Losses:
    """Composite stage-1 objective.

    recon is the mean squared pixel error; reg the closed-form KL to the
    unit Gaussian; adv_disc the two-term discriminator objective and
    adv_gen the non-saturating generator term entering the total.
    """
    if x.shape != x_recon.shape:
        raise ShapeError(f"image shapes differ: {tuple(x.shape)} vs {tuple(x_recon.shape)}")
    recon = torch.mean((x_recon - x) ** 2)
    reg = kl_divergence(mu, sigma)
    adv_disc = F.logsigmoid(d_real).mean() + F.logsigmoid(-d_fake).mean()
    adv_gen = -F.logsigmoid(d_fake).mean()
    total = recon + lambda_adv * adv_gen + lambda_reg * reg
    return Stage1Losses(recon=recon, adv_disc=adv_disc, adv_gen=adv_gen,
                        reg=reg, total=total)


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Negative of the adv_disc objective, suitable for gradient descent."""
    return -(F.logsigmoid(d_real).mean() + F.logsigmoid(-d_fake).mean())


# ---------------------------------------------------------------------------
# training


@dataclass
class Stage1System:
    """A trained (or loading of a trained) stage-1 model set."""

    encoder: EncoderNet
    decoder: DecoderNet
    discriminator: PatchDiscriminator
    config: ExperimentConfig
    config_hash: str
    fingerprint: str
    history: dict = field(default_factory=dict)
    path: str | None = None


def build_stage1_models(cfg: ExperimentConfig, init_seed: int | None = None):
    """Construct the three stage-1 modules with deterministic init."""
    if init_seed is not None:
        torch.manual_seed(init_seed)
    mc = cfg.model
    encoder = EncoderNet(mc.m, mc.stem_width, mc.body_width, mc.latent_channels,
                         mc.norm_groups)
    decoder = DecoderNet(mc.m, mc.stem_width, mc.body_width, mc.latent_channels,
                         mc.norm_groups)
    disc = PatchDiscriminator(mc.disc_width, mc.disc_layers, mc.norm_groups)
    return encoder, decoder, disc


def _validation_recon(encoder, decoder, images: np.ndarray, batch_size: int) -> float:
    encoder.eval()
    decoder.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = _to_nchw(images[i:i + batch_size])
            mu, _ = encoder(x)
            err = torch.mean((decoder(mu) - x) ** 2)
            total += float(err) * len(x)
            count += len(x)
    return total / max(count, 1)


def _stage1_payload(cfg, encoder, decoder, disc, opt_g, opt_d, g_train, epoch,
                    global_step, planned_steps, early, history) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "stage1",
        "config_ini": cfg.to_ini(),
        "config_hash": cfg.config_hash(),
        "schedule": None,
        "models": {
            "encoder": encoder.state_dict(),
            "decoder": decoder.state_dict(),
            "discriminator": disc.state_dict(),
        },
        "optimizers": {"gen": opt_g.state_dict(), "disc": opt_d.state_dict()},
        "epoch": epoch,
        "global_step": global_step,
        "planned_steps": planned_steps,
        "rng": {"train_noise": g_train.get_state()},
        "early_stop": early,
        "history": history,
    }


def train_stage1(train_images: np.ndarray, val_images: np.ndarray,
                 cfg: ExperimentConfig, out_path=None, resume_from=None,
                 epochs: int | None = None, log_every: int = 0) -> Stage1System:
    """Alternating generator/discriminator training over the image set.

    Runs until the epoch budget or until validation reconstruction stops
    improving for ``patience`` epochs. Per-epoch shuffles and all noise
    draws derive from the master seed, and the full optimizer and RNG
    state lands in the checkpoint, so a resumed run continues the exact
    step sequence of an uninterrupted one.
    """
    if len(train_images) == 0:
        raise DataError("empty training set")
    tc = cfg.train
    # the config defines the experiment plan (and the warm-up horizon);
    # the epochs argument only bounds how far this invocation runs
    run_until = tc.epochs if epochs is None else epochs
    batch = tc.batch_size
    steps_per_epoch = math.ceil(len(train_images) / batch)

    encoder, decoder, disc = build_stage1_models(
        cfg, init_seed=derive_seed(tc.master_seed, "stage1", "init"))
    opt_g = torch.optim.Adam(list(encoder.parameters()) + list(decoder.parameters()),
                             lr=tc.lr, betas=(0.5, 0.9))
    opt_d = torch.optim.Adam(disc.parameters(), lr=tc.lr, betas=(0.5, 0.9))
    g_train = torch_generator(tc.master_seed, "stage1", "train-noise")

    start_epoch = 0
    global_step = 0
    planned_steps = tc.epochs * steps_per_epoch
    early = {"best_val": float("inf"), "bad_epochs": 0, "stopped": False}
    history = {"step": [], "recon": [], "adv_gen": [], "adv_disc": [], "reg": [],
               "total": [], "val_recon": []}

    if resume_from is not None:
        payload = load_checkpoint(resume_from, expect_kind="stage1")
        if payload["config_hash"] != cfg.config_hash():
            raise CheckpointError("resume config does not match the checkpoint's config")
        encoder.load_state_dict(payload["models"]["encoder"])
        decoder.load_state_dict(payload["models"]["decoder"])
        disc.load_state_dict(payload["models"]["discriminator"])
        opt_g.load_state_dict(payload["optimizers"]["gen"])
        opt_d.load_state_dict(payload["optimizers"]["disc"])
        g_train.set_state(payload["rng"]["train_noise"])
        start_epoch = payload["epoch"]
        global_step = payload["global_step"]
        planned_steps = payload["planned_steps"]
        early = dict(payload["early_stop"])
        history = {k: list(v) for k, v in payload["history"].items()}

    warmup_steps = int(round(tc.adv_warmup_frac * planned_steps))
    epochs_completed = start_epoch
    t_begin = time.time()
    for epoch in range(start_epoch, run_until):
        if early["stopped"]:
            break
        perm = numpy_rng(tc.master_seed, "stage1", "shuffle", epoch).permutation(
            len(train_images))
        encoder.train(); decoder.train(); disc.train()
        for i in range(steps_per_epoch):
            idx = perm[i * batch:(i + 1) * batch]
            x = _to_nchw(train_images[idx])
            adv_on = global_step >= warmup_steps
            lam_adv = tc.lambda_adv if adv_on else 0.0

            mu, logvar = encoder(x)
            sigma = torch.exp(0.5 * logvar)
            eps = torch.randn(mu.shape, generator=g_train)
            z = mu + sigma * eps
            x_recon = decoder(z)
            with torch.no_grad():
                d_real_report = disc(x)
            d_fake = disc(x_recon)
            losses = stage1_losses(x, x_recon, mu, sigma, d_real_report, d_fake,
                                   lam_adv, tc.lambda_reg)
            if not torch.isfinite(losses.total):
                raise TrainingDivergedError(
                    f"non-finite stage-1 loss at step {global_step}: "
                    f"recon={float(losses.recon)} adv={float(losses.adv_gen)} "
                    f"reg={float(losses.reg)}")
            opt_g.zero_grad()
            losses.total.backward()
            opt_g.step()

            if adv_on:
                d_real = disc(x)
                d_fake_d = disc(x_recon.detach())
                d_loss = discriminator_loss(d_real, d_fake_d)
                if not torch.isfinite(d_loss):
                    raise TrainingDivergedError(
                        f"non-finite discriminator loss at step {global_step}")
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()

            history["step"].append(global_step)
            for key, value in (("recon", losses.recon), ("adv_gen", losses.adv_gen),
                               ("adv_disc", losses.adv_disc), ("reg", losses.reg),
                               ("total", losses.total)):
                history[key].append(float(value.detach()))
            global_step += 1

        epochs_completed = epoch + 1
        val = _validation_recon(encoder, decoder, val_images, batch) \
            if len(val_images) else float("nan")
        history["val_recon"].append(val)
        if log_every and ((epoch + 1) % log_every == 0 or epoch + 1 == run_until):
            recent = history["recon"][-steps_per_epoch:]
            print(f"[stage1] epoch {epoch + 1}/{run_until} "
                  f"recon={np.mean(recent):.5f} val={val:.5f} "
                  f"({time.time() - t_begin:.0f}s)")
        if len(val_images):
            if val < early["best_val"] - 1e-7:
                early["best_val"] = val
                early["bad_epochs"] = 0
            else:
                early["bad_epochs"] += 1
                if early["bad_epochs"] >= tc.patience:
                    early["stopped"] = True

    payload = _stage1_payload(cfg, encoder, decoder, disc, opt_g, opt_d, g_train,
                              epochs_completed, global_step, planned_steps, early,
                              history)
    if out_path is not None:
        save_checkpoint(out_path, payload)
    encoder.eval(); decoder.eval(); disc.eval()
    return Stage1System(
        encoder=encoder, decoder=decoder, discriminator=disc, config=cfg,
        config_hash=cfg.config_hash(),
        fingerprint=fingerprint_state_dicts(payload["models"], cfg.config_hash()),
        history=history, path=str(out_path) if out_path else None)


def load_stage1(path) -> Stage1System:
    """Rebuild a Stage1System from a checkpoint file."""
    from .config import config_from_ini_text

    payload = load_checkpoint(path, expect_kind="stage1")
    cfg = config_from_ini_text(payload["config_ini"])
    encoder, decoder, disc = build_stage1_models(cfg, init_seed=0)
    encoder.load_state_dict(payload["models"]["encoder"])
    decoder.load_state_dict(payload["models"]["decoder"])
    disc.load_state_dict(payload["models"]["discriminator"])
    encoder.eval(); decoder.eval(); disc.eval()
    return Stage1System(
        encoder=encoder, decoder=decoder, discriminator=disc, config=cfg,
        config_hash=payload["config_hash"],
        fingerprint=fingerprint_state_dicts(payload["models"], payload["config_hash"]),
        history=payload.get("history", {}), path=str(path))
