"""Experiment configuration.

Dataclass sections mirror the config file layout: [model], [train],
[channel], [diffusion], [eval]. Values merge with precedence
CLI overrides > environment (LATENTCOMM_SECTION__KEY) > config file >
defaults. The canonical serialized form feeds the config hash that keys
checkpoints, sweep caches and reports.
"""

import configparser
import dataclasses
import hashlib
import io
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .channel import ChannelConfig

ENV_PREFIX = "LATENTCOMM_"


class ConfigError(ValueError):
    """Malformed configuration value or key."""


@dataclass
class ModelConfig:
    """Autoencoder + discriminator architecture."""

    image_size: int = 32
    m: int = 3                 # ResBlock+Downsample stages; latent is size/2^m
    stem_width: int = 32       # channels after the input convolution
    body_width: int = 64       # channels of the inner blocks
    latent_channels: int = 4
    norm_groups: int = 8
    disc_width: int = 32
    disc_layers: int = 3

    @property
    def compression_ratio(self) -> float:
        # latent elements / image elements = c / (3 * 4^m), independent of size
        return self.latent_channels / (3.0 * 4.0**self.m)


@dataclass
class TrainConfig:
    """Stage-1 (autoencoder) training."""

    epochs: int = 40
    batch_size: int = 32
    lr: float = 2e-4
    lambda_adv: float = 0.5
    lambda_reg: float = 1e-6
    adv_warmup_frac: float = 0.3   # fraction of planned steps with the adversarial term off
    patience: int = 5              # early stop after this many non-improving epochs
    master_seed: int = 1234
    data_dir: str = "data/toy"


@dataclass
class DiffusionConfig:
    """Stage-2 (de-noiser) model, schedule and training."""

    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    unet_width: int = 64
    unet_levels: int = 2
    time_embed_dim: int = 128
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 300
    ema_decay: float = 0.999
    sigma_mode: str = "posterior"   # reverse-step noise scale: "posterior" or "beta"
    latent_source: str = "sample"   # train on sampled latents or on the means ("mu")


@dataclass
class EvalConfig:
    """Sweep axes and output locations."""

    snr_list: tuple = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    step_counts: tuple = ()
    steps_snr_db: float = 10.0
    include_ablation: bool = True
    max_images: int = 0            # 0 = the whole test split
    workers: int = 1
    out_dir: str = "results"


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def sections(self) -> dict:
        return {
            "model": self.model,
            "train": self.train,
            "channel": self.channel,
            "diffusion": self.diffusion,
            "eval": self.eval,
        }

    def to_ini(self) -> str:
        """Canonical text form: sorted sections and keys, repr'd values."""
        out = io.StringIO()
        for name, section in sorted(self.sections().items()):
            out.write(f"[{name}]\n")
            for f in sorted(fields(section), key=lambda f: f.name):
                out.write(f"{f.name} = {_format_value(getattr(section, f.name))}\n")
            out.write("\n")
        return out.getvalue()

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ini())


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str, current):
    """Parse a string override against the type of the current value."""
    text = text.strip()
    if isinstance(current, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        if not text:
            return ()
        items = [s.strip() for s in text.split(",") if s.strip()]
        elem = current[0] if current else 0.0
        if isinstance(elem, int) and not isinstance(elem, bool):
            return tuple(int(s) for s in items)
        if isinstance(elem, float):
            return tuple(float(s) for s in items)
        return tuple(items)
    return text


def _apply(cfg: ExperimentConfig, section: str, key: str, raw: str) -> None:
    sections = cfg.sections()
    if section not in sections:
        raise ConfigError(f"unknown config section [{section}]")
    target = sections[section]
    # config files and env vars do not preserve case; field names do
    names = {f.name.lower(): f.name for f in fields(target)}
    if key.lower() not in names:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    name = names[key.lower()]
    try:
        value = _parse_value(raw, getattr(target, name))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from exc
    setattr(target, name, value)


def load_config(path: str | Path | None = None,
                overrides: dict[str, str] | None = None,
                env: dict[str, str] | None = None) -> ExperimentConfig:
    """Build a config from defaults, file, environment and CLI overrides.

    ``overrides`` maps "section.key" to raw string values (highest
    precedence). Environment variables use LATENTCOMM_SECTION__KEY.
    """
    cfg = ExperimentConfig()

    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(str(path))
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw)

    env = os.environ if env is None else env
    for var, raw in sorted(env.items()):
        if not var.startswith(ENV_PREFIX):
            continue
        rest = var[len(ENV_PREFIX):]
        if "__" not in rest:
            continue
        section, key = rest.split("__", 1)
        _apply(cfg, section.lower(), key.lower(), raw)

    for dotted, raw in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override must look like section.key, got {dotted!r}")
        section, key = dotted.split(".", 1)
        _apply(cfg, section.lower(), key.lower(), raw)

    # channel config validates itself on construction; re-run after mutation
    ChannelConfig(power=cfg.channel.power, snr_db=cfg.channel.snr_db,
                  seed=cfg.channel.seed, norm_mode=cfg.channel.norm_mode)
    return cfg


def config_from_ini_text(text: str) -> ExperimentConfig:
    """Rebuild a config from its canonical serialized form."""
    parser = configparser.ConfigParser()
    parser.read_string(text)
    cfg = ExperimentConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            _apply(cfg, section, key, raw)
    return cfg


def asdict_config(cfg: ExperimentConfig) -> dict:
    return {name: dataclasses.asdict(section) for name, section in cfg.sections().items()}
