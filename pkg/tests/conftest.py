import numpy as np
import pytest
import torch

from latentcomm.config import ExperimentConfig
from latentcomm.data import ingest_dataset, synthesize_images

torch.set_num_threads(2)


def micro_config() -> ExperimentConfig:
    """Smallest config that still exercises every architectural piece."""
    cfg = ExperimentConfig()
    cfg.model.image_size = 16
    cfg.model.m = 2
    cfg.model.stem_width = 16
    cfg.model.body_width = 16
    cfg.model.latent_channels = 4
    cfg.model.norm_groups = 8
    cfg.model.disc_width = 8
    cfg.model.disc_layers = 2
    cfg.train.epochs = 2
    cfg.train.batch_size = 8
    cfg.train.lr = 1e-3
    cfg.train.master_seed = 99
    cfg.diffusion.T = 50
    cfg.diffusion.unet_width = 16
    cfg.diffusion.unet_levels = 2
    cfg.diffusion.time_embed_dim = 32
    cfg.diffusion.batch_size = 16
    cfg.diffusion.epochs = 10
    cfg.diffusion.lr = 2e-3
    return cfg


@pytest.fixture(scope="session")
def toy_image_dir(tmp_path_factory):
    directory = tmp_path_factory.mktemp("toyimgs")
    synthesize_images(directory, 40, size=16, seed=7)
    return directory


@pytest.fixture(scope="session")
def micro_dataset(toy_image_dir):
    return ingest_dataset(toy_image_dir, (16, 16))


@pytest.fixture(scope="session")
def micro_systems(tmp_path_factory, micro_dataset):
    """A tiny trained stage-1 + stage-2 pair shared across test modules."""
    from latentcomm.autoencoder import train_stage1
    from latentcomm.diffusion import train_stage2

    out = tmp_path_factory.mktemp("micro_ckpt")
    cfg = micro_config()
    _, train_images = micro_dataset.subset("train")
    _, val_images = micro_dataset.subset("val")
    stage1 = train_stage1(train_images, val_images, cfg,
                          out_path=out / "stage1.pt")
    stage2 = train_stage2(stage1, train_images, cfg, out_path=out / "stage2.pt")
    return {"cfg": cfg, "stage1": stage1, "stage2": stage2,
            "dataset": micro_dataset, "dir": out}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
