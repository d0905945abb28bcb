import numpy as np
import pytest
import torch

from conftest import micro_config
from latentcomm.checkpoint import CheckpointError
from latentcomm.diffusion import (DenoiserUNet, build_denoiser, denoise,
                                  denoiser_predict, diffusion_loss,
                                  diffusion_loss_given, fit_denoiser,
                                  forward_diffuse, load_stage2, reverse_step,
                                  train_stage2)
from latentcomm.schedule import (NoiseSchedule, ScheduleError, make_linear_schedule,
                                 schedule_from_betas)


def handmade_schedule(betas, posterior_vars=None):
    """Direct construction for edge cases the linear builder rejects."""
    betas = np.asarray(betas, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if posterior_vars is None:
        posterior_vars = np.zeros_like(betas)
    return NoiseSchedule(T=len(betas), beta_start=float(betas[0]),
                         beta_end=float(betas[-1]), betas=betas, alphas=alphas,
                         alpha_bars=alpha_bars,
                         posterior_vars=np.asarray(posterior_vars, dtype=np.float64))


class ConstantModel:
    """Stub denoiser returning a fixed value."""

    def __init__(self, value):
        self.value = value

    def __call__(self, z, t):
        return torch.full_like(z, self.value)


class EchoModel:
    """Stub that reproduces the exact noise it is told about."""

    def __init__(self):
        self.eps = None

    def __call__(self, z, t):
        return self.eps


# ---------------------------------------------------------------------------
# forward process


def test_forward_diffuse_identity_at_alpha_bar_one():
    s = handmade_schedule([0.0])
    z0 = np.random.default_rng(0).normal(size=(4, 4, 2))
    out = forward_diffuse(z0, 1, np.ones_like(z0), s)
    np.testing.assert_allclose(out, z0, atol=1e-15)


def test_forward_diffuse_hand_value():
    s = handmade_schedule([0.25])   # alpha_bar = 0.75
    z0 = np.zeros((2, 2))
    eps = np.ones((2, 2))
    out = forward_diffuse(z0, 1, eps, s)
    np.testing.assert_allclose(out, 0.5, atol=1e-15)


def test_forward_diffuse_preserves_unit_variance():
    s = make_linear_schedule(200)
    rng = np.random.default_rng(1)
    z0 = rng.normal(size=100_000)
    eps = rng.normal(size=100_000)
    out = forward_diffuse(z0, 100, eps, s)
    assert abs(out.var() - 1.0) < 0.02


@pytest.mark.parametrize("t", [1, 5, 20])
def test_iterated_kernel_matches_closed_form(t):
    # compose the one-step kernels and compare against the marginal
    s = make_linear_schedule(200)
    rng = np.random.default_rng(t)
    trials = 100_000
    z0 = 1.0
    z = np.full(trials, z0)
    for step in range(1, t + 1):
        beta = s.beta(step)
        z = np.sqrt(1.0 - beta) * z + np.sqrt(beta) * rng.normal(size=trials)
    expected_mean = np.sqrt(s.alpha_bar(t)) * z0
    expected_var = 1.0 - s.alpha_bar(t)
    assert abs(z.mean() - expected_mean) < 0.03 * abs(expected_mean)
    assert abs(z.var() - expected_var) < 0.03 * expected_var


def test_forward_diffuse_vector_steps_match_scalar_calls():
    s = make_linear_schedule(50)
    gen = torch.Generator().manual_seed(2)
    z0 = torch.randn(3, 2, 2, 2, generator=gen)
    eps = torch.randn(3, 2, 2, 2, generator=gen)
    t = torch.tensor([1, 25, 50])
    batched = forward_diffuse(z0, t, eps, s)
    for i, ti in enumerate(t.tolist()):
        single = forward_diffuse(z0[i].numpy(), ti, eps[i].numpy(), s)
        # torch path stays in float32; the numpy route promotes to float64
        np.testing.assert_allclose(batched[i].numpy(), single, rtol=1e-5, atol=1e-6)


def test_forward_diffuse_rejects_bad_steps():
    s = make_linear_schedule(10)
    z = np.zeros((2, 2))
    for t in (0, 11):
        with pytest.raises(ScheduleError):
            forward_diffuse(z, t, z, s)


# ---------------------------------------------------------------------------
# denoiser model


@pytest.fixture(scope="module")
def tiny_unet():
    cfg = micro_config()
    return build_denoiser(cfg, init_seed=3), cfg


def test_denoiser_predict_deterministic_and_shaped(tiny_unet):
    model, cfg = tiny_unet
    z = np.random.default_rng(4).normal(size=(4, 4, 4)).astype(np.float32)
    for t in (1, cfg.diffusion.T // 2, cfg.diffusion.T):
        out = denoiser_predict(model, z, t)
        assert out.shape == z.shape
        np.testing.assert_array_equal(out, denoiser_predict(model, z, t))


def test_denoiser_predict_validates_inputs(tiny_unet):
    model, cfg = tiny_unet
    z = np.zeros((4, 4, 4), dtype=np.float32)
    with pytest.raises(ScheduleError):
        denoiser_predict(model, z, 0)
    with pytest.raises(ScheduleError):
        denoiser_predict(model, z, cfg.diffusion.T + 1)
    from latentcomm.autoencoder import ShapeError
    with pytest.raises(ShapeError):
        denoiser_predict(model, np.zeros((4, 4, 5), dtype=np.float32), 1)


def test_zero_initialized_output_head(tiny_unet):
    model, _ = tiny_unet
    fresh = DenoiserUNet(latent_channels=4, width=16, levels=2, time_dim=32,
                         max_step=50)
    z = np.random.default_rng(5).normal(size=(2, 2, 4)).astype(np.float32)
    assert np.abs(denoiser_predict(fresh, z, 10)).max() == 0.0


# ---------------------------------------------------------------------------
# loss


def test_loss_zero_when_prediction_echoes_noise():
    s = make_linear_schedule(50)
    model = EchoModel()
    gen = torch.Generator().manual_seed(6)
    z0 = torch.randn(8, 4, 2, 2, generator=gen)
    eps = torch.randn(8, 4, 2, 2, generator=gen)
    model.eps = eps
    t = torch.randint(1, 51, (8,), generator=gen)
    assert float(diffusion_loss_given(model, z0, t, eps, s)) == 0.0


def test_loss_for_zero_predictor_equals_dimension():
    # E||eps||^2 is chi-square with k degrees of freedom, mean k
    s = make_linear_schedule(50)
    model = ConstantModel(0.0)
    gen = torch.Generator().manual_seed(7)
    k = 16
    z0 = torch.randn(4096, 4, 2, 2, generator=gen)
    loss = float(diffusion_loss(model, z0, s, gen))
    assert abs(loss - k) < 0.05 * k


def test_loss_reproducible_for_fixed_seed(tiny_unet):
    model, cfg = tiny_unet
    s = make_linear_schedule(cfg.diffusion.T)
    z0 = torch.randn(4, 4, 2, 2, generator=torch.Generator().manual_seed(8))
    a = float(diffusion_loss(model, z0, s, torch.Generator().manual_seed(9)).detach())
    b = float(diffusion_loss(model, z0, s, torch.Generator().manual_seed(9)).detach())
    assert a == b


def test_loss_invariant_under_batch_permutation(tiny_unet):
    model, cfg = tiny_unet
    s = make_linear_schedule(cfg.diffusion.T)
    gen = torch.Generator().manual_seed(10)
    z0 = torch.randn(6, 4, 2, 2, generator=gen)
    eps = torch.randn(6, 4, 2, 2, generator=gen)
    t = torch.randint(1, 51, (6,), generator=gen)
    perm = torch.randperm(6, generator=gen)
    a = float(diffusion_loss_given(model, z0, t, eps, s).detach())
    b = float(diffusion_loss_given(model, z0[perm], t[perm], eps[perm], s).detach())
    assert a == pytest.approx(b, rel=1e-6)


# ---------------------------------------------------------------------------
# reverse process


def test_reverse_step_identity_limit():
    s = handmade_schedule([0.0])
    model = ConstantModel(0.0)
    z = np.random.default_rng(11).normal(size=(2, 2, 2)).astype(np.float32)
    out = reverse_step(model, z, 1, s)
    np.testing.assert_allclose(out, z, atol=1e-7)


def test_reverse_step_hand_computed_value():
    # alpha_2 = 0.99, abar_2 = 0.9; posterior variance zeroed so the
    # injected noise vanishes and the mean update is exposed
    beta1 = 1.0 - 0.9 / 0.99
    s = handmade_schedule([beta1, 0.01])
    assert s.alpha(2) == pytest.approx(0.99, abs=1e-12)
    assert s.alpha_bar(2) == pytest.approx(0.9, abs=1e-12)
    model = ConstantModel(0.3164)
    out = reverse_step(model, np.ones((1, 1, 1), dtype=np.float32), 2, s,
                       torch.Generator().manual_seed(0))
    # (1 - (0.01 / sqrt(0.1)) * 0.3164) / sqrt(0.99), evaluated independently
    expected = (1.0 - (0.01 / np.sqrt(0.1)) * 0.3164) / np.sqrt(0.99)
    assert expected == pytest.approx(0.99498, abs=1e-4)
    assert float(out[0, 0, 0]) == pytest.approx(expected, abs=1e-6)


def test_final_step_is_deterministic():
    s = make_linear_schedule(50)
    model = ConstantModel(0.1)
    z = np.random.default_rng(12).normal(size=(2, 2, 4)).astype(np.float32)
    a = reverse_step(model, z, 1, s, torch.Generator().manual_seed(1))
    b = reverse_step(model, z, 1, s, torch.Generator().manual_seed(999))
    np.testing.assert_array_equal(a, b)


def test_intermediate_steps_inject_seeded_noise():
    s = make_linear_schedule(50)
    model = ConstantModel(0.1)
    z = np.random.default_rng(13).normal(size=(2, 2, 4)).astype(np.float32)
    a = reverse_step(model, z, 10, s, torch.Generator().manual_seed(2))
    b = reverse_step(model, z, 10, s, torch.Generator().manual_seed(2))
    c = reverse_step(model, z, 10, s, torch.Generator().manual_seed(3))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_reverse_step_sigma_modes():
    s = make_linear_schedule(50)
    assert str(s)  # frozen dataclass reprs fine
    from latentcomm.diffusion import _reverse_sigma
    assert _reverse_sigma(s, 10, "posterior") == pytest.approx(
        np.sqrt(s.posterior_var(10)))
    assert _reverse_sigma(s, 10, "beta") == pytest.approx(np.sqrt(s.beta(10)))
    with pytest.raises(ScheduleError):
        _reverse_sigma(s, 10, "bogus")


def test_denoise_step_count_and_bounds(tiny_unet):
    model, cfg = tiny_unet
    s = make_linear_schedule(cfg.diffusion.T)
    z = np.random.default_rng(14).normal(size=(2, 2, 4)).astype(np.float32)
    seen = []
    denoise(model, z, 1, s, torch.Generator().manual_seed(4),
            step_hook=lambda t, _: seen.append(t))
    assert seen == [1]
    seen.clear()
    denoise(model, z, 7, s, torch.Generator().manual_seed(4),
            step_hook=lambda t, _: seen.append(t))
    assert seen == list(range(7, 0, -1))
    with pytest.raises(ScheduleError):
        denoise(model, z, 0, s, torch.Generator().manual_seed(4))
    with pytest.raises(ScheduleError):
        denoise(model, z, cfg.diffusion.T + 1, s, torch.Generator().manual_seed(4))


def test_denoise_reproducible_under_fixed_seed(tiny_unet):
    model, cfg = tiny_unet
    s = make_linear_schedule(cfg.diffusion.T)
    z = np.random.default_rng(15).normal(size=(2, 2, 4)).astype(np.float32)
    a = denoise(model, z, 20, s, torch.Generator().manual_seed(5))
    b = denoise(model, z, 20, s, torch.Generator().manual_seed(5))
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# training


def test_fit_denoiser_reduces_loss():
    cfg = micro_config()
    model = build_denoiser(cfg, init_seed=16)
    s = make_linear_schedule(cfg.diffusion.T)

    def sampler(n, gen):
        return torch.randn(n, 4, 2, 2, generator=gen)

    fit, _ = fit_denoiser(model, sampler, s, total_steps=150, batch_size=64,
                          lr=2e-3, gen=torch.Generator().manual_seed(17))
    head = np.mean(fit.history["loss"][:10])
    tail = np.mean(fit.history["loss"][-10:])
    assert tail < head


def test_train_stage2_runs_and_embeds_schedule(micro_systems, tmp_path):
    stage2 = micro_systems["stage2"]
    cfg = micro_systems["cfg"]
    loaded = load_stage2(micro_systems["dir"] / "stage2.pt")
    s = loaded.schedule
    expected = make_linear_schedule(cfg.diffusion.T, cfg.diffusion.beta_start,
                                    cfg.diffusion.beta_end)
    assert s.T == expected.T
    np.testing.assert_array_equal(s.betas, expected.betas)
    np.testing.assert_array_equal(s.alpha_bars, expected.alpha_bars)
    np.testing.assert_array_equal(s.posterior_vars, expected.posterior_vars)
    assert loaded.stage1_fingerprint == stage2.stage1_fingerprint
    z = np.random.default_rng(18).normal(size=(4, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(denoiser_predict(loaded.denoiser, z, 5),
                                  denoiser_predict(stage2.denoiser, z, 5))


def test_train_stage2_progress(micro_systems):
    history = micro_systems["stage2"].history
    steps_per_epoch = len(history["loss"]) // micro_systems["cfg"].diffusion.epochs
    epoch1 = np.mean(history["loss"][:steps_per_epoch])
    assert history["loss"][-1] < epoch1


def test_train_stage2_resume_is_bit_exact(micro_systems, tmp_path):
    cfg = micro_systems["cfg"]
    stage1 = micro_systems["stage1"]
    _, train_images = micro_systems["dataset"].subset("train")

    full = train_stage2(stage1, train_images, cfg)
    half_path = tmp_path / "half2.pt"
    train_stage2(stage1, train_images, cfg, out_path=half_path, epochs=5)
    resumed = train_stage2(stage1, train_images, cfg, resume_from=half_path)
    assert resumed.history["loss"] == full.history["loss"]


def test_train_stage2_rejects_mismatched_stage1(micro_systems, tmp_path):
    import dataclasses
    cfg = micro_systems["cfg"]
    stage1 = micro_systems["stage1"]
    _, train_images = micro_systems["dataset"].subset("train")
    path = tmp_path / "s2.pt"
    train_stage2(stage1, train_images, cfg, out_path=path, epochs=1)
    tampered = dataclasses.replace(stage1, fingerprint="0" * 64)
    with pytest.raises(CheckpointError):
        train_stage2(tampered, train_images, cfg, resume_from=path, epochs=2)


def test_stage2_training_latents_have_unit_power(micro_systems):
    from latentcomm.diffusion import encoder_latent_sampler
    stage1 = micro_systems["stage1"]
    _, train_images = micro_systems["dataset"].subset("train")
    sampler = encoder_latent_sampler(stage1, train_images)
    z = sampler(16, torch.Generator().manual_seed(19))
    powers = z.flatten(1).square().mean(dim=1)
    assert torch.allclose(powers, torch.ones(16), atol=1e-5)
