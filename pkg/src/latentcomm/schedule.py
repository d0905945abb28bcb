"""Diffusion variance schedule and the quantities derived from it.

The forward noising process is parameterized by per-step variances
beta_1..beta_T. Everything downstream (forward marginals, reverse
posterior variances, the SNR-to-step matching used at the receiver) is a
pure function of that table, so it is computed once and frozen.
"""

from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    """Invalid schedule parameters."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance tables for a T-step forward noising chain.

    Arrays are float64 of length T with index 0 holding step t=1.
    ``alpha_bars[t-1]`` is the cumulative product of ``alphas`` up to t;
    ``posterior_vars`` holds the reverse-posterior variances
    (1-abar_{t-1})/(1-abar_t) * beta_t, with the t=1 entry set to beta_1.
    Instances are immutable and safe to share across workers.
    """

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"step {t} outside [1, {self.T}]")

    def beta(self, t: int) -> float:
        self._check_step(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_step(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check_step(t)
        return float(self.alpha_bars[t - 1])

    def posterior_var(self, t: int) -> float:
        self._check_step(t)
        return float(self.posterior_vars[t - 1])

    def marginal_snr(self, t: int) -> float:
        """Signal-to-noise ratio abar_t / (1 - abar_t) of the step-t marginal."""
        ab = self.alpha_bar(t)
        return ab / (1.0 - ab)


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def schedule_from_betas(betas: np.ndarray, beta_start: float | None = None,
                        beta_end: float | None = None) -> NoiseSchedule:
    """Build the derived tables from an explicit beta table.

    Used when deserializing a checkpoint: the stored betas are the source
    of truth and the derived tables are recomputed deterministically from
    them, never from re-running the constructor with config endpoints.
    """
    betas = np.asarray(betas, dtype=np.float64).copy()
    if betas.ndim != 1 or betas.size < 1:
        raise ScheduleError("beta table must be a non-empty 1-D array")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    posterior_vars = np.empty_like(betas)
    posterior_vars[0] = betas[0]
    if betas.size > 1:
        posterior_vars[1:] = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:]
    return NoiseSchedule(
        T=int(betas.size),
        beta_start=float(betas[0] if beta_start is None else beta_start),
        beta_end=float(betas[-1] if beta_end is None else beta_end),
        betas=_freeze(betas),
        alphas=_freeze(alphas),
        alpha_bars=_freeze(alpha_bars),
        posterior_vars=_freeze(posterior_vars),
    )


def make_linear_schedule(T: int, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced beta_1..beta_T from beta_start to beta_end inclusive.

    Requires T >= 1 and 0 < beta_start <= beta_end < 1.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start < 1.0) or not (0.0 < beta_end < 1.0):
        raise ScheduleError("beta endpoints must lie strictly inside (0, 1)")
    if beta_start > beta_end:
        raise ScheduleError("beta_start must not exceed beta_end (ascending schedule)")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return schedule_from_betas(betas, beta_start=beta_start, beta_end=beta_end)


def snr_to_start_step(s: NoiseSchedule, snr_db: float) -> int:
    """Step whose marginal SNR best matches a channel SNR given in dB.

    Returns argmin_t |abar_t/(1-abar_t) - 10^(snr_db/10)|, ties broken
    toward smaller t; saturates at 1 and T for extreme SNRs.
    """
    target = 10.0 ** (float(snr_db) / 10.0)
    ratios = s.alpha_bars / (1.0 - s.alpha_bars)
    # np.argmin returns the first minimizer, i.e. the smallest t on ties
    return int(np.argmin(np.abs(ratios - target))) + 1
