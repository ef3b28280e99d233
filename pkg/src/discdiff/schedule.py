"""Noise schedules: per-step variance tables and derived quantities.

Step indices are 1-based throughout the package: step ``t`` reads table
entry ``[t - 1]``, and ``t = 1`` is the final denoising step. All tables
are float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance tables for a T-step diffusion process.

    ``posterior_variances[t-1]`` is the variance of the forward posterior
    q(x_{t-1} | x_t, x_0); the cumulative product before step 1 is defined
    as 1, so the first entry is exactly 0. ``original_indices`` maps each
    step to the 1-based step of the schedule this one was respaced from,
    composed through nested respacing so the entries always name steps of
    the root (training) schedule -- samplers condition the model on them.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variances: np.ndarray
    original_indices: np.ndarray

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step index {t} out of range [1, {self.T}]")

    def clipped_posterior_log_variances(self) -> np.ndarray:
        """Log posterior variances with the zero first entry replaced.

        The first-step posterior variance is exactly 0; its log is replaced
        by the second step's (or by log beta_1 for a one-step schedule) so
        the value is usable as an interpolation endpoint.
        """
        floor = self.posterior_variances[1] if self.T > 1 else self.betas[0]
        padded = np.concatenate([[floor], self.posterior_variances[1:]])
        return np.log(padded)


def _schedule_from_alpha_bars(
    betas: np.ndarray, alpha_bars: np.ndarray, original_indices: np.ndarray
) -> NoiseSchedule:
    alphas = 1.0 - betas
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior = (1.0 - prev) / (1.0 - alpha_bars) * betas
    return NoiseSchedule(
        T=len(betas),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_variances=posterior,
        original_indices=original_indices,
    )


def make_schedule_from_betas(betas) -> NoiseSchedule:
    """Build a schedule from an explicit per-step variance sequence."""
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or len(betas) < 1:
        raise ValueError("betas must be a non-empty 1D sequence")
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ValueError("every beta must lie strictly inside (0, 1)")
    alpha_bars = np.cumprod(1.0 - betas)
    indices = np.arange(1, len(betas) + 1, dtype=np.int64)
    return _schedule_from_alpha_bars(betas, alpha_bars, indices)


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end`` inclusive."""
    if T < 1:
        raise ValueError(f"step count must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    return make_schedule_from_betas(np.linspace(beta_start, beta_end, T))


def respace_schedule(schedule: NoiseSchedule, n_steps: int) -> NoiseSchedule:
    """Select an evenly spaced subsequence of steps for faster sampling.

    The selected steps keep the parent's cumulative noise levels exactly:
    the respaced ``alpha_bars`` are the parent values at the selected
    steps, and the new betas are derived from their ratios. The final
    step T is always selected.
    """
    if not 1 <= n_steps <= schedule.T:
        raise ValueError(
            f"n_steps must lie in [1, {schedule.T}], got {n_steps}"
        )
    if n_steps == schedule.T:
        return schedule
    if n_steps == 1:
        sel = np.array([schedule.T - 1])
    else:
        sel = np.unique(
            np.floor(np.linspace(0.0, schedule.T - 1, n_steps)).astype(np.int64)
        )
    alpha_bars = schedule.alpha_bars[sel]
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    betas = 1.0 - alpha_bars / prev
    return _schedule_from_alpha_bars(
        betas, alpha_bars, schedule.original_indices[sel]
    )
