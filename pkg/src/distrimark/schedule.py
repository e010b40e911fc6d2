"""Diffusion noise schedule.

The schedule owns the per-step variances beta_t and the cumulative
signal-retention coefficients alpha_bar_t used by every forward-noising,
sampling and inversion step:

    alpha_bar[0] = 1
    alpha_bar[t] = prod_{s<t} (1 - beta[s])        for t = 1..T
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    """Invalid schedule parameters or degenerate coefficients."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta diffusion schedule over ``T`` timesteps.

    ``beta`` has length T; ``alpha_bar`` has length T+1 with
    ``alpha_bar[0] == 1`` so that timestep 0 is the clean sample.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if self.T < 1:
            raise ScheduleError(f"T must be >= 1, got {self.T}")
        if self.beta.shape != (self.T,):
            raise ScheduleError(f"beta must have shape ({self.T},)")
        if self.alpha_bar.shape != (self.T + 1,):
            raise ScheduleError(f"alpha_bar must have shape ({self.T + 1},)")

    def alpha_bar_at(self, t: int) -> float:
        """Return alpha_bar_t, validating 0 <= t <= T and positivity."""
        if not 0 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [0, {self.T}]")
        a = float(self.alpha_bar[t])
        if a <= 0.0:
            raise ScheduleError(f"alpha_bar[{t}] = {a} is not positive")
        return a

    def step_grid(self, steps: int) -> np.ndarray:
        """Evenly spaced integer timesteps 0 = tau_0 < ... < tau_steps = T.

        Used to subsample the full schedule for few-step sampling or
        inversion. Requires steps <= T so the grid is strictly increasing.
        """
        if not 1 <= steps <= self.T:
            raise ScheduleError(f"steps must be in [1, T={self.T}], got {steps}")
        taus = np.round(np.linspace(0, self.T, steps + 1)).astype(np.int64)
        if np.any(np.diff(taus) <= 0):
            raise ScheduleError(f"step grid for steps={steps} is not strictly increasing")
        return taus


def make_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Build a linear-beta schedule from beta_min to beta_max over T steps.

    beta_min == beta_max == 0 is accepted and yields the identity
    (zero noise) schedule with alpha_bar identically 1.
    """
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 <= beta_min <= beta_max < 1.0):
        raise ScheduleError(
            f"need 0 <= beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


DEFAULT_T = 1000
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02


def default_schedule() -> NoiseSchedule:
    """The schedule used throughout: linear 1e-4..0.02 over 1000 steps."""
    return make_schedule(DEFAULT_T, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX)
