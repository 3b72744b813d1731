"""Discrete DDPM mathematics: schedule tables, forward noising, reverse step,
score/noise conversion and the one-shot clean-sample estimate.

Timesteps are 1-based throughout (``t`` in ``1..T``); the tables are stored
0-based so ``betas[t - 1]`` is beta at step ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    """Invalid noise-schedule construction."""


class SingularTimestepError(ValueError):
    """A clean-sample estimate was requested where alpha_bar is zero."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t - 1])

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 1 else float(self.alpha_bars[t - 2])

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end <= 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end <= 1, got ({beta_start}, {beta_end})"
        )
    T = int(T)
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        steps = np.arange(T, dtype=np.float64) / (T - 1)
        betas = beta_start + steps * (beta_end - beta_start)
        betas[-1] = beta_end
    alphas = 1.0 - betas
    # sequential product keeps alpha_bar[t] == alpha_bar[t-1] * alpha[t] exactly
    alpha_bars = np.empty(T, dtype=np.float64)
    acc = 1.0
    tiny = np.finfo(np.float64).tiny
    for i in range(T):
        acc = acc * alphas[i]
        if acc < tiny:
            acc = 0.0  # subnormals would stop decreasing strictly
        alpha_bars[i] = acc
    for arr in (betas, alphas, alpha_bars):
        arr.flags.writeable = False
    return NoiseSchedule(T, betas, alphas, alpha_bars)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape {np.shape(a)} != {np.shape(b)}")


def forward_marginal(s: NoiseSchedule, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """Sample ``x_t`` given ``x0`` and a standard-normal draw ``eps``."""
    s.check_t(t)
    _same_shape(x0, eps, "forward_marginal")
    ab = s.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def step_sigma(s: NoiseSchedule, t: int, sigma_mode: str = "tilde_beta") -> float:
    beta = s.beta(t)
    if sigma_mode == "beta":
        return float(np.sqrt(beta))
    if sigma_mode == "tilde_beta":
        ab = s.alpha_bar(t)
        if ab == 1.0:
            return 0.0
        return float(np.sqrt(beta * (1.0 - s.alpha_bar_prev(t)) / (1.0 - ab)))
    raise ValueError(f"unknown sigma_mode {sigma_mode!r}")


def reverse_step(
    s: NoiseSchedule,
    x_t: np.ndarray,
    eps_pred: np.ndarray,
    t: int,
    z: np.ndarray,
    sigma_mode: str = "tilde_beta",
) -> np.ndarray:
    """One ancestral step ``x_t -> x_{t-1}``; the caller supplies ``z``
    (and must pass zeros at ``t == 1``)."""
    s.check_t(t)
    _same_shape(x_t, eps_pred, "reverse_step")
    _same_shape(x_t, z, "reverse_step")
    alpha = s.alpha(t)
    ab = s.alpha_bar(t)
    mean = (x_t - (1.0 - alpha) / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(alpha)
    sigma = step_sigma(s, t, sigma_mode)
    if sigma == 0.0:
        return mean
    return mean + sigma * z


def score_from_eps(eps_pred: np.ndarray, alpha_bar: float) -> np.ndarray:
    # negative sign: the score points back toward the data, so that
    # posterior_x0 recovers x0 from an exact noise prediction
    if alpha_bar >= 1.0:
        raise ZeroDivisionError("score undefined at alpha_bar == 1")
    if alpha_bar < 0.0:
        raise ValueError(f"alpha_bar must be in [0, 1), got {alpha_bar}")
    return -eps_pred / np.sqrt(1.0 - alpha_bar)


def eps_from_score(score: np.ndarray, alpha_bar: float) -> np.ndarray:
    return -np.sqrt(1.0 - alpha_bar) * score


def posterior_x0(s: NoiseSchedule, x_t: np.ndarray, score: np.ndarray, t: int) -> np.ndarray:
    """Tweedie estimate of the clean sample from ``x_t`` and its score."""
    s.check_t(t)
    _same_shape(x_t, score, "posterior_x0")
    ab = s.alpha_bar(t)
    if ab <= 0.0:
        raise SingularTimestepError(f"alpha_bar is zero at t={t}")
    return (x_t + (1.0 - ab) * score) / np.sqrt(ab)


def ancestral_sample(
    model,
    s: NoiseSchedule,
    shape: tuple[int, ...],
    rng: np.random.Generator,
    *,
    sigma_mode: str = "tilde_beta",
    rotate: bool = False,
) -> np.ndarray:
    """Unconditional rollout from ``x_T ~ N(0, I)`` down to ``x_0``.

    The draw order (initial noise, then per step: rotation shift, step
    noise) is shared with the guided sampler so equal seeds give equal
    trajectories when guidance is off.
    """
    from .priors import rotated_eps

    x = rng.standard_normal(shape)
    width = shape[1]
    for t in range(s.T, 0, -1):
        shift = int(rng.integers(width)) if rotate else 0
        eps = rotated_eps(model, x, t, shift)
        z = rng.standard_normal(shape) if t > 1 else np.zeros(shape)
        x = reverse_step(s, x, eps, t, z, sigma_mode)
    return x
