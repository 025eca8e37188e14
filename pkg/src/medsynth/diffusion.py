"""Noise schedules, forward noising, the noise-prediction loss, ancestral
sampling, and classifier-free guidance.

Timesteps are 1-based (t in 1..T); alpha_bar(0) == 1 by convention. The
desk-scale default is T=100 with linear betas scaled by 1000/T so the
cumulative signal decay tracks the usual T=1000 convention.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError
from .rng import Stream
from . import tensor as T

DEFAULT_T = 100
DEFAULT_GUIDANCE_SCALE = 2.0
DEFAULT_DROP_PROBABILITY = 0.1


@dataclass
class NoiseSchedule:
    T: int
    betas: np.ndarray       # index t-1 holds beta_t
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t", "beta", "alpha", "alpha_bar"])
            for t in range(1, self.T + 1):
                w.writerow([t, repr(self.betas[t - 1]), repr(self.alphas[t - 1]),
                            repr(self.alpha_bars[t - 1])])


@dataclass
class GuidanceConfig:
    scale: float = DEFAULT_GUIDANCE_SCALE
    unconditional_token: str = "<null>"
    drop_probability: float = DEFAULT_DROP_PROBABILITY

    def __post_init__(self):
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ConfigError(f"drop_probability {self.drop_probability} outside [0,1]")
        if self.scale < 0.0:
            raise ConfigError(f"guidance scale {self.scale} must be nonnegative")


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T={T} must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    return NoiseSchedule(T, betas, alphas, np.cumprod(alphas))


def make_cosine_schedule(T: int) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T={T} must be >= 1")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + 0.008) / 1.008) * np.pi / 2.0) ** 2
    abar = f / f[0]
    betas = np.minimum(1.0 - abar[1:] / abar[:-1], 0.999)
    alphas = 1.0 - betas
    return NoiseSchedule(T, betas, alphas, np.cumprod(alphas))


def default_schedule(T: int = DEFAULT_T) -> NoiseSchedule:
    # endpoints scale with 1000/T to keep the cumulative signal decay of the
    # T=1000 convention; clipped so very small T still yields a valid schedule
    s = 1000.0 / T
    return make_linear_schedule(T, min(1e-4 * s, 0.4), min(0.02 * s, 0.99))


def q_sample(x0: np.ndarray, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward-noise x0 to timestep t in closed form."""
    if noise.shape != x0.shape:
        raise ContractError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    if not 0 <= t <= schedule.T:
        raise ContractError(f"t={t} outside 0..{schedule.T}")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    if eps_uncond.shape != eps_cond.shape:
        raise ContractError("cfg_combine shape mismatch")
    # short-circuits keep the endpoint identities bitwise exact
    if scale == 1.0:
        return eps_cond.copy()
    if scale == 0.0:
        return eps_uncond.copy()
    return eps_uncond + scale * (eps_cond - eps_uncond)


def eps_loss(model, x0: np.ndarray, text_emb, schedule: NoiseSchedule, rng: Stream,
             guidance: GuidanceConfig | None = None, null_emb=None) -> T.Tensor:
    """One-draw noise-prediction MSE; records onto the active tape.

    `model` maps (noisy array, t, text_emb) -> Tensor of the same shape. With
    a guidance config, the text embedding is swapped for `null_emb` with
    probability drop_probability (classifier-free training).
    """
    t = rng.randint(1, schedule.T + 1)
    noise = rng.normal(x0.shape)
    if guidance is not None and guidance.drop_probability > 0.0:
        if rng.uniform() < guidance.drop_probability:
            text_emb = null_emb
    x_t = q_sample(x0, t, noise, schedule)
    eps_hat = model(x_t, t, text_emb)
    return T.mse(eps_hat, T.Tensor(noise))


def _ancestral_loop(eps_fn, schedule: NoiseSchedule, draw_x0, draw_z) -> np.ndarray:
    """Shared reverse recurrence. `eps_fn(x, t)` returns the guided noise
    estimate; `draw_x0()`/`draw_z()` supply the initial state and per-step
    injection noise (z is not drawn at t = 1)."""
    x = draw_x0()
    for t in range(schedule.T, 0, -1):
        eps = eps_fn(x, t)
        beta = schedule.betas[t - 1]
        alpha = schedule.alphas[t - 1]
        ab_t = schedule.alpha_bar(t)
        mean = (x - beta / np.sqrt(1.0 - ab_t) * eps) / np.sqrt(alpha)
        if t > 1:
            ab_prev = schedule.alpha_bar(t - 1)
            beta_tilde = beta * (1.0 - ab_prev) / (1.0 - ab_t)
            x = mean + np.sqrt(beta_tilde) * draw_z()
        else:
            x = mean
    return x


def ddpm_sample(model, text_emb, schedule: NoiseSchedule, guidance: GuidanceConfig,
                rng: Stream, shape: tuple[int, ...], null_emb=None) -> np.ndarray:
    """Ancestral sampling from pure noise; deterministic given the stream.

    Draw order is fixed: x_T first, then one z per step t = T..2 (no noise is
    added at t = 1). `model(x, t, emb)` must return an ndarray-like of `shape`.
    """

    def eps_fn(x, t):
        if guidance.scale == 1.0 or null_emb is None:
            return np.asarray(model(x, t, text_emb))
        eps_u = np.asarray(model(x, t, null_emb))
        eps_c = np.asarray(model(x, t, text_emb))
        return cfg_combine(eps_u, eps_c, guidance.scale)

    return _ancestral_loop(eps_fn, schedule, lambda: rng.normal(shape),
                           lambda: rng.normal(shape))


def ddpm_sample_batch(model_batch, text_emb, schedule: NoiseSchedule,
                      guidance: GuidanceConfig, streams: list[Stream],
                      shape: tuple[int, ...], null_emb=None) -> np.ndarray:
    """Batched sampling, one stream per image so each output depends only on
    its own (seed, prompt, checkpoint) triple regardless of batch grouping."""

    def eps_fn(x, t):
        if guidance.scale == 1.0 or null_emb is None:
            return np.asarray(model_batch(x, t, text_emb))
        eps_u = np.asarray(model_batch(x, t, null_emb))
        eps_c = np.asarray(model_batch(x, t, text_emb))
        return cfg_combine(eps_u, eps_c, guidance.scale)

    return _ancestral_loop(eps_fn, schedule,
                           lambda: np.stack([s.normal(shape) for s in streams]),
                           lambda: np.stack([s.normal(shape) for s in streams]))


def ddpm_sample_many(model_many, embs: list, schedule: NoiseSchedule,
                     guidance: GuidanceConfig, streams: list[Stream],
                     shape: tuple[int, ...], null_emb=None) -> np.ndarray:
    """Heterogeneous-prompt batched sampling with the guided and unconditional
    passes fused into one forward. `model_many(x, t, embs)` takes one
    embedding per row of x; per-image streams keep outputs independent of the
    batch grouping."""
    b = len(streams)

    def eps_fn(x, t):
        if guidance.scale == 1.0 or null_emb is None:
            return np.asarray(model_many(x, t, embs))
        both = np.asarray(model_many(np.concatenate([x, x]), t,
                                     [null_emb] * b + list(embs)))
        return cfg_combine(both[:b], both[b:], guidance.scale)

    return _ancestral_loop(eps_fn, schedule,
                           lambda: np.stack([s.normal(shape) for s in streams]),
                           lambda: np.stack([s.normal(shape) for s in streams]))
