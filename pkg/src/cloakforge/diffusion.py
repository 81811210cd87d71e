"""Forward noising process, denoising losses, and the ancestral sampler.

Timesteps are 1-indexed: t runs over {1..T} and x_0 is the clean image.
The losses reduce by mean over elements so values are resolution-independent.
All functions are pure given their inputs and a seed; schedules are frozen
and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_T = 250
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule: betas in (0,1) with derived alphas and alpha_bars."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1D vector")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("every beta must lie in the open interval (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        for name, arr in (("betas", betas), ("alphas", alphas), ("alpha_bars", alpha_bars)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def check_t(self, t) -> np.ndarray:
        t_arr = np.atleast_1d(np.asarray(t))
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise ValueError(f"timestep {t} out of range [1, {self.T}]")
        return t_arr


def make_linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linearly interpolated betas from beta_start to beta_end over T steps."""
    if T < 1:
        raise ValueError("T must be a positive integer")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def forward_noise(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    t may be a scalar or one value per leading-axis sample of x0.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    t_arr = schedule.check_t(t)
    ab = schedule.alpha_bars[t_arr - 1]
    if ab.size > 1:
        if ab.size != x0.shape[0]:
            raise ValueError(f"got {ab.size} timesteps for batch of {x0.shape[0]}")
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    else:
        ab = ab[0]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def loss_uncond(denoiser, x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> float:
    """Mean squared error between eps and an unconditional prediction at x_t."""
    x_t = forward_noise(x0, t, eps, schedule)
    pred = denoiser(x_t, t)
    if pred.shape != eps.shape:
        raise ValueError(f"denoiser output {pred.shape} != noise shape {eps.shape}")
    return float(np.mean((pred - eps) ** 2))


def loss_cond(denoiser, x0: np.ndarray, c: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> float:
    """Mean squared error between eps and a prompt-conditioned prediction at x_t."""
    x_t = forward_noise(x0, t, eps, schedule)
    pred = denoiser(x_t, t, c) if not hasattr(denoiser, "forward") else denoiser.forward(x_t, t, c)
    if pred.shape != eps.shape:
        raise ValueError(f"denoiser output {pred.shape} != noise shape {eps.shape}")
    return float(np.mean((pred - eps) ** 2))


def loss_cond_grad(model, x0: np.ndarray, c: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule):
    """Conditional loss plus exact gradients.

    Returns (loss, param_grads, d_x0, d_cond). The x0 gradient chains through
    the forward noising, i.e. d_x0 = sqrt(abar_t) * d_x_t.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x_t = forward_noise(x0, t, eps, schedule)
    pred, cache = model.forward(x_t, t, c, want_cache=True)
    resid = pred - eps
    loss = float(np.mean(resid**2))
    if not np.isfinite(loss):
        raise FloatingPointError("conditional loss is non-finite")
    d_out = (2.0 / resid.size) * resid
    grads, d_xt, d_cond = model.backward(cache, d_out)
    t_arr = schedule.check_t(t)
    ab = schedule.alpha_bars[t_arr - 1]
    sqrt_ab = np.sqrt(ab.reshape((-1,) + (1,) * (x0.ndim - 1))) if ab.size > 1 else np.sqrt(ab[0])
    d_x0 = sqrt_ab * d_xt
    return loss, grads, d_x0, d_cond


def ancestral_sample(
    model,
    c: np.ndarray,
    schedule: NoiseSchedule,
    seed,
    count: int,
    image_shape: tuple,
) -> np.ndarray:
    """Draw `count` images by iterating the DDPM posterior step from pure noise.

    Posterior variance is beta_t; the t=1 step adds no noise. Output is
    clipped to [0,1] and has shape (count, *image_shape).
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    if count == 0:
        return np.zeros((0,) + tuple(image_shape))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    betas, alphas, alpha_bars = schedule.betas, schedule.alphas, schedule.alpha_bars
    x = rng.standard_normal((count,) + tuple(image_shape))
    for t in range(schedule.T, 0, -1):
        eps_hat = model.forward(x, t, c) if hasattr(model, "forward") else model(x, t, c)
        coef = betas[t - 1] / np.sqrt(1.0 - alpha_bars[t - 1])
        x = (x - coef * eps_hat) / np.sqrt(alphas[t - 1])
        if t > 1:
            x = x + np.sqrt(betas[t - 1]) * rng.standard_normal(x.shape)
    return np.clip(x, 0.0, 1.0)
