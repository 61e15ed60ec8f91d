"""DDPM machinery: schedule, forward corruption, losses, ancestral sampling.

Schedule arrays are kept in float64 (their products span many orders of
magnitude); per-step coefficients are cast to the working dtype at use. The
variance head follows the learned-interpolation convention: the raw network
output is clipped to [-1, 1], mapped to a fraction in [0, 1], and interpolates
log-linearly between the posterior floor and the forward-process ceiling, so
the resulting variance is always inside [posterior_variance_t, beta_t].

Sampling draws noise from one independent stream per batch element (spawned
from the seed), so a batch may be partitioned across workers and still
reproduce the single-process result bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .tensor import Tensor


@dataclass
class DiffusionSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    posterior_variance: np.ndarray
    timestep_map: np.ndarray  # position -> timestep index of the parent schedule

    @property
    def steps(self):
        return len(self.betas)


def _derive(betas, timestep_map):
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    alpha_bar_prev = np.append(1.0, alpha_bar[:-1])
    posterior = betas * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    posterior[0] = betas[0]  # the t=0 posterior is degenerate; use beta_0
    return DiffusionSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bar=alpha_bar,
        alpha_bar_prev=alpha_bar_prev,
        posterior_variance=posterior,
        timestep_map=np.asarray(timestep_map, dtype=np.int64),
    )


def make_schedule(total_steps=1000, beta_start=1e-4, beta_end=0.02):
    """Linear beta schedule with derived cumulative arrays."""
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if total_steps < 1:
        raise ConfigurationError(f"schedule needs at least one step, got {total_steps}")
    betas = np.linspace(beta_start, beta_end, total_steps, dtype=np.float64)
    return _derive(betas, np.arange(total_steps))


def respace_schedule(schedule, steps):
    """Uniform-stride subset of the schedule with re-derived betas.

    The subset keeps the original cumulative signal fractions at the selected
    timesteps: beta'_i = 1 - alpha_bar[t_i] / alpha_bar[t_{i-1}]. The
    ``timestep_map`` translates subset positions back to original timesteps
    for conditioning the model.
    """
    total = schedule.steps
    if steps > total:
        raise ConfigurationError(f"cannot respace {total} steps up to {steps}")
    if steps < 1:
        raise ConfigurationError("need at least one sampling step")
    if steps == total:
        return schedule
    indices = np.array([i * total // steps for i in range(steps)], dtype=np.int64)
    sub_alpha_bar = schedule.alpha_bar[indices]
    prev = np.append(1.0, sub_alpha_bar[:-1])
    betas = 1.0 - sub_alpha_bar / prev
    return _derive(betas, schedule.timestep_map[indices])


def _coef(values, t, like):
    """Per-sample schedule scalars broadcast over image dims, in like.dtype."""
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    out = np.asarray(values, dtype=np.float64)[t].astype(like.dtype)
    return out.reshape((-1,) + (1,) * (like.ndim - 1))


def _check_t(t, schedule):
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if (t < 0).any() or (t >= schedule.steps).any():
        raise ContractError(f"timestep out of range [0, {schedule.steps})")
    return t


def q_sample(x0, t, schedule, noise):
    """Forward corruption: sqrt(a_bar_t) * x0 + sqrt(1 - a_bar_t) * noise."""
    t = _check_t(t, schedule)
    x0 = np.asarray(x0)
    return _coef(np.sqrt(schedule.alpha_bar), t, x0) * x0 + _coef(
        np.sqrt(1.0 - schedule.alpha_bar), t, x0
    ) * np.asarray(noise)


def mse(a, b):
    """Mean squared error over all elements; differentiable in ``a``."""
    diff = T.as_tensor(a) - T.as_tensor(b)
    return (diff * diff).mean()


def l_simple(eps_hat, eps):
    """The plain denoising objective: elementwise MSE against the true noise."""
    return mse(eps_hat, eps)


def log_variance_from_v(v_hat, t, schedule):
    """log Sigma = frac * log(beta_t) + (1 - frac) * log(posterior_t),
    with frac = (clip(v, -1, 1) + 1) / 2."""
    t = _check_t(t, schedule)
    v_hat = T.as_tensor(v_hat)
    frac = (T.clip(v_hat, -1.0, 1.0) + 1.0) * 0.5
    log_beta = Tensor(_coef(np.log(schedule.betas), t, v_hat.data))
    log_post = Tensor(_coef(np.log(schedule.posterior_variance), t, v_hat.data))
    return frac * log_beta + (1.0 - frac) * log_post


def variance_from_v(v_hat, t, schedule):
    """Interpolated reverse-process variance; numpy in -> numpy out."""
    if isinstance(v_hat, Tensor):
        return T.exp(log_variance_from_v(v_hat, t, schedule))
    with T.no_grad():
        return T.exp(log_variance_from_v(Tensor(np.asarray(v_hat)), t, schedule)).data


def predicted_mean(x_t, t, eps_hat, schedule):
    """Reverse mean: (x_t - beta_t / sqrt(1 - a_bar_t) * eps_hat) / sqrt(alpha_t)."""
    t = _check_t(t, schedule)
    x_t = np.asarray(x_t)
    coef = _coef(schedule.betas / np.sqrt(1.0 - schedule.alpha_bar), t, x_t)
    return (x_t - coef * np.asarray(eps_hat)) / _coef(np.sqrt(schedule.alphas), t, x_t)


def posterior_mean(x0, x_t, t, schedule):
    """Mean of the forward posterior q(x_{t-1} | x_t, x0)."""
    t = _check_t(t, schedule)
    x0, x_t = np.asarray(x0), np.asarray(x_t)
    c0 = _coef(
        np.sqrt(schedule.alpha_bar_prev) * schedule.betas / (1.0 - schedule.alpha_bar), t, x0
    )
    ct = _coef(
        np.sqrt(schedule.alphas) * (1.0 - schedule.alpha_bar_prev) / (1.0 - schedule.alpha_bar),
        t,
        x0,
    )
    return c0 * x0 + ct * x_t


def p_sample_step(x_t, t, eps_hat, sigma, schedule, noise=None):
    """One ancestral step; t >= 1 adds sqrt(sigma) * noise, t = 0 is the mean."""
    mean_ = predicted_mean(x_t, t, eps_hat, schedule)
    t_arr = np.atleast_1d(np.asarray(t))
    if noise is None or (t_arr == 0).all():
        return mean_
    keep = (t_arr > 0).reshape((-1,) + (1,) * (mean_.ndim - 1))
    return mean_ + keep * np.sqrt(np.asarray(sigma)) * np.asarray(noise)


def variance_vlb(x0, x_t, t, eps_hat, v_hat, schedule):
    """KL between the forward posterior and the model's reverse Gaussian,
    with the mean frozen: gradient reaches only the variance head.

    Used in teacher training so the learned variance is meaningful.
    """
    eps_data = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
    mu_true = posterior_mean(x0, x_t, t, schedule)
    mu_model = predicted_mean(x_t, t, eps_data, schedule)
    var_true = _coef(schedule.posterior_variance, _check_t(t, schedule), mu_true)
    log_var_true = np.log(var_true)
    log_sigma = log_variance_from_v(v_hat, t, schedule)
    sigma = T.exp(log_sigma)
    gap = (var_true + (mu_true - mu_model) ** 2)
    kl = (log_sigma - Tensor(log_var_true) + Tensor(gap) / sigma - 1.0) * 0.5
    return kl.mean()


def sample(model, schedule, y, cfg_scale=1.0, steps=None, seed=0):
    """Ancestral sampling with optional classifier-free guidance.

    ``model`` exposes ``predict(x, t, y) -> (eps, v_or_None)`` plus a
    ``config`` with geometry and the null label. ``y`` is one label per
    sample. cfg_scale == 1 runs the conditional branch alone; above 1, the
    guided noise is eps_null + s * (eps_cond - eps_null) and the variance is
    taken from the conditional branch.
    """
    if cfg_scale < 1.0:
        raise ConfigurationError(f"cfg_scale must be >= 1, got {cfg_scale}")
    if steps is not None:
        schedule = respace_schedule(schedule, steps)
    cfg = model.config
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    batch = len(y)
    dtype = T.default_dtype()

    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(batch)]
    x = np.stack(
        [r.standard_normal((cfg.channels, cfg.image_size, cfg.image_size)) for r in streams]
    ).astype(dtype)

    null = np.full(batch, cfg.null_label, dtype=np.int64)
    for i in reversed(range(schedule.steps)):
        t_model = np.full(batch, schedule.timestep_map[i], dtype=np.int64)
        t_local = np.full(batch, i, dtype=np.int64)
        eps_cond, v_cond = model.predict(x, t_model, y)
        if cfg_scale > 1.0:
            eps_null, _ = model.predict(x, t_model, null)
            eps_hat = eps_null + cfg_scale * (eps_cond - eps_null)
        else:
            eps_hat = eps_cond
        if v_cond is not None:
            sigma = variance_from_v(v_cond, t_local, schedule)
        else:
            sigma = _coef(schedule.posterior_variance, t_local, x)
        noise = None
        if i > 0:
            noise = np.stack(
                [r.standard_normal((cfg.channels, cfg.image_size, cfg.image_size)) for r in streams]
            ).astype(dtype)
        x = p_sample_step(x, t_local, eps_hat, sigma, schedule, noise).astype(dtype)
    return x
