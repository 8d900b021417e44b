"""Variance-preserving SDE machinery for sampling spatial preference.

Forward process: dv = -1/2 beta(t) v dt + sqrt(beta(t)) dw with a linear
schedule beta(t) = beta_min + (beta_max - beta_min) t / T.  Its marginal
kernel is Gaussian with mean coefficient exp(-B(t)/2) and variance
1 - exp(-B(t)), B(t) = beta_min t + (beta_max - beta_min) t^2 / (2T).
The reverse-time SDE is integrated with Euler-Maruyama steps from t = T
(the user's prototype) down to t = 0 (the preference sample).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import init_normal
from .tensor import NonFiniteError, Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    beta_min: float = 0.1
    beta_max: float = 20.0
    horizon: float = 1.0

    def __post_init__(self):
        # beta_min == beta_max == 0 is the degenerate no-diffusion schedule,
        # useful as a sampler identity check; otherwise 0 < beta_min < beta_max.
        if self.beta_min < 0.0 or self.beta_max < self.beta_min:
            raise ValueError(f"need 0 <= beta_min <= beta_max, got {self.beta_min}, {self.beta_max}")
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")

    def beta(self, t):
        if np.any(t < 0.0) or np.any(t > self.horizon):
            raise ValueError(f"t={t} outside [0, {self.horizon}]")
        return self.beta_min + (self.beta_max - self.beta_min) * t / self.horizon

    def integral(self, t):
        """B(t) = integral of beta from 0 to t."""
        return self.beta_min * t + (self.beta_max - self.beta_min) * t * t / (2.0 * self.horizon)


@dataclass(frozen=True)
class SamplerConfig:
    step_size: float = 0.01
    stochastic: bool = True
    backprop_through_sampler: bool = True
    noise_last_step: bool = False

    def n_steps(self, horizon):
        steps = round(horizon / self.step_size)
        if steps < 1 or abs(steps * self.step_size - horizon) > 1e-9:
            raise ValueError(f"step size {self.step_size} does not evenly divide "
                             f"horizon {horizon}")
        return steps


def kernel_stats(t, schedule):
    """(mean coefficient, standard deviation) of the marginal kernel at time t."""
    if np.any(t < 0.0) or np.any(t > schedule.horizon):
        raise ValueError(f"t={t} outside [0, {schedule.horizon}]")
    b = schedule.integral(np.asarray(t, dtype=np.float64))
    mean_coef = np.exp(-0.5 * b)
    std = np.sqrt(1.0 - np.exp(-b))
    return mean_coef, std


def perturb(v0, t, noise, schedule):
    """Sample the forward kernel at time t: mean_coef * v0 + std * noise.

    ``v0`` may be a (d,) vector or a (B, d) batch with per-row times.
    Gradients flow into v0 when it participates in the tape.
    """
    v0 = v0 if isinstance(v0, Tensor) else Tensor(v0)
    mean_coef, std = kernel_stats(t, schedule)
    if v0.ndim == 1:
        return T.add(T.scale(v0, float(mean_coef)), Tensor(float(std) * np.asarray(noise)))
    rows = v0.shape[0]
    mean_coef = np.broadcast_to(mean_coef, (rows,))
    std = np.broadcast_to(std, (rows,))
    return T.add(T.scale_rows(v0, Tensor(mean_coef)),
                 Tensor(np.asarray(noise) * std[:, None]))


def conditional_score(v_t, v0, t, schedule):
    """Gradient of the log kernel density: -(v_t - mean_coef * v0) / variance.

    Rejects t = 0, where the kernel degenerates.  Shapes follow ``perturb``.
    """
    if np.any(np.asarray(t) <= 0.0):
        raise ValueError("conditional_score: t must be positive")
    v_t = v_t if isinstance(v_t, Tensor) else Tensor(v_t)
    v0 = v0 if isinstance(v0, Tensor) else Tensor(v0)
    mean_coef, std = kernel_stats(t, schedule)
    if v0.ndim == 1:
        centered = T.subtract(v_t, T.scale(v0, float(mean_coef)))
        return T.scale(centered, -1.0 / float(std) ** 2)
    rows = v0.shape[0]
    mean_coef = np.broadcast_to(mean_coef, (rows,))
    std = np.broadcast_to(std, (rows,))
    centered = T.subtract(v_t, T.scale_rows(v0, Tensor(mean_coef)))
    return T.scale_rows(centered, Tensor(-1.0 / (std * std)))


def log_kernel_density(v_t, v0, t, schedule):
    """Log density of the marginal kernel (plain float; test oracle territory)."""
    mean_coef, std = kernel_stats(t, schedule)
    diff = np.asarray(v_t) - mean_coef * np.asarray(v0)
    var = std * std
    d = diff.shape[-1]
    return float(-0.5 * (diff * diff).sum() / var - 0.5 * d * np.log(2.0 * np.pi * var))


# -- score network ----------------------------------------------------------------


def init_score_params(rng, d, hidden, conditioned=True, time_feature=False):
    """MLP weights mapping concat(state, condition[, t]) to a d-vector."""
    width_in = (2 * d if conditioned else d) + (1 if time_feature else 0)
    widths = [width_in, *hidden, d]
    params = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"score.w{i}"] = init_normal(rng, (a, b), 1.0 / np.sqrt(a))
        params[f"score.b{i}"] = Tensor(np.zeros(b), requires_grad=True)
    return params


def score_net(v, cond, params, t=None, dropout_rate=0.0, drop_rng=None):
    """Apply the score MLP to a (B, d) state batch.

    ``cond`` is the user-encoding batch, or None for the unconditioned
    variant; ``t`` appends a scalar time feature when the network was built
    with one.
    """
    parts = [v]
    if cond is not None:
        parts.append(cond)
    if t is not None:
        col = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (v.shape[0], 1))
        parts.append(Tensor(col.copy()))
    h = T.concat(parts, axis=-1) if len(parts) > 1 else v
    i = 0
    while f"score.w{i}" in params:
        h = T.broadcast_add(T.matmul(h, params[f"score.w{i}"]), params[f"score.b{i}"])
        if f"score.w{i + 1}" in params:
            h = T.gelu(h)
            if drop_rng is not None and dropout_rate > 0.0:
                h = T.dropout(h, dropout_rate, drop_rng)
        i += 1
    return h


# -- sampling and training ---------------------------------------------------------


def reverse_sample(prototype, score_fn, schedule, config, rng, checkpoints=None):
    """Integrate the reverse SDE from t = T (prototype) to t = 0.

    ``score_fn(v, t) -> Tensor`` estimates the score at state ``v`` (B, d).
    Per step: v <- v + [1/2 beta(t) v + beta(t) s] dt + sqrt(beta(t) dt) z,
    with noise omitted at the final step unless configured otherwise.
    When ``checkpoints`` (fractions of progress in [0, 1]) is given, also
    returns the recorded states at those points.

    Returns the t = 0 state, detached from the tape when
    ``backprop_through_sampler`` is off.
    """
    v = prototype if isinstance(prototype, Tensor) else Tensor(prototype)
    if not config.backprop_through_sampler:
        v = v.detach()
    n_steps = config.n_steps(schedule.horizon)
    dt = config.step_size
    marks = {}
    if checkpoints is not None:
        marks = {min(n_steps, max(0, round(f * n_steps))): f for f in checkpoints}
    trace = {}
    if 0 in marks:
        trace[marks[0]] = v.data.copy()
    t = schedule.horizon
    for i in range(n_steps):
        beta = schedule.beta(t)
        s = score_fn(v, t)
        v = T.add(T.scale(v, 1.0 + 0.5 * beta * dt), T.scale(s, beta * dt))
        if config.stochastic and (config.noise_last_step or i < n_steps - 1):
            z = rng.standard_normal(v.shape)
            v = T.add(v, Tensor(np.sqrt(beta * dt) * z))
        if not np.isfinite(v.data).all():
            raise NonFiniteError(f"reverse_sample: non-finite state after step {i} (t={t:.4f})")
        t -= dt
        if (i + 1) in marks:
            trace[marks[i + 1]] = v.data.copy()
    if checkpoints is not None:
        return v, trace
    return v


def fisher_loss(target_geo, cond, params, schedule, rng, t_floor=1e-3,
                time_feature=False, dropout_rate=0.0, drop_rng=None, score_fn=None):
    """Single-draw denoising score-matching loss, averaged over the batch.

    Per example: t ~ U(t_floor, T), eps ~ N(0, I); the loss is the squared
    error between the network score at the perturbed point and the analytic
    conditional score -eps / std(t).  ``score_fn(v_t, t) -> Tensor`` replaces
    the network when given (oracle probes).
    """
    target_geo = target_geo if isinstance(target_geo, Tensor) else Tensor(target_geo)
    if target_geo.ndim == 1:
        target_geo = T.reshape(target_geo, (1, target_geo.shape[0]))
        if cond is not None and cond.ndim == 1:
            cond = T.reshape(cond, (1, cond.shape[0]))
    batch, d = target_geo.shape
    t = rng.uniform(t_floor, schedule.horizon, size=batch)
    eps = rng.standard_normal((batch, d))
    v_t = perturb(target_geo, t, eps, schedule)
    target_score = conditional_score(v_t, target_geo, t, schedule)
    if score_fn is not None:
        est = score_fn(v_t, t)
    else:
        est = score_net(v_t, cond, params, t=t if time_feature else None,
                        dropout_rate=dropout_rate, drop_rng=drop_rng)
    return T.scale(T.l2_norm_squared(T.subtract(est, target_score)), 1.0 / batch)
