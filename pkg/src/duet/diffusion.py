"""Diffusion process math: cosine schedule, forward noising, reverse DDPM
steps with temperature, timestep respacing, and guidance combination.

Schedule tables are float64 and immutable; every function here is pure
given its rng stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Rng

BETA_CLIP = 0.999
COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal-retention table. alpha_bar has length T+1 with
    alpha_bar[0] == 1; beta[t-1] is the noise rate of step t. alpha_bar is
    re-accumulated from the clipped betas, so the product identity holds
    exactly."""

    T: int
    alpha_bar: np.ndarray
    beta: np.ndarray
    kind: str = "cosine"

    def step_params(self, t: int) -> tuple[float, float, float, bool]:
        self._check_t(t)
        return (
            float(self.alpha_bar[t]),
            float(self.alpha_bar[t - 1]),
            float(self.beta[t - 1]),
            t == 1,
        )

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    @property
    def timesteps(self) -> np.ndarray:
        return np.arange(1, self.T + 1)


@dataclass(frozen=True)
class RespacedSchedule:
    """Evenly spaced sub-chain of a parent schedule. ``alpha_bar`` at each
    selected timestep equals the parent's value exactly; betas are re-derived
    for the sub-chain (with an implicit t=0, alpha_bar=1 start)."""

    parent_T: int
    timesteps: np.ndarray  # increasing, last == parent_T
    alpha_bar: np.ndarray  # length K, parent values at timesteps
    beta: np.ndarray       # length K, sub-chain noise rates

    def step_params(self, t: int) -> tuple[float, float, float, bool]:
        j = int(np.searchsorted(self.timesteps, t))
        if j >= len(self.timesteps) or self.timesteps[j] != t:
            raise ValueError(f"timestep {t} is not in the respaced chain")
        a_prev = 1.0 if j == 0 else float(self.alpha_bar[j - 1])
        return float(self.alpha_bar[j]), a_prev, float(self.beta[j]), j == 0


def build_cosine_schedule(T: int, s: float = COSINE_OFFSET) -> NoiseSchedule:
    """Cosine alpha_bar curve with offset s; betas clipped to <= 0.999 and
    alpha_bar re-accumulated from the clipped values."""
    if T < 1:
        raise ValueError(f"schedule length T must be >= 1, got {T}")
    if s <= 0:
        raise ValueError(f"cosine offset must be positive, got {s}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * (math.pi / 2.0)) ** 2
    raw = f / f[0]
    beta = 1.0 - raw[1:] / raw[:-1]
    beta = np.minimum(beta, BETA_CLIP)
    alpha_bar = np.empty(T + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    np.cumprod(1.0 - beta, out=alpha_bar[1:])
    return NoiseSchedule(T=T, alpha_bar=alpha_bar, beta=beta)


def respace(schedule: NoiseSchedule, K: int) -> RespacedSchedule:
    """K evenly spaced timesteps, always containing the last training step."""
    if not 1 <= K <= schedule.T:
        raise ValueError(f"respace count {K} outside [1, {schedule.T}]")
    # Spacing T/K >= 1 makes the rounded steps strictly increasing.
    steps = np.round(np.arange(1, K + 1) * (schedule.T / K)).astype(np.int64)
    a = schedule.alpha_bar[steps]
    a_prev = np.concatenate([[1.0], a[:-1]])
    beta = 1.0 - a / a_prev
    return RespacedSchedule(parent_T=schedule.T, timesteps=steps, alpha_bar=a, beta=beta)


def forward_noise(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. ``t`` may be a scalar or
    a per-row array matching x0's leading dim."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match frames {x0.shape}")
    t_arr = np.asarray(t, dtype=np.int64)
    if t_arr.size and (t_arr.min() < 1 or t_arr.max() > schedule.T):
        raise ValueError(f"timestep(s) outside [1, {schedule.T}]")
    a = schedule.alpha_bar[t_arr]
    if t_arr.ndim == 1:
        a = a.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def reverse_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, schedule,
                 temperature: float, rng: Rng | None,
                 x0_clip: float | None = None) -> np.ndarray:
    """Posterior-mean DDPM step; the stochastic term is scaled by
    ``temperature`` and omitted entirely at the chain's final step.

    ``x0_clip`` bounds the implied clean-frame estimate. At large t the
    1/sqrt(alpha_bar) factor amplifies prediction error by orders of
    magnitude; clamping to the data range keeps the chain on-distribution.
    """
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"eps_hat shape {eps_hat.shape} does not match x_t {x_t.shape}")
    a_t, a_prev, beta, is_final = schedule.step_params(t)
    alpha = 1.0 - beta
    x0_hat = (x_t - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
    if x0_clip is not None:
        x0_hat = np.clip(x0_hat, -x0_clip, x0_clip)
    mean = (
        (math.sqrt(a_prev) * beta / (1.0 - a_t)) * x0_hat
        + (math.sqrt(alpha) * (1.0 - a_prev) / (1.0 - a_t)) * x_t
    )
    if is_final or temperature == 0.0:
        return mean
    sigma = math.sqrt((1.0 - a_prev) / (1.0 - a_t) * beta)
    z = rng.normal(x_t.shape)
    return mean + temperature * sigma * z


def guided_noise(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    """eps = eps_uncond + w (eps_cond - eps_uncond); w == 1 is a no-op and the
    caller must not have evaluated the unconditional branch."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(
            f"guidance shapes differ: {eps_cond.shape} vs {eps_uncond.shape}"
        )
    return eps_uncond + w * (eps_cond - eps_uncond)


X0_CLIP = 4.0


def sample_frame(denoiser, z, schedule: RespacedSchedule, temperature: float,
                 rng: Rng, shape, guidance: float = 1.0, z_null=None,
                 x0_clip: float | None = X0_CLIP) -> np.ndarray:
    """Run the full reverse chain from Gaussian noise.

    ``denoiser(x_t, t, z) -> eps_hat`` is consulted at every selected
    timestep; with guidance != 1 the unconditional branch runs on ``z_null``
    and the two predictions are combined. ``z`` (and x) may carry a leading
    batch dim for independent parallel chains.
    """
    x = rng.normal(shape)
    for t in schedule.timesteps[::-1]:
        eps = denoiser(x, int(t), z)
        if not np.isfinite(eps).all():
            raise FloatingPointError(f"denoiser produced non-finite values at t={t}")
        if guidance != 1.0:
            if z_null is None:
                raise ValueError("guidance != 1 requires a null condition")
            eps_u = denoiser(x, int(t), z_null)
            eps = guided_noise(eps, eps_u, guidance)
        x = reverse_step(x, eps, int(t), schedule, temperature, rng, x0_clip=x0_clip)
    return x


def schedule_rows(schedule) -> list[tuple[int, float, float]]:
    """(t, alpha_bar, beta) rows for dumping. A parent schedule starts with
    the t=0 anchor row; a respaced one lists exactly its K selected steps."""
    if isinstance(schedule, NoiseSchedule):
        rows = [(0, 1.0, 0.0)]
        rows += [
            (t, float(schedule.alpha_bar[t]), float(schedule.beta[t - 1]))
            for t in range(1, schedule.T + 1)
        ]
        return rows
    return [
        (int(t), float(a), float(b))
        for t, a, b in zip(schedule.timesteps, schedule.alpha_bar, schedule.beta)
    ]
