"""EDM preconditioning, noise schedules, the denoising loss and ODE samplers.

Samplers work on any ``denoise(x, sigma) -> x0_hat`` callable so the same code
drives networks and analytic oracles. ``sigma`` is passed as a float.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .denoiser import Denoiser
from .tensor import ContractError, NumericError, Tensor

DenoiseFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class EDMCoeffs:
    sigma_data: float = 0.5
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    mode: str = "diffusion"  # or "consistency"

    def __post_init__(self):
        if self.mode not in ("diffusion", "consistency"):
            raise ContractError(f"unknown EDM mode {self.mode!r}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ContractError("need 0 < sigma_min < sigma_max")

    def with_mode(self, mode: str) -> "EDMCoeffs":
        return EDMCoeffs(self.sigma_data, self.sigma_min, self.sigma_max, mode)

    def c_skip(self, sigma):
        sd2 = self.sigma_data**2
        if self.mode == "diffusion":
            return sd2 / (sigma**2 + sd2)
        s = sigma - self.sigma_min
        return sd2 / (s**2 + sd2)

    def c_out(self, sigma):
        sd = self.sigma_data
        if self.mode == "diffusion":
            return sigma * sd / np.sqrt(sigma**2 + sd**2)
        return (sigma - self.sigma_min) * sd / np.sqrt(sigma**2 + sd**2)

    def c_in(self, sigma):
        return 1.0 / np.sqrt(sigma**2 + self.sigma_data**2)

    def c_noise(self, sigma):
        return np.log(sigma) / 4.0

    def loss_weight(self, sigma):
        sd = self.sigma_data
        return (sigma**2 + sd**2) / (sigma * sd) ** 2


def karras_sigmas(steps: int, sigma_min: float = 0.002, sigma_max: float = 80.0, rho: float = 7.0) -> np.ndarray:
    """Descending rho-warped grid from sigma_max to sigma_min (``[sigma_max]`` if steps == 1)."""
    if steps < 1:
        raise ContractError("steps must be >= 1")
    if steps == 1:
        return np.array([sigma_max])
    ramp = np.linspace(0.0, 1.0, steps)
    lo, hi = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
    sig = (hi + ramp * (lo - hi)) ** rho
    sig[0], sig[-1] = sigma_max, sigma_min
    return sig


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0

    @property
    def sigmas(self) -> np.ndarray:
        return karras_sigmas(self.steps, self.sigma_min, self.sigma_max, self.rho)


def _broadcast_sigma(sigma, x):
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim == 0:
        return s
    return s.reshape(-1, *([1] * (np.ndim(x) - 1)))


def wrap(net: Denoiser, coeffs: EDMCoeffs, x_t, obs_feat: Tensor, sigma, masks: Sequence | None = None,
         check_range: bool = True) -> Tensor:
    """``c_skip * x + c_out * f(c_in * x, c_noise)``.

    ``sigma`` is a scalar or one value per batch row. Records onto the active
    tape like any other op; ``x_t`` is treated as a constant.
    """
    sig = np.asarray(sigma, dtype=np.float64)
    if check_range and (np.any(sig < coeffs.sigma_min * (1 - 1e-9)) or np.any(sig > coeffs.sigma_max * (1 + 1e-9))):
        raise ContractError(f"sigma {sig} outside [{coeffs.sigma_min}, {coeffs.sigma_max}]")
    xd = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t)
    dtype = net.dtype
    xd = xd.astype(dtype, copy=False)
    if xd.ndim == 2:
        xd = xd[None]
    b = xd.shape[0]
    sig_b = np.broadcast_to(sig, (b,)) if sig.ndim == 0 else sig
    s = _broadcast_sigma(sig_b, xd)
    c_skip = coeffs.c_skip(s).astype(dtype)
    c_out = coeffs.c_out(s).astype(dtype)
    c_in = coeffs.c_in(s).astype(dtype)
    f = net.forward(xd * c_in, coeffs.c_noise(sig_b), obs_feat, masks)
    return T.add(T.Tensor(xd * c_skip), T.mul(f, T.Tensor(c_out)))


def make_denoise_fn(net: Denoiser, coeffs: EDMCoeffs, obs, masks=None) -> DenoiseFn:
    """Bind observation features once; returns the numpy ``denoise(x, sigma)`` closure."""
    feat = net.encode(obs)

    def denoise(x, sigma):
        return wrap(net, coeffs, x, feat, sigma, masks).data

    return denoise


def score_matching_loss(net: Denoiser, coeffs: EDMCoeffs, obs, actions, rng: np.random.Generator,
                        masks: Sequence | None = None, p_mean: float = -1.2, p_std: float = 1.2,
                        sigma=None, noise=None) -> Tensor:
    """EDM-weighted denoising loss ``mean_b w(sigma) * ||D(a + sigma*eps) - a||^2``.

    ``sigma``/``noise`` may be supplied to freeze the draw (gradient checks).
    """
    a = np.asarray(actions, dtype=net.dtype)
    b = a.shape[0]
    if b == 0:
        raise ContractError("empty batch")
    if sigma is None:
        sigma = np.exp(p_mean + p_std * rng.standard_normal(b))
    if noise is None:
        noise = rng.standard_normal(a.shape)
    sigma = np.asarray(sigma, dtype=np.float64)
    s = _broadcast_sigma(sigma, a)
    a_t = a + (s * noise).astype(a.dtype)
    feat = net.encode(obs)
    d = wrap(net, coeffs, a_t, feat, sigma, masks, check_range=False)
    err = T.sub(d, T.Tensor(a))
    w = coeffs.loss_weight(sigma) / b
    per = T.square(err).sum(axis=(1, 2))
    return T.tsum(T.mul(per, T.Tensor(w.astype(net.dtype))))


def sample_euler(denoise: DenoiseFn, shape, sigmas: np.ndarray, rng: np.random.Generator,
                 dtype=np.float32) -> np.ndarray:
    """Euler integration of the probability-flow ODE from sigmas[0] down to 0."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if np.any(np.diff(sigmas) >= 0):
        raise ContractError("schedule must be strictly descending")
    x = (rng.standard_normal(shape) * sigmas[0]).astype(dtype)
    grid = np.append(sigmas, 0.0)
    for i in range(len(sigmas)):
        s, s_next = grid[i], grid[i + 1]
        d0 = denoise(x, float(s))
        slope = (x - d0) / s
        x = (x + (s_next - s) * slope).astype(dtype)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite sample at Euler step {i}")
    return x


def ddim_step(denoise: DenoiseFn, x, sigma_from: float, sigma_to: float) -> np.ndarray:
    """Deterministic DDIM in variance-exploding coordinates."""
    if not sigma_to < sigma_from:
        raise ContractError(f"ddim_step needs sigma_to < sigma_from, got {sigma_to} >= {sigma_from}")
    d0 = denoise(x, sigma_from)
    return d0 + (sigma_to / sigma_from) * (x - d0)


def sample_consistency(denoise: DenoiseFn, shape, sigmas: Sequence[float], rng: np.random.Generator,
                       sigma_min: float = 0.002, dtype=np.float32) -> np.ndarray:
    """Multistep consistency sampling: denoise to clean, re-noise to the next grid level."""
    sigmas = list(sigmas)
    x = (rng.standard_normal(shape) * sigmas[0]).astype(dtype)
    x0 = denoise(x, float(sigmas[0]))
    for s in sigmas[1:]:
        z = rng.standard_normal(shape)
        x = (x0 + math.sqrt(max(s * s - sigma_min * sigma_min, 0.0)) * z).astype(dtype)
        x0 = denoise(x, float(s))
        if not np.all(np.isfinite(x0)):
            raise NumericError(f"non-finite sample at consistency level sigma={s}")
    return x0


def gaussian_denoiser(mu: float, s: float) -> DenoiseFn:
    """Exact posterior mean for data ~ N(mu, s^2): the analytic-score oracle."""

    def denoise(x, sigma):
        x = np.asarray(x, dtype=np.float64)
        sigma = np.asarray(sigma, dtype=np.float64)
        if sigma.ndim == 1 and x.ndim > 1:  # one sigma per batch row
            sigma = sigma.reshape(-1, *([1] * (x.ndim - 1)))
        return mu + (s * s) / (s * s + sigma**2) * (x - mu)

    return denoise


def gaussian_ode_solution(x, mu: float, s: float, sigma_from: float, sigma_to: float):
    """Closed-form PF-ODE transport for N(mu, s^2) data."""
    return mu + (np.asarray(x) - mu) * math.sqrt((s * s + sigma_to**2) / (s * s + sigma_from**2))
