"""Networks as batched closed-loop policies for :func:`lightdp.pushsim.evaluate`."""

from __future__ import annotations

import numpy as np

from .denoiser import Denoiser
from .distiller import consistency_sampler
from .edm import EDMCoeffs, NoiseSchedule, make_denoise_fn, sample_euler
from .pushsim import Policy


class DiffusionPolicy(Policy):
    """Teacher-style policy: Euler PF-ODE sampling over a Karras grid of ``steps`` levels."""

    def __init__(self, net: Denoiser, steps: int = 100, coeffs: EDMCoeffs | None = None):
        self.net, self.steps = net, steps
        self.coeffs = (coeffs or EDMCoeffs()).with_mode("diffusion")
        c = self.coeffs
        self.sigmas = NoiseSchedule(steps, c.sigma_min, c.sigma_max).sigmas

    def __call__(self, obs, states, env_ids, rng):
        fn = make_denoise_fn(self.net, self.coeffs, obs)
        shape = (len(obs), self.net.cfg.horizon, self.net.cfg.action_dim)
        return sample_euler(fn, shape, self.sigmas, rng, self.net.dtype)


class ConsistencyPolicy(Policy):
    """Distilled-student policy: multistep consistency sampling with ``steps`` evaluations."""

    def __init__(self, net: Denoiser, steps: int = 4, coeffs: EDMCoeffs | None = None):
        self.net, self.steps = net, steps
        self._sample = consistency_sampler(net, coeffs, steps)

    def __call__(self, obs, states, env_ids, rng):
        return self._sample(np.asarray(obs), rng)


def make_policy(net: Denoiser, mode: str, steps: int) -> Policy:
    if mode == "diffusion":
        return DiffusionPolicy(net, steps)
    if mode == "consistency":
        return ConsistencyPolicy(net, steps)
    raise ValueError(f"unknown EDM mode {mode!r}")
