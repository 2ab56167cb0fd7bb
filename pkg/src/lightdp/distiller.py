"""Consistency distillation of a diffusion teacher into a few-step student.

The teacher bridges ``skip_k`` schedule indices with one DDIM solve; the
student at the noisier level is pulled toward the EMA target at the cleaner
level. When a pruning scheme is given, the student also carries N:M gate
logits and is physically pruned at the snapshot epoch.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .denoiser import Denoiser
from .edm import EDMCoeffs, NoiseSchedule, karras_sigmas, make_denoise_fn, sample_consistency, wrap
from .pruner import (GateLogits, PruningScheme, importance_scores, init_gate_logits, sample_layer_gates,
                     select_and_prune, tau_at)
from .tensor import ContractError, Tensor
from .train import AdamW, Batcher, TrainingError, clip_grads, lr_at

log = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    skip_k: int = 10
    mu_start: float = 0.95
    mu_end: float = 0.999
    epochs: int = 10
    schedule_steps: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    gate_lr: float = 1e-2
    warmup: int = 100
    grad_clip: float = 1.0
    steps_per_epoch: int = 0  # 0 = one full pass
    unit_substeps: bool = False  # teacher solves k unit DDIM steps instead of one
    snapshot_frac: float = 2 / 3
    tau_start: float = 4.0
    tau_end: float = 0.1
    gap_samples: int = 64  # trajectories used for the self-consistency gap metric
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.mu_start <= self.mu_end < 1:
            raise ContractError("need 0 <= mu_start <= mu_end < 1")
        if not 1 <= self.skip_k < self.schedule_steps:
            raise ContractError("need 1 <= skip_k < schedule_steps")

    def mu_at(self, epoch: int) -> float:
        """Linear anneal over epochs, clamped to [mu_start, mu_end]."""
        if self.epochs <= 1:
            return self.mu_start
        frac = min(max(epoch / (self.epochs - 1), 0.0), 1.0)
        return self.mu_start + frac * (self.mu_end - self.mu_start)


def teacher_target(teacher, x, obs, sigmas: np.ndarray, t, k: int, unit_substeps: bool = False):
    """Solve the teacher ODE from ``sigmas[t + k]`` to ``sigmas[t]`` (index 0 is the cleanest).

    ``teacher`` is a numpy ``denoise(x, sigma)`` callable, or a Denoiser bound
    to ``obs``. ``t`` may be an int or one index per batch row. No tape is
    recorded.
    """
    sig = np.asarray(sigmas, dtype=np.float64)
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t + k >= len(sig)):
        raise ContractError(f"t + k outside schedule of {len(sig)} levels")
    x = np.asarray(x)
    hops = [(t + j + 1, t + j) for j in reversed(range(k))] if unit_substeps else [(t + k, t)]
    with T.no_grad():
        fn = make_denoise_fn(teacher, EDMCoeffs(), obs) if isinstance(teacher, Denoiser) else teacher
        for src, dst in hops:
            s_from, s_to = sig[src], sig[dst]
            d = fn(x, s_from)
            ratio = (s_to / s_from).reshape(-1, *([1] * (x.ndim - 1))) if np.ndim(s_from) else s_to / s_from
            x = (d + ratio * (x - d)).astype(x.dtype)
    return x


def ascending_sigmas(steps: int, coeffs: EDMCoeffs) -> np.ndarray:
    """Karras grid ordered from sigma_min (index 0) up to sigma_max."""
    return karras_sigmas(steps, coeffs.sigma_min, coeffs.sigma_max)[::-1].copy()


def consistency_loss(student: Denoiser, target: Denoiser, obs, actions, sigmas: np.ndarray, cfg: DistillConfig,
                     rng: np.random.Generator, teacher=None, coeffs: EDMCoeffs | None = None,
                     masks: Sequence | None = None, t=None, noise=None) -> Tensor:
    """``mean_b ||f_student(a + sigma_{t+k} eps, sigma_{t+k}) - sg f_target(a_hat_t, sigma_t)||^2``.

    ``sigmas`` ascends from sigma_min and ``teacher`` is the frozen solver
    network (a Denoiser or a bound ``denoise`` closure). Hard 0/1 values of
    ``masks`` are applied to the target too. ``t``/``noise`` freeze the draws.
    """
    coeffs = (coeffs or EDMCoeffs()).with_mode("consistency")
    a = np.asarray(actions, dtype=student.dtype)
    b = a.shape[0]
    if b == 0:
        raise ContractError("empty batch")
    if teacher is None:
        raise ContractError("consistency_loss needs a teacher")
    k = cfg.skip_k
    if t is None:
        t = rng.integers(0, len(sigmas) - k, size=b)
    t = np.broadcast_to(np.asarray(t), (b,))
    if noise is None:
        noise = rng.standard_normal(a.shape)
    s_hi = sigmas[t + k]
    x_hi = (a + s_hi[:, None, None] * noise).astype(a.dtype)
    x_lo = teacher_target(teacher, x_hi, obs, sigmas, t, k, cfg.unit_substeps).astype(a.dtype)
    tmask = None if masks is None else [int(round(float(m.data if isinstance(m, Tensor) else m))) for m in masks]
    with T.no_grad():
        tgt = wrap(target, coeffs, x_lo, target.encode(obs), sigmas[t], tmask, check_range=False).data
    pred = wrap(student, coeffs, x_hi, student.encode(obs), s_hi, masks, check_range=False)
    diff = T.sub(pred, T.Tensor(tgt))
    return T.scale(T.square(diff).sum(), 1.0 / b)


def ema_update(target: Denoiser, student: Denoiser, mu: float) -> Denoiser:
    """``target <- mu * target + (1 - mu) * student`` in place, outside any tape."""
    if target.cfg != student.cfg or target.params.keys() != student.params.keys():
        raise ContractError("EMA target and student architectures differ")
    for k, p in target.params.items():
        s = student.params[k].data
        if p.data.shape != s.shape:
            raise ContractError(f"parameter {k} shape {p.data.shape} != {s.shape}")
        if mu == 1.0:
            continue
        if mu == 0.0:
            p.data = s.copy()
            continue
        p.data = (mu * p.data + (1.0 - mu) * s).astype(p.data.dtype)
    return target


def self_consistency_gap(student: Denoiser, teacher, obs, sigmas: np.ndarray, rng: np.random.Generator,
                         coeffs: EDMCoeffs | None = None, levels: int = 4) -> float:
    """Mean ``||f(x_t, t) - f(x_t', t')||`` over points of shared teacher trajectories.

    One trajectory per observation starts at sigma_max and is integrated by
    the teacher with DDIM across ``levels`` evenly spaced grid indices; the
    student's clean predictions at consecutive points are compared.
    """
    coeffs = (coeffs or EDMCoeffs()).with_mode("consistency")
    cfg = student.cfg
    n = len(obs)
    idx = np.unique(np.linspace(0, len(sigmas) - 1, levels + 1).round().astype(int))[::-1]
    x = (rng.standard_normal((n, cfg.horizon, cfg.action_dim)) * sigmas[idx[0]]).astype(student.dtype)
    with T.no_grad():
        feat = student.encode(obs)
        preds = [wrap(student, coeffs, x, feat, sigmas[idx[0]]).data]
        for hi, lo in zip(idx[:-1], idx[1:]):
            x = teacher_target(teacher, x, obs, sigmas, lo, hi - lo)
            preds.append(wrap(student, coeffs, x, feat, sigmas[lo]).data)
    gaps = [np.linalg.norm((p - q).reshape(n, -1), axis=1).mean() for p, q in zip(preds[:-1], preds[1:])]
    return float(np.mean(gaps))


@dataclass
class DistillResult:
    student: Denoiser
    target: Denoiser
    masks: np.ndarray | None = None
    gates: GateLogits | None = None
    history: list[dict] = field(default_factory=list)


def distill(teacher, obs: np.ndarray, actions: np.ndarray, scheme: PruningScheme | None,
            cfg: DistillConfig, coeffs: EDMCoeffs | None = None,
            on_log: Callable[[dict], None] | None = None, student_init: Denoiser | None = None) -> DistillResult:
    """Unified prune + distill loop.

    Student and target start as copies of the teacher. With a scheme, the
    student trains through Gumbel-sampled N:M masks until the snapshot epoch,
    is pruned by the argmax masks, and the target is rebuilt from it.

    ``teacher`` may also be an analytic ``obs -> denoise(x, sigma)`` factory,
    in which case ``student_init`` supplies the starting network.
    """
    coeffs = coeffs or EDMCoeffs()
    rng = np.random.default_rng(cfg.seed)
    sigmas = ascending_sigmas(cfg.schedule_steps, coeffs)
    if isinstance(teacher, Denoiser):
        init = student_init or teacher

        def teacher_fn(o):
            with T.no_grad():
                return make_denoise_fn(teacher, coeffs.with_mode("diffusion"), o)
    else:
        if student_init is None:
            raise ContractError("an analytic teacher needs student_init")
        init, teacher_fn = student_init, teacher
    student = init.copy()
    target = init.copy()
    gates = None
    prune_at = None
    if scheme is not None and not scheme.degenerate:
        scheme.groups(init.cfg.depth)
        gates = init_gate_logits(importance_scores(init), scheme, dtype=init.dtype)
        prune_at = max(1, int(round(cfg.epochs * cfg.snapshot_frac)))
    batcher = Batcher(obs, actions, cfg.batch_size, rng)
    per_epoch = cfg.steps_per_epoch or batcher.batches_per_epoch
    opt = AdamW(student.params, cfg.lr)
    gopt = AdamW(gates.params(), cfg.gate_lr) if gates is not None else None
    gap_obs = obs[rng.choice(len(obs), size=min(cfg.gap_samples, len(obs)), replace=False)]
    gap_seed = cfg.seed + 7919
    masks = None
    history: list[dict] = []
    step, t0 = 0, time.monotonic()

    for epoch in range(cfg.epochs):
        if prune_at is not None and epoch == prune_at:
            student, masks = select_and_prune(student, gates)
            target = student.copy()
            opt = AdamW(student.params, cfg.lr)
            gopt = None
        mu = cfg.mu_at(epoch)
        sampling = gopt is not None
        tau = tau_at(epoch, prune_at, cfg.tau_start, cfg.tau_end) if sampling else None
        total = 0.0
        for _ in range(per_epoch):
            o, a = batcher.next()
            with T.Tape() as tape:
                m = sample_layer_gates(gates, tau, rng) if sampling else None
                loss = consistency_loss(student, target, o, a, sigmas, cfg, rng, teacher=teacher_fn(o),
                                        coeffs=coeffs, masks=m)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"consistency loss non-finite at epoch {epoch}, step {step}")
            params = dict(student.params)
            if sampling:
                params.update(gates.params())
            T.zero_grad(params.values())
            grads = tape.backward(loss, params)
            if sampling:
                gopt.step({k: grads.pop(k) for k in gates.params()})
            clip_grads(grads, cfg.grad_clip)
            opt.step(grads, lr_at(step, cfg.lr, cfg.warmup))
            ema_update(target, student, mu)
            total += value
            step += 1
        gap = self_consistency_gap(student, teacher_fn(gap_obs), gap_obs, sigmas,
                                   np.random.default_rng(gap_seed), coeffs)
        rec = {"phase": "distill", "epoch": epoch, "step": step, "loss": total / per_epoch, "mu": mu,
               "tau": tau, "gap": gap, "depth": student.cfg.depth, "wall": time.monotonic() - t0}
        if gates is not None and sampling:
            rec["logits"] = [[float(v) for v in g.data] for g in gates.logits]
        history.append(rec)
        log.info("distill epoch %d loss %.5f gap %.5f mu %.4f", epoch, rec["loss"], gap, mu)
        if on_log:
            on_log(rec)
    if prune_at is not None and masks is None:
        student, masks = select_and_prune(student, gates)
        target = student.copy()
    return DistillResult(student, target, masks, gates, history)


def consistency_sampler(net: Denoiser, coeffs: EDMCoeffs | None = None, steps: int = 4):
    """Returns ``sample(obs, rng) -> chunks`` doing multistep consistency generation."""
    coeffs = (coeffs or EDMCoeffs()).with_mode("consistency")
    # drop the sigma_min endpoint: the boundary condition makes it an identity evaluation
    sig = karras_sigmas(steps + 1, coeffs.sigma_min, coeffs.sigma_max)[:-1]

    def sample(obs, rng):
        fn = make_denoise_fn(net, coeffs, obs)
        shape = (len(obs), net.cfg.horizon, net.cfg.action_dim)
        return sample_consistency(fn, shape, sig, rng, coeffs.sigma_min, net.dtype)

    return sample
