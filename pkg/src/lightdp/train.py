"""Optimizer, batching and the training loops for the teacher and the gates."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .denoiser import Denoiser
from .edm import EDMCoeffs, score_matching_loss
from .pruner import (GateLogits, PruningScheme, check_masks, importance_scores, init_gate_logits,
                     sample_layer_gates, select_and_prune, tau_at)
from .tensor import ContractError, NumericError, Tensor

log = logging.getLogger(__name__)

LogFn = Callable[[dict], None]


class TrainingError(NumericError):
    """Loss or parameters went non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-6
    warmup: int = 100
    grad_clip: float = 1.0
    steps_per_epoch: int = 0  # 0 = one full pass over the samples
    ema_decay: float = 0.0  # teacher weight averaging; 0 disables
    seed: int = 0


class AdamW:
    """Adam with decoupled weight decay; state is plain arrays so runs replay exactly."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, p in self.params.items():
            g = grads[k].astype(p.data.dtype, copy=False)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data * (1 - lr * self.weight_decay) - lr * upd).astype(p.data.dtype)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if not math.isfinite(norm):
        raise TrainingError("non-finite gradient norm")
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def lr_at(step: int, base: float, warmup: int) -> float:
    return base * min(1.0, (step + 1) / warmup) if warmup > 0 else base


class Batcher:
    """Shuffled minibatches of (observation, action chunk) samples from a seeded stream."""

    def __init__(self, obs: np.ndarray, actions: np.ndarray, batch_size: int, rng: np.random.Generator):
        if len(obs) != len(actions):
            raise ContractError("obs/action sample counts differ")
        if len(obs) == 0:
            raise ContractError("empty dataset")
        self.obs, self.actions = obs, actions
        self.batch_size = min(batch_size, len(obs))
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    @property
    def batches_per_epoch(self) -> int:
        return max(1, len(self.obs) // self.batch_size)

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.obs))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.obs[idx], self.actions[idx]


def ema_params(target: Denoiser, source: Denoiser, mu: float) -> None:
    for k, p in target.params.items():
        p.data = (mu * p.data + (1 - mu) * source.params[k].data).astype(p.data.dtype)


def _check_finite(value: float, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"loss became non-finite at epoch {epoch}, step {step}")


def _grad_step(loss: Tensor, tape: T.Tape, params: dict[str, Tensor], opt: AdamW, lr: float,
               clip: float) -> float:
    T.zero_grad(params.values())
    grads = tape.backward(loss, params)
    norm = clip_grads(grads, clip)
    opt.step(grads, lr)
    return norm


def train_teacher(net: Denoiser, coeffs: EDMCoeffs, obs: np.ndarray, actions: np.ndarray,
                  cfg: TrainConfig, on_log: LogFn | None = None) -> Denoiser:
    """Fits ``net`` with the denoising score-matching loss; returns the (optionally averaged) weights."""
    rng = np.random.default_rng(cfg.seed)
    batcher = Batcher(obs, actions, cfg.batch_size, rng)
    opt = AdamW(net.params, cfg.lr, weight_decay=cfg.weight_decay)
    avg = net.copy() if cfg.ema_decay > 0 else None
    per_epoch = cfg.steps_per_epoch or batcher.batches_per_epoch
    step, t0 = 0, time.monotonic()
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(per_epoch):
            o, a = batcher.next()
            with T.Tape() as tape:
                loss = score_matching_loss(net, coeffs, o, a, rng)
            value = float(loss.data)
            _check_finite(value, epoch, step)
            lr = lr_at(step, cfg.lr, cfg.warmup)
            _grad_step(loss, tape, net.params, opt, lr, cfg.grad_clip)
            if avg is not None:
                ema_params(avg, net, min(cfg.ema_decay, (1 + step) / (10 + step)))
            total += value
            step += 1
        rec = {"phase": "teacher", "epoch": epoch, "step": step, "loss": total / per_epoch, "lr": lr,
               "wall": time.monotonic() - t0}
        log.info("teacher epoch %d loss %.4f", epoch, rec["loss"])
        if on_log:
            on_log(rec)
    return avg if avg is not None else net


@dataclass
class GateTrainResult:
    net: Denoiser
    gates: GateLogits
    importances: np.ndarray
    masks: np.ndarray | None = None
    pruned: Denoiser | None = None
    history: list[dict] = field(default_factory=list)


def train_gates(net: Denoiser, coeffs: EDMCoeffs, obs: np.ndarray, actions: np.ndarray,
                scheme: PruningScheme, cfg: TrainConfig, gate_lr: float = 1e-2,
                tau_start: float = 4.0, tau_end: float = 0.1, snapshot_frac: float = 2 / 3,
                on_log: LogFn | None = None, gates: GateLogits | None = None) -> GateTrainResult:
    """Joint gate + weight training with straight-through N:M masks, then snapshot and fine-tune.

    The first ``snapshot_frac`` of epochs sample a mask per step from the gate
    logits; at the snapshot the argmax masks prune the network, and the
    remaining epochs fine-tune the pruned network with plain training.
    ``gates`` overrides the importance-based initial logits.
    """
    rng = np.random.default_rng(cfg.seed)
    scheme.groups(net.cfg.depth)
    importances = importance_scores(net)
    if gates is None:
        gates = init_gate_logits(importances, scheme, dtype=net.dtype)
    batcher = Batcher(obs, actions, cfg.batch_size, rng)
    opt = AdamW(net.params, cfg.lr, weight_decay=cfg.weight_decay)
    gopt = AdamW(gates.params(), gate_lr)
    per_epoch = cfg.steps_per_epoch or batcher.batches_per_epoch
    gate_epochs = max(1, int(round(cfg.epochs * snapshot_frac))) if cfg.epochs else 0
    history: list[dict] = []
    step, t0 = 0, time.monotonic()
    for epoch in range(gate_epochs):
        tau = tau_at(epoch, gate_epochs, tau_start, tau_end)
        gates.tau = tau
        total = 0.0
        for _ in range(per_epoch):
            o, a = batcher.next()
            with T.Tape() as tape:
                m = sample_layer_gates(gates, tau, rng)
                loss = score_matching_loss(net, coeffs, o, a, rng, masks=m)
            value = float(loss.data)
            _check_finite(value, epoch, step)
            lr = lr_at(step, cfg.lr, cfg.warmup)
            T.zero_grad(list(net.params.values()) + gates.logits)
            grads = tape.backward(loss, {**net.params, **gates.params()})
            ggrads = {k: grads.pop(k) for k in gates.params()}
            clip_grads(grads, cfg.grad_clip)
            opt.step(grads, lr)
            gopt.step(ggrads)
            total += value
            step += 1
        rec = {"phase": "gates", "epoch": epoch, "step": step, "loss": total / per_epoch, "lr": lr,
               "tau": tau, "logits": [[float(v) for v in t.data] for t in gates.logits],
               "wall": time.monotonic() - t0}
        history.append(rec)
        if on_log:
            on_log(rec)
    pruned, masks = select_and_prune(net, gates)
    check_masks(masks, scheme)
    ft = TrainConfig(**{**cfg.__dict__, "epochs": cfg.epochs - gate_epochs, "warmup": 0,
                        "seed": cfg.seed + 1})
    if ft.epochs > 0:
        pruned = train_teacher(pruned, coeffs, obs, actions, ft, on_log=lambda r: (
            history.append({**r, "phase": "finetune"}), on_log and on_log({**r, "phase": "finetune"})))
    return GateTrainResult(net, gates, importances, masks, pruned, history)
