"""Gated transformer denoiser over action chunks.

Each block is pre-LN attention + FFN with adaLN modulation from the
conditioning vector (timestep embedding + observation feature). Block ``i``
is wrapped by a residual gate ``x <- m*block(x) + (1-m)*x``; a constant gate of
0 skips the block entirely, so its output is the input bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

BLOCK_KEYS = (
    "ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo",
    "ln2.g", "ln2.b", "ffn.w1", "ffn.w2", "mod.w", "mod.b",
)
# matrices scored for layer importance
IMPORTANCE_KEYS = ("attn.wq", "attn.wk", "attn.wv", "ffn.w1", "ffn.w2")


@dataclass(frozen=True)
class DenoiserConfig:
    depth: int = 8
    hidden: int = 256
    heads: int = 4
    action_dim: int = 2
    horizon: int = 16
    obs_seq_len: int = 2
    obs_dim: int = 20
    ffn_mult: int = 4

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ContractError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.depth < 1 or self.horizon < 1:
            raise ContractError("depth and horizon must be >= 1")

    @property
    def obs_flat(self) -> int:
        return self.obs_seq_len * self.obs_dim

    def to_dict(self) -> dict:
        return asdict(self)


def _normal(rng, shape, std=0.02):
    return rng.normal(0.0, std, size=shape).astype(np.float32)


def init_params(cfg: DenoiserConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, f = cfg.hidden, cfg.ffn_mult * cfg.hidden
    p: dict[str, np.ndarray] = {
        "obs.w1": _normal(rng, (cfg.obs_flat, d)),
        "obs.b1": np.zeros(d, np.float32),
        "obs.w2": _normal(rng, (d, d)),
        "obs.b2": np.zeros(d, np.float32),
        "time.w1": _normal(rng, (d, d)),
        "time.b1": np.zeros(d, np.float32),
        "time.w2": _normal(rng, (d, d)),
        "time.b2": np.zeros(d, np.float32),
        "in.w": _normal(rng, (cfg.action_dim, d)),
        "in.b": np.zeros(d, np.float32),
        "pos": _normal(rng, (cfg.horizon, d)),
    }
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        p[pre + "ln1.g"] = np.ones(d, np.float32)
        p[pre + "ln1.b"] = np.zeros(d, np.float32)
        for k in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + k] = _normal(rng, (d, d))
        p[pre + "ln2.g"] = np.ones(d, np.float32)
        p[pre + "ln2.b"] = np.zeros(d, np.float32)
        p[pre + "ffn.w1"] = _normal(rng, (d, f))
        p[pre + "ffn.w2"] = _normal(rng, (f, d))
        p[pre + "mod.w"] = _normal(rng, (d, 4 * d))
        p[pre + "mod.b"] = np.zeros(4 * d, np.float32)
    p["out.ln.g"] = np.ones(d, np.float32)
    p["out.ln.b"] = np.zeros(d, np.float32)
    p["out.w"] = np.zeros((d, cfg.action_dim), np.float32)
    p["out.b"] = np.zeros(cfg.action_dim, np.float32)
    return p


def timestep_features(c_noise: np.ndarray, width: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal table, width/2 log-spaced frequencies (sin then cos)."""
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(c_noise, dtype=np.float64).reshape(-1, 1) * 1000.0 * freqs
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if feats.shape[1] < width:
        feats = np.pad(feats, ((0, 0), (0, width - feats.shape[1])))
    return feats.astype(dtype)


class Denoiser:
    """Inner network ``f(c_in * x, c_noise | obs)`` of the EDM-wrapped policy."""

    def __init__(self, cfg: DenoiserConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        raw = params if params is not None else init_params(cfg, seed)
        self.params: dict[str, Tensor] = {
            k: Tensor(np.array(v), requires_grad=True, name=k) for k, v in raw.items()
        }

    # -- bookkeeping -------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def copy(self) -> "Denoiser":
        return Denoiser(self.cfg, {k: v.copy() for k, v in self.state().items()})

    def astype(self, dtype) -> "Denoiser":
        return Denoiser(self.cfg, {k: v.astype(dtype) for k, v in self.state().items()})

    @property
    def dtype(self):
        return self.params["in.w"].dtype

    def block_params(self, i: int) -> dict[str, Tensor]:
        pre = f"blocks.{i}."
        return {k: self.params[pre + k] for k in BLOCK_KEYS}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # -- conditioning ------------------------------------------------------
    def encode(self, obs) -> Tensor:
        """Observation encoder: flat keypoint history -> width-hidden feature."""
        p = self.params
        obs = T.as_tensor(np.asarray(obs.data if isinstance(obs, Tensor) else obs, dtype=self.dtype))
        if obs.ndim == 1:
            obs = obs.reshape(1, -1)
        if obs.shape[-1] != self.cfg.obs_flat:
            raise DimensionError(f"obs width {obs.shape[-1]} != {self.cfg.obs_flat}")
        h = T.gelu(obs @ p["obs.w1"] + p["obs.b1"])
        return h @ p["obs.w2"] + p["obs.b2"]

    def time_embed(self, c_noise) -> Tensor:
        p = self.params
        feats = timestep_features(np.atleast_1d(c_noise), self.cfg.hidden, self.dtype)
        h = T.gelu(T.Tensor(feats) @ p["time.w1"] + p["time.b1"])
        return h @ p["time.w2"] + p["time.b2"]

    # -- core --------------------------------------------------------------
    def block(self, i: int, x: Tensor, cond_act: Tensor) -> Tensor:
        """Block ``i`` applied to tokens ``x`` (B, H, D); ``cond_act`` is gelu(cond)."""
        bp = self.block_params(i)
        cfg = self.cfg
        b, h, d = x.shape
        nh, dh = cfg.heads, d // cfg.heads
        mod = (cond_act @ bp["mod.w"] + bp["mod.b"]).reshape(b, 1, 4 * d)
        s1, t1, s2, t2 = (mod[:, :, j * d:(j + 1) * d] for j in range(4))

        a = T.layernorm(x, bp["ln1.g"], bp["ln1.b"])
        a = a * (s1 + 1.0) + t1
        q = (a @ bp["attn.wq"]).reshape(b, h, nh, dh).transpose(0, 2, 1, 3)
        k = (a @ bp["attn.wk"]).reshape(b, h, nh, dh).transpose(0, 2, 3, 1)
        v = (a @ bp["attn.wv"]).reshape(b, h, nh, dh).transpose(0, 2, 1, 3)
        att = T.softmax(T.scale(q @ k, 1.0 / math.sqrt(dh)), axis=-1)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(b, h, d)
        x = x + o @ bp["attn.wo"]

        f = T.layernorm(x, bp["ln2.g"], bp["ln2.b"])
        f = f * (s2 + 1.0) + t2
        return x + T.gelu(f @ bp["ffn.w1"]) @ bp["ffn.w2"]

    def forward(self, x_in, c_noise, obs_feat: Tensor, masks: Sequence | None = None) -> Tensor:
        """Raw prediction for pre-scaled input ``x_in`` (B, H, A).

        ``masks`` holds one gate per block: 0/1 constants, or scalar Tensors
        for relaxed / straight-through gates during mask learning.
        """
        cfg, p = self.cfg, self.params
        x_in = T.as_tensor(x_in if isinstance(x_in, Tensor) else np.asarray(x_in, dtype=self.dtype))
        if x_in.ndim == 2:
            x_in = x_in.reshape(1, *x_in.shape)
        if x_in.shape[1:] != (cfg.horizon, cfg.action_dim):
            raise DimensionError(
                f"noised actions {x_in.shape[1:]} != (horizon, action_dim) {(cfg.horizon, cfg.action_dim)}"
            )
        if masks is None:
            masks = [1] * cfg.depth
        if len(masks) != cfg.depth:
            raise ContractError(f"{len(masks)} masks for depth {cfg.depth}")
        b = x_in.shape[0]
        cond = self.time_embed(np.broadcast_to(np.asarray(c_noise), (b,))) + obs_feat
        cond_act = T.gelu(cond)
        x = x_in @ p["in.w"] + p["in.b"] + p["pos"] + cond.reshape(b, 1, -1)
        for i, m in enumerate(masks):
            if isinstance(m, Tensor):
                y = self.block(i, x, cond_act)
                x = m * y + (1.0 - m) * x
            elif m == 0:
                continue
            elif m == 1:
                x = self.block(i, x, cond_act)
            else:
                raise ContractError(f"constant gate must be 0 or 1, got {m!r}")
        x = T.layernorm(x, p["out.ln.g"], p["out.ln.b"])
        return x @ p["out.w"] + p["out.b"]

    __call__ = forward

    def prune(self, masks: Sequence[int]) -> "Denoiser":
        """Physically drop blocks whose gate is 0; renumber the survivors."""
        if len(masks) != self.cfg.depth:
            raise ContractError(f"{len(masks)} masks for depth {self.cfg.depth}")
        keep = [i for i, m in enumerate(masks) if int(m) == 1]
        if not keep:
            raise ContractError("cannot prune every block")
        state = self.state()
        new = {k: v.copy() for k, v in state.items() if not k.startswith("blocks.")}
        for j, i in enumerate(keep):
            for key in BLOCK_KEYS:
                new[f"blocks.{j}.{key}"] = state[f"blocks.{i}.{key}"].copy()
        return Denoiser(replace(self.cfg, depth=len(keep)), new)


# -- accounting ---------------------------------------------------------------
def block_param_count(cfg: DenoiserConfig) -> int:
    d, f = cfg.hidden, cfg.ffn_mult * cfg.hidden
    attn = 4 * d * d
    ffn = 2 * d * f
    norms = 4 * d
    modulation = d * 4 * d + 4 * d
    return attn + ffn + norms + modulation


def nonblock_param_count(cfg: DenoiserConfig) -> int:
    d, a = cfg.hidden, cfg.action_dim
    obs = cfg.obs_flat * d + d + d * d + d
    time = 2 * (d * d + d)
    io = a * d + d + cfg.horizon * d + 2 * d + d * a + a
    return obs + time + io


def count_params(cfg: DenoiserConfig, masks: Sequence[int] | None = None) -> int:
    retained = cfg.depth if masks is None else int(sum(int(m) for m in masks))
    return nonblock_param_count(cfg) + retained * block_param_count(cfg)


@dataclass(frozen=True)
class FlopBreakdown:
    encoder: int
    blocks_per_step: int
    head_per_step: int
    steps: int

    @property
    def denoiser_per_step(self) -> int:
        return self.blocks_per_step + self.head_per_step

    @property
    def denoiser(self) -> int:
        return self.steps * self.denoiser_per_step

    @property
    def blocks(self) -> int:
        return self.steps * self.blocks_per_step

    @property
    def total(self) -> int:
        return self.encoder + self.denoiser


def block_macs(cfg: DenoiserConfig) -> int:
    d, h, f = cfg.hidden, cfg.horizon, cfg.ffn_mult * cfg.hidden
    proj = 4 * h * d * d
    scores = 2 * h * h * d  # QK^T and att @ V
    ffn = 2 * h * d * f
    modulation = d * 4 * d
    return proj + scores + ffn + modulation


def head_macs(cfg: DenoiserConfig) -> int:
    """Per-step work outside the blocks: timestep MLP, token in/out projections."""
    d, h, a = cfg.hidden, cfg.horizon, cfg.action_dim
    return 2 * d * d + h * a * d + h * d * a


def encoder_macs(cfg: DenoiserConfig) -> int:
    d = cfg.hidden
    return cfg.obs_flat * d + d * d


def count_flops(cfg: DenoiserConfig, masks: Sequence[int] | None = None, steps: int = 1,
                encoder_flops: int | None = None) -> FlopBreakdown:
    """FLOPs (2 x MACs) for one action prediction: encoder once, denoiser per step.

    ``encoder_flops`` overrides the keypoint-MLP encoder cost, e.g. to model an
    image backbone.
    """
    if steps < 1:
        raise ContractError("steps must be >= 1")
    retained = cfg.depth if masks is None else int(sum(int(m) for m in masks))
    enc = 2 * encoder_macs(cfg) if encoder_flops is None else int(encoder_flops)
    return FlopBreakdown(
        encoder=enc,
        blocks_per_step=2 * retained * block_macs(cfg),
        head_per_step=2 * head_macs(cfg),
        steps=steps,
    )
