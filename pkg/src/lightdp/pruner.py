"""Learnable N:M layer pruning.

Layers are grouped into consecutive runs of M; each group keeps exactly N.
A categorical distribution over the C(M, N) candidate masks of every group is
learned with straight-through Gumbel-softmax while the network weights train
through the gated forward. Logits start from SVD-based layer importance.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .denoiser import IMPORTANCE_KEYS, Denoiser, count_flops, count_params
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PruningScheme:
    n_keep: int
    m_group: int

    def __post_init__(self):
        if not 1 <= self.n_keep <= self.m_group:
            raise ContractError(f"need 1 <= N <= M, got {self.n_keep}:{self.m_group}")

    @classmethod
    def parse(cls, text: str) -> "PruningScheme":
        n, m = text.split(":")
        return cls(int(n), int(m))

    def __str__(self) -> str:
        return f"{self.n_keep}:{self.m_group}"

    @property
    def degenerate(self) -> bool:
        return self.n_keep == self.m_group

    def groups(self, depth: int) -> list[list[int]]:
        if depth % self.m_group:
            raise ContractError(f"depth {depth} not divisible by M={self.m_group}")
        return [list(range(g, g + self.m_group)) for g in range(0, depth, self.m_group)]

    def retained_depth(self, depth: int) -> int:
        return depth // self.m_group * self.n_keep


def enumerate_masks(n_keep: int, m_group: int, allow_full: bool = False) -> np.ndarray:
    """All length-M binary vectors with exactly N ones, lexicographically descending.

    Descending order puts ``[1,1,...,0]`` first, matching the usual listing of
    keep-masks (all-but-last retained first).
    """
    if n_keep >= m_group and not (allow_full and n_keep == m_group):
        raise ContractError(f"N must be < M, got {n_keep}:{m_group}")
    if n_keep < 0:
        raise ContractError("N must be non-negative")
    out = []
    for ones in itertools.combinations(range(m_group), n_keep):
        v = np.zeros(m_group, dtype=np.int64)
        v[list(ones)] = 1
        out.append(v)
    return np.array(out).reshape(len(out), m_group)


def scheme_masks(scheme: PruningScheme) -> np.ndarray:
    return enumerate_masks(scheme.n_keep, scheme.m_group, allow_full=True)


# -- importance -----------------------------------------------------------------
def svd_importance(w, k: int) -> float:
    """Frobenius error of the best rank-``k`` approximation of ``w``."""
    a = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    if k > min(a.shape):
        raise ContractError(f"k={k} exceeds min{a.shape}")
    if k == 0:
        return float(np.linalg.norm(a))
    u, s, v = T.svd(a)
    approx = (u[:, :k] * s[:k]) @ v[:, :k].T
    return float(np.linalg.norm(a - approx))


def layer_importance(block: dict, k: int) -> float:
    """Sum of rank-k residuals over Q, K, V and both FFN matrices of one block."""
    return float(sum(svd_importance(block[key], k) for key in IMPORTANCE_KEYS))


def importance_scores(net: Denoiser, k: int | None = None) -> np.ndarray:
    k = net.cfg.hidden // 4 if k is None else k
    return np.array([layer_importance(net.block_params(i), k) for i in range(net.cfg.depth)])


def normalized_scores(importances: Sequence[float]) -> np.ndarray:
    imp = np.asarray(importances, dtype=np.float64)
    total = imp.sum()
    if total <= 0:
        return np.full(imp.shape, 1.0 / len(imp))
    return imp / total


# -- gate logits ------------------------------------------------------------------
@dataclass
class GateLogits:
    """Per-group logits over candidate masks."""

    scheme: PruningScheme
    logits: list[Tensor]
    tau: float = 1.0

    @property
    def candidates(self) -> np.ndarray:
        return scheme_masks(self.scheme)

    def params(self) -> dict[str, Tensor]:
        return {f"gates.{g}": t for g, t in enumerate(self.logits)}

    def values(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.logits]

    def astype(self, dtype) -> "GateLogits":
        return GateLogits(self.scheme, [t.astype(dtype) for t in self.logits], self.tau)


def init_gate_logits(importances: Sequence[float], scheme: PruningScheme, dtype=np.float32) -> GateLogits:
    """logit(mask) = sum of normalized scores of retained layers, zero-mean per group."""
    imp = np.asarray(importances, dtype=np.float64)
    cands = scheme_masks(scheme)
    logits = []
    for group in scheme.groups(len(imp)):
        p = normalized_scores(imp[group])
        raw = cands @ p
        logits.append(Tensor((raw - raw.mean()).astype(dtype), requires_grad=True, name="gate"))
    return GateLogits(scheme, logits)


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_sample(logits: Tensor, tau: float, rng: np.random.Generator | None = None,
                  noise: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Returns (relaxed softmax weights, straight-through one-hot).

    The one-hot is exact in the forward pass and carries the relaxed weights'
    gradient. Ties break toward the lowest candidate index.
    """
    if tau <= 0:
        raise ContractError("tau must be positive")
    if noise is None:
        noise = gumbel_noise(rng, logits.shape) if rng is not None else np.zeros(logits.shape)
    z = T.scale(T.add(logits, noise.astype(logits.dtype)), 1.0 / tau)
    relaxed = T.softmax(z, axis=-1)
    hard = np.zeros(logits.shape, dtype=logits.dtype)
    hard[int(np.argmax(z.data))] = 1.0
    return relaxed, T.straight_through(hard, relaxed)


def sample_layer_gates(gates: GateLogits, tau: float, rng: np.random.Generator) -> list[Tensor]:
    """Per-layer straight-through gates m_i = sum_c onehot_c * mask_c[i]."""
    cands = gates.candidates.astype(gates.logits[0].dtype)
    out: list[Tensor] = []
    for lg in gates.logits:
        _, st = gumbel_sample(lg, tau, rng)
        m = T.matmul(st.reshape(1, -1), T.Tensor(cands)).reshape(-1)
        out.extend(m[i] for i in range(cands.shape[1]))
    return out


def select_masks(gates: GateLogits) -> np.ndarray:
    """Argmax candidate per group (lowest index on ties), concatenated per layer."""
    cands = gates.candidates
    return np.concatenate([cands[int(np.argmax(t.data))] for t in gates.logits]).astype(np.int64)


def tau_at(epoch: int, epochs: int, tau_start: float = 4.0, tau_end: float = 0.1) -> float:
    if epochs <= 1:
        return tau_end
    frac = min(max(epoch / (epochs - 1), 0.0), 1.0)
    return tau_start + frac * (tau_end - tau_start)


def check_masks(masks: Sequence[int], scheme: PruningScheme) -> None:
    m = np.asarray(masks)
    for group in scheme.groups(len(m)):
        if int(m[group].sum()) != scheme.n_keep:
            raise ContractError(f"group {group} keeps {int(m[group].sum())} layers, expected {scheme.n_keep}")


def select_and_prune(net: Denoiser, gates: GateLogits) -> tuple[Denoiser, np.ndarray]:
    masks = select_masks(gates)
    check_masks(masks, gates.scheme)
    return net.prune(masks), masks


# -- reporting ------------------------------------------------------------------
@dataclass
class PruningReport:
    scheme: str
    importances: list[float]
    gate_scores: list[float]
    logits: list[list[float]]
    masks: list[int]
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    history: list[dict] = field(default_factory=list)

    @classmethod
    def build(cls, net: Denoiser, gates: GateLogits, importances, masks, steps: int = 1) -> "PruningReport":
        cfg = net.cfg
        return cls(
            scheme=str(gates.scheme),
            importances=[float(x) for x in importances],
            gate_scores=[float(x) for x in normalized_scores(importances)],
            logits=[[float(v) for v in t.data] for t in gates.logits],
            masks=[int(m) for m in masks],
            params_before=count_params(cfg),
            params_after=count_params(cfg, masks),
            flops_before=count_flops(cfg, None, steps).total,
            flops_after=count_flops(cfg, masks, steps).total,
        )

    def to_text(self) -> str:
        lines = [f"scheme {self.scheme}"]
        for i, (imp, p) in enumerate(zip(self.importances, self.gate_scores)):
            lines.append(f"layer {i}: importance {imp:.6g} score {p:.4f} keep {self.masks[i]}")
        for g, lg in enumerate(self.logits):
            lines.append(f"group {g} logits " + " ".join(f"{v:+.4f}" for v in lg))
        lines.append(f"params {self.params_before} -> {self.params_after} (-{self.params_before - self.params_after})")
        lines.append(f"flops {self.flops_before} -> {self.flops_after}")
        return "\n".join(lines)

    def to_json(self) -> str:
        d = {k: v for k, v in self.__dict__.items() if k != "history"}
        return json.dumps(d, sort_keys=True)
