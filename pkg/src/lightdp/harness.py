"""Run configuration, checkpoints, metrics logs, latency benchmarks and reports."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from threadpoolctl import threadpool_limits

from .denoiser import Denoiser, DenoiserConfig, count_flops, count_params
from .edm import EDMCoeffs, make_denoise_fn, wrap
from .pruner import GateLogits, PruningScheme
from .tensor import ContractError, Tensor

# -- run configuration ------------------------------------------------------------------


@dataclass
class RunConfig:
    """Every tunable of a pipeline run, serialized as ``key = value`` lines."""

    seed: int = 0
    # architecture
    depth: int = 8
    hidden: int = 64
    heads: int = 4
    horizon: int = 16
    obs_seq_len: int = 2
    ffn_mult: int = 4
    # EDM
    sigma_data: float = 0.5
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    p_mean: float = -1.2
    p_std: float = 1.2
    teacher_steps: int = 100
    student_steps: int = 4
    # data and environment
    episodes: int = 500
    data_seed: int = 0
    max_steps: int = 300
    coverage_threshold: float = 0.9
    exec_horizon: int = 8
    eval_episodes: int = 100
    eval_seed: int = 10_000
    # teacher training
    train_epochs: int = 4
    train_steps_per_epoch: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-6
    warmup: int = 100
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    # pruning and distillation
    scheme: str = "1:2"
    prune_during: str = "distill"  # or "pretrain"
    gate_lr: float = 1e-2
    tau_start: float = 4.0
    tau_end: float = 0.1
    snapshot_frac: float = 2 / 3
    distill_epochs: int = 6
    distill_steps_per_epoch: int = 100
    distill_lr: float = 1e-4
    skip_k: int = 10
    mu_start: float = 0.95
    mu_end: float = 0.999
    unit_substeps: bool = False
    # benchmarking
    bench_trials: int = 50
    bench_warmup: int = 20

    def __post_init__(self):
        if self.prune_during not in ("distill", "pretrain"):
            raise ContractError(f"prune_during must be 'distill' or 'pretrain', got {self.prune_during!r}")
        if self.scheme != "none":
            PruningScheme.parse(self.scheme)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values: dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"config line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ContractError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(types[key], val, key)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{k} = {_format_value(getattr(self, k))}\n" for k in self.keys())

    def with_overrides(self, pairs: list[str]) -> "RunConfig":
        text = self.to_text() + "".join(p + "\n" for p in pairs)
        return RunConfig.from_text(text)

    # -- views for the other modules --
    def denoiser_config(self, depth: int | None = None) -> DenoiserConfig:
        from .pushsim import OBS_FRAME_DIM, ACTION_DIM
        return DenoiserConfig(depth=depth or self.depth, hidden=self.hidden, heads=self.heads, action_dim=ACTION_DIM,
                              horizon=self.horizon, obs_seq_len=self.obs_seq_len, obs_dim=OBS_FRAME_DIM,
                              ffn_mult=self.ffn_mult)

    def coeffs(self, mode: str = "diffusion") -> EDMCoeffs:
        return EDMCoeffs(self.sigma_data, self.sigma_min, self.sigma_max, mode)

    def pruning_scheme(self) -> PruningScheme | None:
        return None if self.scheme == "none" else PruningScheme.parse(self.scheme)

    def train_config(self):
        from .train import TrainConfig
        return TrainConfig(epochs=self.train_epochs, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, warmup=self.warmup, grad_clip=self.grad_clip,
                           steps_per_epoch=self.train_steps_per_epoch, ema_decay=self.ema_decay, seed=self.seed)

    def distill_config(self):
        from .distiller import DistillConfig
        return DistillConfig(skip_k=self.skip_k, mu_start=self.mu_start, mu_end=self.mu_end,
                             epochs=self.distill_epochs, schedule_steps=self.teacher_steps,
                             batch_size=self.batch_size, lr=self.distill_lr, gate_lr=self.gate_lr,
                             warmup=self.warmup, grad_clip=self.grad_clip,
                             steps_per_epoch=self.distill_steps_per_epoch, unit_substeps=self.unit_substeps,
                             snapshot_frac=self.snapshot_frac, tau_start=self.tau_start, tau_end=self.tau_end,
                             seed=self.seed)

    def env_config(self):
        from .pushsim import EnvConfig
        return EnvConfig(coverage_threshold=self.coverage_threshold, max_steps=self.max_steps)


def _parse_value(typ, val: str, key: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if val.lower() not in ("true", "false", "1", "0"):
                raise ValueError(val)
            return val.lower() in ("true", "1")
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        return val
    except ValueError:
        raise ContractError(f"config key {key!r}: cannot parse {val!r} as {typ}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- checkpoints ------------------------------------------------------------------
CKPT_MAGIC = b"LDCK"
CKPT_VERSION = 1
_CFG_FIELDS = ("depth", "hidden", "heads", "action_dim", "horizon", "obs_seq_len", "obs_dim", "ffn_mult")
_MODES = ("diffusion", "consistency")


@dataclass
class Checkpoint:
    """Network weights plus what is needed to run them.

    Layout (all little-endian): magic, u32 version, u8 mode, 8 x u32 config,
    u32 parameter count, then per parameter (sorted by name): u16 name
    length, name bytes, u8 ndim, ndim x u32 dims, float32 data. Then u8 gate
    flag [u32 N, u32 M, u32 groups, per group u32 length + float32 logits],
    and u8 mask flag [u32 length, u8 per layer].
    """

    cfg: DenoiserConfig
    params: dict[str, np.ndarray]
    mode: str = "diffusion"
    gate_logits: list[np.ndarray] | None = None
    scheme: PruningScheme | None = None
    masks: np.ndarray | None = None

    @classmethod
    def from_net(cls, net: Denoiser, mode: str = "diffusion", gates: GateLogits | None = None,
                 masks=None) -> "Checkpoint":
        return cls(net.cfg, {k: v.astype(np.float32) for k, v in net.state().items()}, mode,
                   gates.values() if gates is not None else None, gates.scheme if gates is not None else None,
                   None if masks is None else np.asarray(masks, dtype=np.uint8))

    def network(self) -> Denoiser:
        return Denoiser(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def to_bytes(self) -> bytes:
        if self.mode not in _MODES:
            raise ContractError(f"unknown mode {self.mode!r}")
        out = io.BytesIO()
        out.write(CKPT_MAGIC)
        out.write(struct.pack("<IB", CKPT_VERSION, _MODES.index(self.mode)))
        out.write(struct.pack("<8I", *(getattr(self.cfg, f) for f in _CFG_FIELDS)))
        out.write(struct.pack("<I", len(self.params)))
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f4")
            nb = name.encode()
            out.write(struct.pack("<H", len(nb)) + nb)
            out.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.write(arr.tobytes())
        if self.gate_logits is not None:
            out.write(struct.pack("<BIII", 1, self.scheme.n_keep, self.scheme.m_group, len(self.gate_logits)))
            for lg in self.gate_logits:
                out.write(struct.pack("<I", len(lg)) + np.asarray(lg, dtype="<f4").tobytes())
        else:
            out.write(b"\x00")
        if self.masks is not None:
            m = np.asarray(self.masks, dtype=np.uint8)
            out.write(struct.pack("<BI", 1, len(m)) + m.tobytes())
        else:
            out.write(b"\x00")
        return out.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        r = _Reader(raw)
        if r.take(4) != CKPT_MAGIC:
            raise ContractError("not a checkpoint (bad magic)")
        version, mode = r.unpack("<IB")
        if version != CKPT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        if mode >= len(_MODES):
            raise ContractError(f"bad mode byte {mode}")
        cfg = DenoiserConfig(**dict(zip(_CFG_FIELDS, r.unpack("<8I"))))
        (n,) = r.unpack("<I")
        params = {}
        for _ in range(n):
            (ln,) = r.unpack("<H")
            name = r.take(ln).decode()
            (nd,) = r.unpack("<B")
            shape = r.unpack(f"<{nd}I")
            size = int(np.prod(shape)) if nd else 1
            params[name] = np.frombuffer(r.take(4 * size), "<f4").reshape(shape).astype(np.float32)
        gates, scheme, masks = None, None, None
        (flag,) = r.unpack("<B")
        if flag:
            nk, mg, ng = r.unpack("<III")
            scheme = PruningScheme(nk, mg)
            gates = []
            for _ in range(ng):
                (ln,) = r.unpack("<I")
                gates.append(np.frombuffer(r.take(4 * ln), "<f4").astype(np.float32))
        (flag,) = r.unpack("<B")
        if flag:
            (ln,) = r.unpack("<I")
            masks = np.frombuffer(r.take(ln), np.uint8).copy()
        if r.pos != len(raw):
            raise ContractError("trailing bytes in checkpoint")
        return cls(cfg, params, _MODES[mode], gates, scheme, masks)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ContractError("truncated checkpoint")
        b = self.raw[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


# -- metrics -------------------------------------------------------------------
class MetricsLog:
    """Line-delimited JSON records with strictly increasing global ``step``.

    A trainer's own step counter (which restarts per stage) is kept as ``opt_step``.
    """

    TIMING_KEYS = ("wall",)

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        self._step = 0
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def __call__(self, rec: dict) -> None:
        rec = dict(rec)
        if "step" in rec:
            rec["opt_step"] = rec["step"]
        self._step += 1
        rec["step"] = self._step
        self.records.append(rec)
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    @staticmethod
    def read(path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]

    @classmethod
    def without_timing(cls, records: list[dict]) -> list[dict]:
        """Records minus wall-clock fields, which differ between otherwise identical runs."""
        return [{k: v for k, v in r.items() if k not in cls.TIMING_KEYS} for r in records]


# -- latency ----------------------------------------------------------------------
@dataclass
class LatencyReport:
    steps: int
    trials: int
    mean_ms: float
    p95_ms: float
    encoder_ms: float
    denoiser_ms: float
    denoiser_step_ms: float

    @property
    def component_sum_ms(self) -> float:
        return self.encoder_ms + self.denoiser_ms

    def to_dict(self) -> dict:
        return {**dataclasses.asdict(self), "component_sum_ms": self.component_sum_ms}


def bench_latency(net: Denoiser, steps: int, trials: int = 50, warmup: int = 20, mode: str = "diffusion",
                  seed: int = 0) -> LatencyReport:
    """Per-action wall time of encoder once + ``steps`` denoiser evaluations, single-threaded.

    The first ``warmup`` trials are discarded. Component times come from the
    same trials as the total.
    """
    if trials < 10:
        raise ContractError("bench needs trials >= 10")
    coeffs = EDMCoeffs(mode=mode)
    sigmas = np.geomspace(coeffs.sigma_max, coeffs.sigma_min, steps)
    rng = np.random.default_rng(seed)
    obs = rng.uniform(-1, 1, (1, net.cfg.obs_flat)).astype(net.dtype)
    x0 = rng.standard_normal((1, net.cfg.horizon, net.cfg.action_dim)).astype(net.dtype)
    tot, enc, den = [], [], []
    clock = time.perf_counter
    with threadpool_limits(limits=1):
        for i in range(warmup + trials):
            t0 = clock()
            feat = net.encode(obs)
            t1 = clock()
            x = x0
            for s in sigmas:
                x = wrap(net, coeffs, x, feat, float(s)).data
            t2 = clock()
            if i >= warmup:
                tot.append(t2 - t0)
                enc.append(t1 - t0)
                den.append(t2 - t1)
    tot_ms = np.array(tot) * 1e3
    return LatencyReport(steps, trials, float(tot_ms.mean()), float(np.percentile(tot_ms, 95)),
                         float(np.mean(enc) * 1e3), float(np.mean(den) * 1e3), float(np.mean(den) * 1e3 / steps))


# -- reporting ------------------------------------------------------------------
REPORT_COLUMNS = ("config", "depth", "steps", "params", "flops", "latency_ms", "success_rate",
                  "params_ratio", "flops_reduction", "speedup", "success_delta")


def _row_for(ckpt_path: Path) -> dict:
    ck = Checkpoint.load(ckpt_path)
    stem = ckpt_path.name[:-len(".ckpt")]
    row: dict[str, Any] = {"config": stem, "depth": ck.cfg.depth, "mode": ck.mode}
    ev = ckpt_path.with_name(stem + ".eval.json")
    be = ckpt_path.with_name(stem + ".bench.json")
    evald = json.loads(ev.read_text()) if ev.exists() else None
    bench = json.loads(be.read_text()) if be.exists() else None
    steps = (evald or bench or {}).get("steps")
    row["steps"] = steps if steps is not None else "pending"
    row["params"] = count_params(ck.cfg)
    if steps is not None:
        fb = count_flops(ck.cfg, None, steps)
        if fb.total != fb.encoder + steps * fb.denoiser_per_step:
            raise ContractError(f"{stem}: FLOPs components do not add up")
        row["flops"] = fb.total
    else:
        row["flops"] = "pending"
    row["latency_ms"] = bench["mean_ms"] if bench else "pending"
    row["success_rate"] = evald["success_rate"] if evald else "pending"
    return row


def report(run_dir, teacher: str = "teacher") -> list[dict]:
    """Comparison rows for every ``*.ckpt`` in ``run_dir``, with ratios against the teacher row."""
    run_dir = Path(run_dir)
    paths = sorted(run_dir.glob("*.ckpt"))
    if not paths:
        raise ContractError(f"no checkpoints in {run_dir}")
    rows = [_row_for(p) for p in paths]
    rows.sort(key=lambda r: (r["config"] != teacher, r["config"]))
    base = next((r for r in rows if r["config"] == teacher), None)

    def ratio(num, den):
        if not isinstance(num, (int, float)) or not isinstance(den, (int, float)) or den == 0:
            return "pending"
        return num / den

    for r in rows:
        if base is None:
            r.update(params_ratio="pending", flops_reduction="pending", speedup="pending", success_delta="pending")
            continue
        r["params_ratio"] = ratio(r["params"], base["params"])
        fr = ratio(r["flops"], base["flops"])
        r["flops_reduction"] = 1.0 - fr if fr != "pending" else fr
        r["speedup"] = ratio(base["latency_ms"], r["latency_ms"])
        both = all(isinstance(v, float) for v in (r["success_rate"], base["success_rate"]))
        r["success_delta"] = r["success_rate"] - base["success_rate"] if both else "pending"
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def report_text(rows: list[dict]) -> str:
    widths = [max(len(c), *(len(_fmt(r.get(c, ""))) for r in rows)) for c in REPORT_COLUMNS]
    lines = ["  ".join(c.ljust(w) for c, w in zip(REPORT_COLUMNS, widths))]
    for r in rows:
        lines.append("  ".join(_fmt(r.get(c, "")).ljust(w) for c, w in zip(REPORT_COLUMNS, widths)))
    return "\n".join(lines)


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()
