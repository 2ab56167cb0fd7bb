"""``lightdp`` command line: data generation, training, pruning, distillation, evaluation, benchmarks.

Exit codes: 0 success, 1 contract error or bad usage, 2 numeric/training failure.
Relative output paths are placed under ``$LIGHTDP_OUT`` (default ``runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import pushsim
from .denoiser import Denoiser, count_params
from .distiller import distill
from .harness import Checkpoint, MetricsLog, RunConfig, bench_latency, report, report_csv, report_text
from .policy import make_policy
from .pruner import PruningReport, PruningScheme
from .tensor import ContractError, NumericError
from .train import TrainConfig, train_gates, train_teacher

log = logging.getLogger("lightdp")


class UsageError(ContractError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def out_root() -> Path:
    return Path(os.environ.get("LIGHTDP_OUT", "runs"))


def _out(path: str) -> Path:
    p = Path(path)
    p = p if p.is_absolute() else out_root() / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _in(path: str) -> Path:
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    q = out_root() / p
    return q if q.exists() else p


def _config(args) -> RunConfig:
    cfg = RunConfig.load(_in(args.config)) if args.config else RunConfig()
    return cfg.with_overrides(args.set or [])


def _write_config(cfg: RunConfig, out: Path) -> None:
    out.with_suffix(".config.txt").write_text(cfg.to_text())


def _samples(path) -> tuple[np.ndarray, np.ndarray]:
    return pushsim.read_dataset(_in(path)).samples()


def cmd_gen_data(args, cfg: RunConfig) -> int:
    env = pushsim.PushTEnv(cfg.env_config())
    episodes = args.episodes if args.episodes is not None else cfg.episodes
    seed = args.seed if args.seed is not None else cfg.data_seed
    data, results = pushsim.generate_dataset(env, episodes, seed, cfg.horizon)
    out = _out(args.out)
    pushsim.write_dataset(out, data)
    ok = sum(r.success for r in results)
    print(f"wrote {len(data)} episodes ({data.n_samples} samples) to {out}; expert success {ok}/{len(results)}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    obs, act = _samples(args.data)
    net = Denoiser(cfg.denoiser_config(), seed=cfg.seed)
    out = _out(args.out)
    metrics = MetricsLog(out.with_suffix(".metrics.jsonl"))
    net = train_teacher(net, cfg.coeffs(), obs, act, cfg.train_config(), on_log=metrics)
    Checkpoint.from_net(net).save(out)
    _write_config(cfg, out)
    print(f"saved teacher ({count_params(net.cfg)} params) to {out}")
    return 0


def cmd_prune(args, cfg: RunConfig) -> int:
    ck = Checkpoint.load(_in(args.ckpt))
    if ck.mode != "diffusion":
        raise ContractError("prune expects a diffusion-mode checkpoint")
    scheme = PruningScheme.parse(args.scheme or cfg.scheme)
    obs, act = _samples(args.data)
    out = _out(args.out)
    metrics = MetricsLog(out.with_suffix(".metrics.jsonl"))
    res = train_gates(ck.network(), cfg.coeffs(), obs, act, scheme, cfg.train_config(), gate_lr=cfg.gate_lr,
                      tau_start=cfg.tau_start, tau_end=cfg.tau_end, snapshot_frac=cfg.snapshot_frac,
                      on_log=metrics)
    Checkpoint.from_net(res.pruned, "diffusion", res.gates, res.masks).save(out)
    rep = PruningReport.build(res.net, res.gates, res.importances, res.masks, steps=cfg.teacher_steps)
    out.with_suffix(".prune.txt").write_text(rep.to_text() + "\n")
    out.with_suffix(".prune.json").write_text(rep.to_json() + "\n")
    _write_config(cfg, out)
    print(rep.to_text())
    print(f"saved depth-{res.pruned.cfg.depth} network ({count_params(res.pruned.cfg)} params) to {out}")
    return 0


def cmd_distill(args, cfg: RunConfig) -> int:
    ck = Checkpoint.load(_in(args.ckpt))
    if ck.mode != "diffusion":
        raise ContractError("distill expects a diffusion-mode teacher")
    scheme_text = args.scheme or cfg.scheme
    scheme = None if scheme_text == "none" else PruningScheme.parse(scheme_text)
    obs, act = _samples(args.data)
    out = _out(args.out)
    metrics = MetricsLog(out.with_suffix(".metrics.jsonl"))
    res = distill(ck.network(), obs, act, scheme, cfg.distill_config(), cfg.coeffs(), on_log=metrics)
    Checkpoint.from_net(res.student, "consistency", res.gates, res.masks).save(out)
    _write_config(cfg, out)
    print(f"saved depth-{res.student.cfg.depth} consistency student to {out}")
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    ck = Checkpoint.load(_in(args.ckpt))
    if ck.mode != "diffusion":
        raise ContractError("finetune continues score-matching training; consistency checkpoints are not supported")
    obs, act = _samples(args.data)
    out = _out(args.out)
    tc = cfg.train_config()
    if args.epochs is not None:
        tc = TrainConfig(**{**tc.__dict__, "epochs": args.epochs})
    metrics = MetricsLog(out.with_suffix(".metrics.jsonl"))
    net = train_teacher(ck.network(), cfg.coeffs(), obs, act, tc, on_log=metrics)
    Checkpoint(net.cfg, net.state(), "diffusion", ck.gate_logits, ck.scheme, ck.masks).save(out)
    _write_config(cfg, out)
    print(f"saved fine-tuned network to {out}")
    return 0


def _default_steps(ck: Checkpoint, cfg: RunConfig) -> int:
    return cfg.teacher_steps if ck.mode == "diffusion" else cfg.student_steps


def cmd_eval(args, cfg: RunConfig) -> int:
    path = _in(args.ckpt)
    ck = Checkpoint.load(path)
    steps = args.steps or _default_steps(ck, cfg)
    episodes = args.episodes or cfg.eval_episodes
    policy = make_policy(ck.network(), ck.mode, steps)
    env = pushsim.PushTEnv(cfg.env_config())
    res = pushsim.evaluate(policy, episodes, cfg.eval_seed, cfg.max_steps, cfg.exec_horizon, env)
    body = {"checkpoint": str(path), "mode": ck.mode, "depth": ck.cfg.depth, "steps": steps, **res.to_dict()}
    dest = _out(args.out) if args.out else path.with_name(path.name[:-len(".ckpt")] + ".eval.json")
    dest.write_text(json.dumps(body, indent=1) + "\n")
    print(f"success rate {res.success_rate:.3f}  mean max coverage {res.mean_max_coverage:.3f}  ({episodes} episodes)")
    return 0


def cmd_bench(args, cfg: RunConfig) -> int:
    path = _in(args.ckpt)
    ck = Checkpoint.load(path)
    steps = args.steps or _default_steps(ck, cfg)
    rep = bench_latency(ck.network(), steps, args.trials or cfg.bench_trials, cfg.bench_warmup, ck.mode)
    dest = _out(args.out) if args.out else path.with_name(path.name[:-len(".ckpt")] + ".bench.json")
    dest.write_text(json.dumps(rep.to_dict(), indent=1) + "\n")
    print(f"mean {rep.mean_ms:.3f} ms  p95 {rep.p95_ms:.3f} ms  encoder {rep.encoder_ms:.3f} ms  "
          f"denoiser {rep.denoiser_ms:.3f} ms ({steps} x {rep.denoiser_step_ms:.3f} ms)")
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    run_dir = _in(args.run_dir)
    rows = report(run_dir, args.teacher)
    text = report_text(rows)
    (run_dir / "report.txt").write_text(text + "\n")
    (run_dir / "report.csv").write_text(report_csv(rows))
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lightdp", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="RunConfig key/value file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="generate expert demonstrations")
    s.add_argument("--episodes", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="train the diffusion teacher")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("prune", help="learn N:M gates, prune and fine-tune a diffusion network")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--scheme")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_prune)

    s = sub.add_parser("distill", help="consistency-distill (and optionally prune) a teacher")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--scheme", help="N:M or 'none'")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_distill)

    s = sub.add_parser("finetune", help="continue score-matching training of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("eval", help="closed-loop success rate on the push task")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--episodes", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("bench", help="single-threaded per-action latency")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--trials", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("report", help="comparison table for a run directory")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--teacher", default="teacher", help="checkpoint stem of the reference row")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        return args.fn(args, _config(args))
    except NumericError as e:  # includes training divergence
        print(f"error: {e}", file=sys.stderr)
        return 2
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        build_parser().print_usage(sys.stderr)
        return 1
    except (ContractError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
