import json

import numpy as np
import pytest

from lightdp import cli
from lightdp.denoiser import Denoiser, DenoiserConfig, count_flops, count_params
from lightdp.harness import Checkpoint, MetricsLog, RunConfig, bench_latency, report, report_csv, report_text
from lightdp.pruner import GateLogits, PruningScheme, init_gate_logits
from lightdp.tensor import ContractError

TINY = ["depth=4", "hidden=8", "heads=2", "horizon=4", "train_epochs=1", "train_steps_per_epoch=3",
        "batch_size=8", "teacher_steps=3", "student_steps=2", "eval_episodes=2",
        "distill_epochs=2", "distill_steps_per_epoch=2", "skip_k=1", "warmup=1", "bench_trials=10",
        "bench_warmup=1"]


def _run(*argv):
    args = []
    for kv in TINY:
        args += ["--set", kv]
    return cli.main(args + list(argv))


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv("LIGHTDP_OUT", str(tmp_path))
    return tmp_path


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    import os
    old = os.environ.get("LIGHTDP_OUT")
    os.environ["LIGHTDP_OUT"] = str(d)
    try:
        assert _run("gen-data", "--episodes", "2", "--seed", "7", "--out", "d.ldpt") == 0
    finally:
        if old is None:
            os.environ.pop("LIGHTDP_OUT")
        else:
            os.environ["LIGHTDP_OUT"] = old
    return d


# -- RunConfig ------------------------------------------------------------------------------
def test_config_text_round_trip():
    cfg = RunConfig(seed=3, scheme="1:4", lr=3e-4, unit_substeps=True)
    assert RunConfig.from_text(cfg.to_text()) == cfg
    assert len(cfg.to_text().splitlines()) == len(RunConfig.keys())


def test_config_rejects_unknown_and_malformed():
    with pytest.raises(ContractError, match="unknown key"):
        RunConfig.from_text("depth = 4\nwidth = 3\n")
    with pytest.raises(ContractError):
        RunConfig.from_text("depth 4\n")
    with pytest.raises(ContractError):
        RunConfig.from_text("depth = four\n")
    with pytest.raises(ContractError):
        RunConfig.from_text("scheme = 5:2\n")


def test_config_comments_and_overrides():
    cfg = RunConfig.from_text("# run\nseed = 5  # trailing\n\n")
    assert cfg.seed == 5
    assert cfg.with_overrides(["seed=9", "hidden = 32"]).hidden == 32


def test_config_views():
    cfg = RunConfig(depth=6, hidden=32, lr=5e-4)
    assert cfg.denoiser_config().depth == 6 and cfg.denoiser_config().obs_flat == 40
    assert cfg.train_config().lr == 5e-4
    assert cfg.distill_config().schedule_steps == cfg.teacher_steps
    assert cfg.pruning_scheme() == PruningScheme(1, 2)


# -- Checkpoint -----------------------------------------------------------------------------
def test_checkpoint_bytes_round_trip(tmp_path, small_net):
    gates = init_gate_logits(np.arange(4.0), PruningScheme(1, 2))
    ck = Checkpoint.from_net(small_net, "consistency", gates, [1, 0, 0, 1])
    path = tmp_path / "a.ckpt"
    ck.save(path)
    back = Checkpoint.load(path)
    assert back.to_bytes() == path.read_bytes()
    assert back.mode == "consistency" and back.cfg == small_net.cfg
    assert back.masks.tolist() == [1, 0, 0, 1]
    assert all(np.array_equal(a, b) for a, b in zip(back.gate_logits, gates.values()))
    for k, v in small_net.state().items():
        assert np.array_equal(back.params[k], v)


def test_checkpoint_forward_identical(small_net, rng):
    net = Checkpoint.from_bytes(Checkpoint.from_net(small_net).to_bytes()).network()
    obs = rng.uniform(-1, 1, (2, small_net.cfg.obs_flat)).astype(np.float32)
    x = rng.standard_normal((2, small_net.cfg.horizon, 2)).astype(np.float32)
    assert np.array_equal(net.forward(x, 0.3, net.encode(obs)).data,
                          small_net.forward(x, 0.3, small_net.encode(obs)).data)


def test_checkpoint_layout_header(small_net):
    raw = Checkpoint.from_net(small_net).to_bytes()
    assert raw[:4] == b"LDCK"
    assert int.from_bytes(raw[4:8], "little") == 1 and raw[8] == 0
    cfg = small_net.cfg
    assert np.frombuffer(raw[9:41], "<u4").tolist() == [cfg.depth, cfg.hidden, cfg.heads, cfg.action_dim,
                                                          cfg.horizon, cfg.obs_seq_len, cfg.obs_dim, cfg.ffn_mult]


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing", "version"])
def test_checkpoint_rejects_damage(small_net, damage):
    raw = bytearray(Checkpoint.from_net(small_net).to_bytes())
    if damage == "magic":
        raw[0] = ord("X")
    elif damage == "truncate":
        raw = raw[:-5]
    elif damage == "trailing":
        raw += b"\0"
    else:
        raw[4] = 7
    with pytest.raises(ContractError):
        Checkpoint.from_bytes(bytes(raw))


# -- MetricsLog --------------------------------------------------------------------------------
def test_metrics_log_monotone_steps(tmp_path):
    log = MetricsLog(tmp_path / "m.jsonl")
    for rec in ({"loss": 1.0, "wall": 0.1}, {"loss": 0.5, "wall": 0.2}, {"loss": 0.2, "step": 1}):
        log(rec)
    back = MetricsLog.read(tmp_path / "m.jsonl")
    assert [r["step"] for r in back] == [1, 2, 3]
    assert MetricsLog.without_timing(back)[0] == {"loss": 1.0, "step": 1}
    assert back[2]["opt_step"] == 1 and "opt_step" not in back[0]


# -- latency -------------------------------------------------------------------------------------
def test_bench_components_add_up():
    net = Denoiser(DenoiserConfig(depth=2, hidden=16, heads=2))
    rep = bench_latency(net, 4, trials=10, warmup=2)
    assert abs(rep.component_sum_ms - rep.mean_ms) <= 0.05 * rep.mean_ms
    assert rep.p95_ms >= min(rep.mean_ms, rep.p95_ms)
    with pytest.raises(ContractError):
        bench_latency(net, 4, trials=5)


def test_bench_denoiser_linear_in_steps():
    net = Denoiser(DenoiserConfig(depth=2, hidden=32))
    few = bench_latency(net, 4, trials=200, warmup=20)
    many = bench_latency(net, 100, trials=10, warmup=2)
    ratio = many.denoiser_ms / few.denoiser_ms
    assert abs(ratio / 25 - 1) <= 0.2


def test_bench_shallower_is_faster():
    deep = bench_latency(Denoiser(DenoiserConfig(depth=8, hidden=32)), 10, trials=15, warmup=3)
    shallow = bench_latency(Denoiser(DenoiserConfig(depth=2, hidden=32)), 10, trials=15, warmup=3)
    assert shallow.denoiser_step_ms < deep.denoiser_step_ms


# -- report -----------------------------------------------------------------------------------------
def _fake_run(tmp_path):
    cfg8, cfg2 = DenoiserConfig(depth=8, hidden=64), DenoiserConfig(depth=2, hidden=64)
    for stem, cfg, steps, ms, succ in (("teacher", cfg8, 100, 40.0, 0.9), ("student", cfg2, 4, 0.8, 0.85)):
        Checkpoint.from_net(Denoiser(cfg)).save(tmp_path / f"{stem}.ckpt")
        (tmp_path / f"{stem}.eval.json").write_text(json.dumps({"steps": steps, "success_rate": succ}))
        (tmp_path / f"{stem}.bench.json").write_text(json.dumps({"steps": steps, "mean_ms": ms}))
    Checkpoint.from_net(Denoiser(cfg2)).save(tmp_path / "waiting.ckpt")


def test_report_ratios(tmp_path):
    _fake_run(tmp_path)
    rows = {r["config"]: r for r in report(tmp_path)}
    t, s = rows["teacher"], rows["student"]
    assert t["params_ratio"] == 1.0 and t["flops_reduction"] == 0.0 and t["speedup"] == 1.0
    assert t["success_delta"] == 0.0
    assert s["speedup"] == pytest.approx(50.0)
    assert s["success_delta"] == pytest.approx(-0.05)
    ft = count_flops(DenoiserConfig(depth=8, hidden=64), None, 100).total
    fs = count_flops(DenoiserConfig(depth=2, hidden=64), None, 4).total
    assert s["flops_reduction"] == pytest.approx(1 - fs / ft)
    assert s["flops_reduction"] >= 0.85
    assert s["params"] == count_params(DenoiserConfig(depth=2, hidden=64))
    assert rows["waiting"]["success_rate"] == "pending" and rows["waiting"]["speedup"] == "pending"


def test_report_formats(tmp_path):
    _fake_run(tmp_path)
    rows = report(tmp_path)
    text = report_text(rows)
    assert text.splitlines()[1].startswith("teacher")
    csv_lines = report_csv(rows).splitlines()
    assert csv_lines[0].startswith("config,depth,steps") and len(csv_lines) == 4


def test_report_empty_dir(tmp_path):
    with pytest.raises(ContractError):
        report(tmp_path)


# -- CLI ----------------------------------------------------------------------------------------------
def test_cli_bad_flags_exit_one(out, capsys):
    assert cli.main(["train"]) == 1
    assert cli.main(["fly"]) == 1
    assert cli.main(["--set", "nonsense=1", "report", "--run-dir", "x"]) == 1
    assert "usage" in capsys.readouterr().err


def test_cli_missing_file_exit_one(out):
    assert cli.main(["eval", "--ckpt", "nope.ckpt"]) == 1


def test_cli_gen_data_impossible_budget_exit_one(out):
    assert cli.main(["--set", "max_steps=5", "gen-data", "--episodes", "1", "--out", "x.ldpt"]) == 1


def test_cli_gen_data_byte_exact(out, data_dir):
    assert _run("gen-data", "--episodes", "2", "--seed", "7", "--out", "again.ldpt") == 0
    assert (out / "again.ldpt").read_bytes() == (data_dir / "d.ldpt").read_bytes()


def test_cli_pipeline(out, data_dir):
    data = str(data_dir / "d.ldpt")
    assert _run("train", "--data", data, "--out", "teacher.ckpt") == 0
    assert (out / "teacher.config.txt").exists()
    assert _run("prune", "--ckpt", "teacher.ckpt", "--data", data, "--scheme", "1:2", "--out", "pruned.ckpt") == 0
    pruned = Checkpoint.load(out / "pruned.ckpt")
    assert pruned.cfg.depth == 2 and int(pruned.masks.sum()) == 2
    rep = json.loads((out / "pruned.prune.json").read_text())
    assert rep["params_after"] == count_params(pruned.cfg)
    assert rep["params_before"] == count_params(Checkpoint.load(out / "teacher.ckpt").cfg)
    assert _run("distill", "--ckpt", "teacher.ckpt", "--data", data, "--scheme", "1:2", "--out", "student.ckpt") == 0
    student = Checkpoint.load(out / "student.ckpt")
    assert student.mode == "consistency" and student.cfg.depth == 2
    assert _run("finetune", "--ckpt", "pruned.ckpt", "--data", data, "--epochs", "1", "--out", "ft.ckpt") == 0
    assert _run("finetune", "--ckpt", "student.ckpt", "--data", data, "--out", "x.ckpt") == 1
    for stem in ("teacher", "student"):
        assert _run("--set", "max_steps=16", "eval", "--ckpt", f"{stem}.ckpt", "--episodes", "2") == 0
        assert _run("bench", "--ckpt", f"{stem}.ckpt") == 0
    ev = json.loads((out / "student.eval.json").read_text())
    assert ev["steps"] == 2 and len(ev["episodes"]) == 2
    assert _run("report", "--run-dir", str(out)) == 0
    assert (out / "report.csv").read_text().splitlines()[1].startswith("teacher")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_numeric_failure_exit_two(out, data_dir):
    data = str(data_dir / "d.ldpt")
    assert _run("--set", "lr=1e30", "--set", "grad_clip=1e30", "train", "--data", data, "--out", "bad.ckpt") == 2


def test_cli_runs_are_deterministic(out, data_dir):
    data = str(data_dir / "d.ldpt")
    for name in ("a", "b"):
        assert _run("train", "--data", data, "--out", f"{name}.ckpt") == 0
    assert (out / "a.ckpt").read_bytes() == (out / "b.ckpt").read_bytes()
    ma = MetricsLog.without_timing(MetricsLog.read(out / "a.metrics.jsonl"))
    mb = MetricsLog.without_timing(MetricsLog.read(out / "b.metrics.jsonl"))
    assert ma == mb and len(ma) == 1
