"""Command-line front end: ``gqsgd {quantize,allreduce,train,perf,verify,bench}``.

Exit status is 0 on success, 1 when a check fails and 2 on usage or
configuration errors. Every command that takes ``--out`` writes a
``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, plots
from . import rng as rngmod
from . import verify as verifymod
from .algorithm import GqsgdConfig, gqsgd_mean
from .collectives import (
    FloatSum,
    InProcTransport,
    TcpTransport,
    Topology,
    TopoKind,
    allreduce,
    parse_addr,
    schedule_traffic,
)
from .errors import GqsgdError, InvalidArgument, RefusedConfiguration
from .exp_arith import TokenVector, reduce_vec
from .perf_model import (
    DEFAULT_SIZE,
    OMEGA_EXPONENTIAL,
    CostParams,
    Verdict,
    baseline_cost,
    format_table,
    predict,
    quantized_cost,
)
from .quantizer import (
    LevelKind,
    NormSpec,
    build_levels,
    combine_norm_stats,
    encode_shard,
    index_width,
    local_norm_stat,
    quantize_shard,
)
from .trainer import TrainConfig, make_task, run_experiment

DEFAULT_S = {"standard": 255, "exponential": 7}
EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict
    versions: dict = field(default_factory=lambda: {
        "gqsgd": __version__, "numpy": np.__version__, "python": platform.python_version()})
    outputs: list[str] = field(default_factory=list)

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        self.outputs = sorted(self.outputs)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


class UsageError(Exception):
    pass


# -- shared flag groups ------------------------------------------------------

def _common(p: argparse.ArgumentParser, workers: int = 8) -> None:
    p.add_argument("--workers", "--n", dest="workers", type=int, default=workers, help="number of workers")
    p.add_argument("--seed", type=int, default=0, help="root seed (unsigned 64-bit)")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--no-plot", action="store_true", help="skip figure rendering")


def _quant_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scheme", choices=["standard", "exponential"], default="exponential")
    p.add_argument("--s", type=int, default=None, help="levels (default 255 standard, 7 exponential)")
    p.add_argument("--norm", choices=["l2", "linf"], default="linf")
    p.add_argument("--sparse", action="store_true", help="sparse payloads exchanged by Allgather")
    p.add_argument("--width", type=int, choices=[8, 16, 32], default=None, help="accumulator width in bits")
    p.add_argument("--topo", choices=["tree", "ring"], default="tree")


def _net_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--transport", choices=["inproc", "tcp"], default="inproc")
    p.add_argument("--listen", default=None, help="HOST:PORT this process binds (multi-process TCP)")
    p.add_argument("--peers", default=None, help="comma-separated HOST:PORT of every rank, in rank order")
    p.add_argument("--rank", type=int, default=None, help="rank hosted by this process (multi-process TCP)")


def _gq_config(args) -> GqsgdConfig:
    s = args.s if args.s is not None else DEFAULT_S[args.scheme]
    if s < 1:
        raise UsageError("--s must be at least 1")
    return GqsgdConfig(build_levels(LevelKind(args.scheme), s), NormSpec.parse(args.norm), args.sparse, args.width,
                       TopoKind(args.topo))


def _shards(args) -> np.ndarray:
    if getattr(args, "input", None):
        path = Path(args.input)
        xx = np.load(path) if path.suffix == ".npy" else np.loadtxt(path, delimiter=",", ndmin=2)
        xx = np.asarray(xx, dtype=np.float64)
        if xx.ndim != 2:
            raise UsageError("input must be a 2-D array, one row per worker")
        return xx
    gen = rngmod.stream(args.seed, rngmod.DATA)
    return gen.normal(size=(args.workers, args.d))


def _out(args) -> Path | None:
    if args.out is None:
        return None
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def _config_echo(args) -> dict:
    skip = {"func", "out", "config"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k not in skip}


def _fmt(x: float) -> str:
    return repr(float(x))


# -- commands ----------------------------------------------------------------

def cmd_quantize(args) -> int:
    cfg = _gq_config(args)
    xx = _shards(args)
    norm = combine_norm_stats([local_norm_stat(x, cfg.spec) for x in xx], cfg.spec)
    width = index_width(cfg.scheme)
    rows, sizes = [], []
    for i, x in enumerate(xx):
        q = quantize_shard(x, norm, cfg.scheme, rngmod.uniforms(args.seed, rngmod.QUANTIZE, i, 0, x.size))
        blob = encode_shard(q, width)
        sizes.append(len(blob))
        vals = norm * q.signs * cfg.scheme.level(q.level_idx)
        rows += [(i, j, int(q.signs[j]), int(q.level_idx[j]), _fmt(x[j]), _fmt(vals[j])) for j in range(x.size)]
        if (out := _out(args)) is not None:
            (out / f"shard_{i}.bin").write_bytes(blob)
    nnz = sum(1 for r in rows if r[5] != "0.0")
    print(f"scheme={cfg.scheme.kind.value} s={cfg.scheme.s} norm={args.norm} global_norm={norm:.6g}")
    print(f"workers={len(xx)} d={xx.shape[1]} nnz={nnz} bytes_per_shard={sizes[0]} raw32_bytes={4 * xx.shape[1]}")
    if (out := _out(args)) is not None:
        with open(out / "quantized.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["worker", "index", "sign", "level", "input", "value"])
            w.writerows(rows)
        RunManifest("quantize", args.seed, _config_echo(args),
                    outputs=["quantized.csv"] + [f"shard_{i}.bin" for i in range(len(xx))]).write(out)
    return EXIT_OK


def _transport_for(args, n: int):
    """Returns (transport, local ranks)."""
    if args.peers:
        if args.rank is None:
            raise UsageError("--peers needs --rank")
        addrs = {r: parse_addr(a) for r, a in enumerate(args.peers.split(","))}
        if len(addrs) != n:
            raise UsageError(f"--peers lists {len(addrs)} addresses for {n} workers")
        if not 0 <= args.rank < n:
            raise UsageError("--rank out of range")
        if args.listen:
            addrs[args.rank] = parse_addr(args.listen)
        return TcpTransport(addrs, [args.rank]), [args.rank]
    if args.listen or args.rank is not None:
        raise UsageError("--listen/--rank need --peers")
    if args.transport == "tcp":
        return TcpTransport.loopback(n), None
    return InProcTransport(), None


def cmd_allreduce(args) -> int:
    cfg = _gq_config(args)
    xx = _shards(args)
    n = len(xx)
    transport, local = _transport_for(args, n)
    shards = list(xx) if local is None else [x if i in local else None for i, x in enumerate(xx)]
    try:
        res = gqsgd_mean(shards, cfg, seed=args.seed, round_=args.round, transport=transport, local=local)
    finally:
        transport.close()
    exact = xx.mean(axis=0)
    rep, nrep = res.report, res.norm_report
    base = schedule_traffic(Topology.build(n, cfg.topo), xx.shape[1], 4)
    err = float(np.sum((res.mean - exact) ** 2))
    rel = err / float(exact @ exact) if np.any(exact) else math.nan
    lines = [
        f"scheme={cfg.scheme.kind.value} s={cfg.scheme.s} norm={args.norm} topo={args.topo} sparse={cfg.sparse}",
        f"workers={n} d={xx.shape[1]} global_norm={res.norm:.6g}"
        + ("" if local is None else f" local_ranks={local}"),
        f"payload_bytes_total={rep.bytes_sent_total} norm_bytes_total={nrep.bytes_sent_total} "
        f"baseline32_bytes_total={base.bytes_sent_total}",
        f"steps={rep.steps} reduce_invocations={rep.reduce_invocations} messages={rep.messages}",
        f"squared_error={err:.6g} relative_error={rel:.6g}",
    ]
    print("\n".join(lines))
    if (out := _out(args)) is not None:
        with open(out / "mean.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "estimate", "exact"])
            w.writerows((j, _fmt(g), _fmt(e)) for j, (g, e) in enumerate(zip(res.mean, exact)))
        (out / "traffic.txt").write_text("\n".join(lines) + "\n")
        RunManifest("allreduce", args.seed, _config_echo(args), outputs=["mean.csv", "traffic.txt"]).write(out)
    return EXIT_OK


_TRAIN_KEYS = {"n": "workers", "workers": "workers", "d": "d", "task": "task", "steps": "steps",
               "stepsize": "stepsize", "batch_size": "batch_size", "seed": "seed", "scheme": "scheme", "s": "s",
               "norm": "norm", "sparse": "sparse", "width": "width", "topo": "topo", "transport": "transport",
               "baseline": "baseline"}


def load_train_config(path) -> dict:
    """Flat TOML (``n = 8``, ``scheme = "exponential"``, ...) mapped onto ``train`` flag names."""
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    unknown = sorted(set(raw) - set(_TRAIN_KEYS))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return {_TRAIN_KEYS[k]: v for k, v in raw.items()}


def cmd_train(args) -> int:
    task = make_task(args.task, args.workers, args.d, seed=args.seed)
    comp = None if args.baseline else _gq_config(args)
    cfg = TrainConfig(steps=args.steps, stepsize=args.stepsize, batch_size=args.batch_size, seed=args.seed,
                      compression=comp, transport=args.transport, topo=TopoKind(args.topo))
    traj = run_experiment(task, cfg)
    theta = cfg.theta_hat(task.n, task.d)
    last = traj.rows[-1]
    label = "baseline" if comp is None else f"{comp.scheme.kind.value} s={comp.scheme.s}"
    summary = [f"task={args.task} n={task.n} d={task.d} steps={args.steps} run={label}",
               f"stepsize={cfg.eta(task, 0):.6g} theta_hat={theta:.6g} inflation_bound={1 + theta * task.n:.6g}",
               f"final_loss={last[1]:.6g} bytes_total={sum(r[2] for r in traj.rows)}"]
    if task.f_star is not None:
        summary.append(f"final_suboptimality={last[1] - task.f_star:.6g}")
    print("\n".join(summary))
    if (out := _out(args)) is not None:
        traj.write_csv(out / "trajectory.csv")
        (out / "summary.txt").write_text("\n".join(summary) + "\n")
        outputs = ["trajectory.csv", "summary.txt"]
        if not args.no_plot:
            plots.trajectory({label: traj.rows}, out / "trajectory.png", task.f_star)
            outputs.append("trajectory.png")
        RunManifest("train", args.seed, _config_echo(args), outputs=outputs).write(out)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["step", "loss", "bytes", "grad_var"])
        w.writerows((s, repr(l), b, repr(v)) for s, l, b, v in traj.rows)
    return EXIT_OK


def cmd_perf(args) -> int:
    p = CostParams(args.alpha, args.beta, args.gamma, args.size, args.workers, args.rho, args.omega, args.delta)
    pr = predict(p)
    table = format_table(p)
    th = pr.threshold
    if th.verdict is Verdict.BOUNDED:
        headline = f"beta_max = {th.beta_max / p.gamma:.3g} * gamma = {th.beta_max:.6g} B/s"
    else:
        headline = f"beta_max: {th.verdict.value}"
    print(headline)
    print(table)
    if (out := _out(args)) is not None:
        (out / "perf.txt").write_text(headline + "\n" + table + "\n")
        betas = np.logspace(8, 13, 51)
        base = [baseline_cost(p.with_(beta=b)) for b in betas]
        quant = [quantized_cost(p.with_(beta=b)) for b in betas]
        with open(out / "perf.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["beta", "baseline", "quantized", "speedup"])
            w.writerows((_fmt(b), _fmt(x), _fmt(y), int(y < x)) for b, x, y in zip(betas, base, quant))
        outputs = ["perf.txt", "perf.csv"]
        if not args.no_plot:
            bmax = th.beta_max if th.verdict is Verdict.BOUNDED else None
            plots.perf_sweep(betas, base, quant, out / "perf.png", bmax)
            outputs.append("perf.png")
        RunManifest("perf", args.seed, _config_echo(args), outputs=outputs).write(out)
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = verifymod.run_all(args.seed, quick=not args.full) if args.all else [
        verifymod.check_reduce_exact(8), verifymod.check_k_distribution(8, 100_000, args.seed)]
    lines = [c.line() for c in checks]
    failed = sum(not c.passed for c in checks)
    lines.append(f"{len(checks) - failed}/{len(checks)} checks passed")
    print("\n".join(lines))
    if (out := _out(args)) is not None:
        verifymod.write_csv(checks, out / "verify.csv")
        (out / "verify.txt").write_text("\n".join(lines) + "\n")
        outputs = ["verify.csv", "verify.txt"]
        if not args.no_plot:
            plots.bound_checks(checks, out / "verify.png")
            outputs.append("verify.png")
        RunManifest("verify", args.seed, _config_echo(args), outputs=outputs).write(out)
    return EXIT_CHECK if failed else EXIT_OK


def _time(fn, repeat: int) -> float:
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(args) -> int:
    """Wall-clock timings; unlike the other commands its numbers vary between runs."""
    n = args.workers
    d = max(args.size // 4, 1)
    gen = rngmod.stream(args.seed, rngmod.DATA)
    payloads = [gen.normal(size=d).astype(np.float32) for _ in range(n)]
    rows = []
    for topo_kind in (TopoKind.TREE, TopoKind.RING):
        topo = Topology.build(n, topo_kind)
        for tname in args.transports.split(","):
            def run(tname=tname, topo=topo):
                tr = TcpTransport.loopback(n) if tname == "tcp" else InProcTransport()
                try:
                    return allreduce(payloads, FloatSum(), topo, tr)
                finally:
                    tr.close()
            res = run()
            secs = _time(run, args.repeat)
            rows.append((f"{topo_kind.value}/{tname}", topo.steps, res.report.bytes_sent_total, secs))
    # host-side estimate of omega: native float add versus the stochastic exponent reduce
    m = 7 + 1 + math.ceil(math.log2(max(n, 2)))
    e = gen.integers(3, m + 1, size=d).astype(np.int64)  # sums stay below 1/2, so no overflow
    sg = np.where(gen.random(d) < 0.5, -1, 1).astype(np.int8)
    a, b = TokenVector(sg, e), TokenVector(sg[::-1].copy(), e[::-1].copy())
    u = gen.random(d)
    t_native = _time(lambda: payloads[0] + payloads[1], args.repeat)
    t_exp = _time(lambda: reduce_vec(a, b, u, m), args.repeat)
    # the native add touches 4 bytes per element, the token reduce 1
    omega = (t_native / 4) / t_exp if t_exp > 0 else math.nan
    lines = [f"payload_bytes={4 * d} workers={n} repeat={args.repeat}",
             f"{'config':<14} {'steps':>5} {'bytes_total':>12} {'seconds':>10} {'GB/s/worker':>12}"]
    for name, steps, nbytes, secs in rows:
        lines.append(f"{name:<14} {steps:>5} {nbytes:>12} {secs:>10.4f} {nbytes / n / secs / 1e9:>12.3f}")
    lines.append(f"omega_host={omega:.4g} (reference A100 value {OMEGA_EXPONENTIAL:.4g})")
    print("\n".join(lines))
    if (out := _out(args)) is not None:
        (out / "bench.txt").write_text("\n".join(lines) + "\n")
        outputs = ["bench.txt"]
        if not args.no_plot:
            plots.bench_bars([r[0] for r in rows], [r[3] for r in rows], out / "bench.png")
            outputs.append("bench.png")
        RunManifest("bench", args.seed, _config_echo(args), outputs=outputs).write(out)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser(train_defaults: dict | None = None) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gqsgd", description="Global-QSGD quantization, collectives and models")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="quantize shards against their global norm")
    _common(p)
    _quant_flags(p)
    p.add_argument("--d", type=int, default=64, help="shard length for generated input")
    p.add_argument("--input", default=None, help=".npy or CSV, one row per worker")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("allreduce", help="one compressed mean over a simulated or TCP cluster")
    _common(p)
    _quant_flags(p)
    _net_flags(p)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--input", default=None)
    p.add_argument("--round", type=int, default=0)
    p.set_defaults(func=cmd_allreduce)

    p = sub.add_parser("train", help="data-parallel SGD on a synthetic task")
    _common(p)
    _quant_flags(p)
    p.add_argument("--transport", choices=["inproc", "tcp"], default="inproc")
    p.add_argument("--config", type=Path, default=None, help="flat TOML file; flags given explicitly win")
    p.add_argument("--task", choices=["quadratic", "logistic"], default="quadratic")
    p.add_argument("--d", type=int, default=256)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--stepsize", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--baseline", action="store_true", help="exact float mean, no compression")
    p.set_defaults(func=cmd_train, **(train_defaults or {}))

    p = sub.add_parser("perf", help="analytic tree-Allreduce cost model")
    p.add_argument("--alpha", type=float, default=0.0, help="latency per step [s]")
    p.add_argument("--beta", type=float, default=53.9e9, help="bandwidth [B/s]")
    p.add_argument("--gamma", type=float, default=2e12, help="native reduction speed [B/s]")
    p.add_argument("--omega", type=float, default=OMEGA_EXPONENTIAL, help="quantized / native reduction speed")
    p.add_argument("--rho", type=float, default=4.0)
    p.add_argument("--size", type=float, default=float(DEFAULT_SIZE), help="gradient bytes")
    p.add_argument("--workers", type=int, default=8)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; the model is deterministic")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_perf)

    p = sub.add_parser("verify", help="statistical and exhaustive checks of the guarantees")
    p.add_argument("--all", action="store_true", help="run the whole suite")
    p.add_argument("--full", action="store_true", help="full trial counts (slower)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="transport and reduce throughput")
    _common(p, workers=4)
    p.add_argument("--size", type=int, default=DEFAULT_SIZE, help="payload bytes per worker")
    p.add_argument("--transports", default="inproc,tcp")
    p.add_argument("--repeat", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return ap


def _parse(argv) -> argparse.Namespace:
    argv = sys.argv[1:] if argv is None else list(argv)
    defaults = None
    if argv and argv[0] == "train":
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config", type=Path, default=None)
        known, _ = pre.parse_known_args(argv[1:])
        if known.config is not None:
            try:
                defaults = load_train_config(known.config)
            except (OSError, ValueError, UsageError) as exc:
                build_parser().error(f"bad config {known.config}: {exc}")
    return build_parser(defaults).parse_args(argv)


def main(argv=None) -> int:
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, InvalidArgument, RefusedConfiguration) as exc:
        print(f"gqsgd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GqsgdError as exc:
        print(f"gqsgd: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
