"""Data-parallel SGD on synthetic tasks, with optional Global-QSGD compression."""

from __future__ import annotations

import csv
import enum
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngmod
from .algorithm import GqsgdConfig, gqsgd_mean, simulate_mean, theta_bound
from .collectives import Topology, TopoKind, TrafficReport, schedule_traffic
from .errors import Diverged, InvalidArgument

DIVERGENCE_NORM = 1e8


class TaskKind(enum.Enum):
    QUADRATIC = "quadratic"
    LOGISTIC = "logistic"


@dataclass
class Task:
    """``f(x) = (1/n) sum_i f_i(x)``; worker ``i`` holds rows ``A[i]`` and targets ``b[i]``.

    Quadratic: ``f_i(x) = ||A_i x - b_i||^2 / (2m)``.
    Logistic: ``f_i(x) = mean(log(1 + exp(-b_i * A_i x))) + reg/2 ||x||^2`` with labels in {-1, +1}.
    """

    kind: TaskKind
    A: np.ndarray
    b: np.ndarray
    reg: float = 0.0
    x_star: np.ndarray | None = None
    f_star: float | None = None
    L: float = 1.0
    mu: float = 0.0

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[1]

    @property
    def d(self) -> int:
        return self.A.shape[2]

    def local_loss(self, i: int, x) -> float:
        z = self.A[i] @ x
        if self.kind is TaskKind.QUADRATIC:
            r = z - self.b[i]
            return float(r @ r) / (2 * self.m)
        return float(np.mean(np.logaddexp(0.0, -self.b[i] * z))) + 0.5 * self.reg * float(x @ x)

    def loss(self, x) -> float:
        return sum(self.local_loss(i, x) for i in range(self.n)) / self.n

    def local_grad(self, i: int, x, rows=None) -> np.ndarray:
        A, b = self.A[i], self.b[i]
        if rows is not None:
            A, b = A[rows], b[rows]
        z = A @ x
        if self.kind is TaskKind.QUADRATIC:
            return A.T @ (z - b) / len(b)
        sig = 0.5 * (1.0 - np.tanh(0.5 * b * z))  # sigmoid(-b z), overflow-free
        return -(A.T @ (b * sig)) / len(b) + self.reg * x

    def grad(self, x) -> np.ndarray:
        return sum(self.local_grad(i, x) for i in range(self.n)) / self.n


def make_quadratic(n: int, d: int, m: int | None = None, noise: float = 0.01, spread: float = 0.0,
                   seed: int = 0) -> Task:
    """Least squares with a known optimum; ``spread`` makes the workers' optima differ."""
    m = m if m is not None else max(2 * d // n, d // 4, 8)
    gen = rngmod.stream(seed, rngmod.DATA)
    A = gen.normal(size=(n, m, d)) / math.sqrt(d)
    x_true = gen.normal(size=d)
    local = x_true + spread * gen.normal(size=(n, d))
    b = np.einsum("imd,id->im", A, local) + noise * gen.normal(size=(n, m))
    H = np.einsum("imd,ime->de", A, A) / (n * m)
    rhs = np.einsum("imd,im->d", A, b) / (n * m)
    x_star = np.linalg.solve(H, rhs)
    eig = np.linalg.eigvalsh(H)
    task = Task(TaskKind.QUADRATIC, A, b, x_star=x_star, L=float(eig[-1]), mu=float(eig[0]))
    task.f_star = task.loss(x_star)
    return task


def make_logistic(n: int, d: int, m: int | None = None, reg: float = 1e-3, seed: int = 0) -> Task:
    m = m if m is not None else max(2 * d // n, 16)
    gen = rngmod.stream(seed, rngmod.DATA)
    A = gen.normal(size=(n, m, d)) / math.sqrt(d)
    w = gen.normal(size=d) * 3.0
    p = 1.0 / (1.0 + np.exp(-A @ w))
    b = np.where(gen.random(size=(n, m)) < p, 1.0, -1.0)
    H = np.einsum("imd,ime->de", A, A) / (n * m)
    L = 0.25 * float(np.linalg.eigvalsh(H)[-1]) + reg
    return Task(TaskKind.LOGISTIC, A, b, reg=reg, L=L, mu=reg)


def make_task(kind: TaskKind | str, n: int, d: int, seed: int = 0, **kw) -> Task:
    kind = TaskKind(kind)
    return make_quadratic(n, d, seed=seed, **kw) if kind is TaskKind.QUADRATIC else make_logistic(n, d, seed=seed, **kw)


@dataclass
class TrainConfig:
    steps: int = 200
    stepsize: float | Callable[[int], float] | None = None
    batch_size: int | None = None
    seed: int = 0
    compression: GqsgdConfig | None = None
    transport: str = "inproc"
    topo: TopoKind = TopoKind.TREE

    def theta_hat(self, n: int, d: int) -> float:
        return 0.0 if self.compression is None else theta_bound(self.compression.scheme, n, d)

    def eta(self, task: Task, k: int) -> float:
        if self.stepsize is None:
            return 1.0 / (2 * task.L * (1 + self.theta_hat(task.n, task.d) * task.n))
        eta = self.stepsize(k) if callable(self.stepsize) else float(self.stepsize)
        if eta <= 0:
            raise InvalidArgument("stepsize must be positive")
        return eta


@dataclass
class WorkerState:
    rank: int
    x: np.ndarray


def _minibatch(task: Task, cfg: TrainConfig, i: int, k: int):
    if cfg.batch_size is None or cfg.batch_size >= task.m:
        return None
    gen = rngmod.stream(cfg.seed, rngmod.MINIBATCH, i, k)
    return np.sort(gen.choice(task.m, size=cfg.batch_size, replace=False))


@dataclass
class StepInfo:
    grad_estimate: np.ndarray
    bytes: int
    report: TrafficReport


def aggregate_gradients(grads, cfg: TrainConfig, k: int, transport=None) -> StepInfo:
    n, d = len(grads), grads[0].size
    if cfg.compression is None:
        # exact float64 mean; traffic accounted as a 32-bit Allreduce
        report = schedule_traffic(Topology.build(n, cfg.topo), d, 4)
        return StepInfo(np.mean(grads, axis=0), report.bytes_sent_total, report)
    res = gqsgd_mean(grads, cfg.compression, seed=cfg.seed, round_=k, transport=transport)
    total = res.total_report
    return StepInfo(res.mean, total.bytes_sent_total, total)


def sgd_step(states: list[WorkerState], task: Task, cfg: TrainConfig, k: int, transport=None):
    """One synchronous step; every worker applies the identical update."""
    grads = [task.local_grad(st.rank, st.x, _minibatch(task, cfg, st.rank, k)) for st in states]
    info = aggregate_gradients(grads, cfg, k, transport)
    eta = cfg.eta(task, k)
    new = [WorkerState(st.rank, st.x - eta * info.grad_estimate) for st in states]
    if not np.all(np.isfinite(new[0].x)) or np.linalg.norm(new[0].x) > DIVERGENCE_NORM:
        raise Diverged(f"iterate norm exceeded {DIVERGENCE_NORM:g} at step {k}")
    return new, info


@dataclass
class Trajectory:
    rows: list[tuple[int, float, int, float]] = field(default_factory=list)
    report: TrafficReport | None = None
    wall_clock: float = 0.0
    x: np.ndarray | None = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "bytes", "grad_var"])
            for step, loss, nbytes, var in self.rows:
                w.writerow([step, repr(loss), nbytes, repr(var)])


def run_experiment(task: Task, cfg: TrainConfig, x0=None) -> Trajectory:
    """Run ``cfg.steps`` steps; row ``k`` holds the loss at iterate ``k`` and the step's traffic."""
    from .collectives import make_transport

    start = time.perf_counter()
    x0 = np.zeros(task.d) if x0 is None else np.asarray(x0, dtype=np.float64)
    states = [WorkerState(i, x0.copy()) for i in range(task.n)]
    transport = make_transport(cfg.transport, task.n) if cfg.compression is not None else None
    traj = Trajectory()
    report = None
    try:
        for k in range(cfg.steps):
            x = states[0].x
            loss = task.loss(x)
            states, info = sgd_step(states, task, cfg, k, transport)
            err = info.grad_estimate - task.grad(x)
            traj.rows.append((k, loss, info.bytes, float(err @ err)))
            report = info.report if report is None else report.merge(info.report)
            if any(not np.array_equal(states[0].x, st.x) for st in states):
                raise AssertionError("worker iterates diverged from each other")
        traj.rows.append((cfg.steps, task.loss(states[0].x), 0, 0.0))
    finally:
        if transport is not None:
            transport.close()
    traj.report = report
    traj.x = states[0].x
    traj.wall_clock = time.perf_counter() - start
    return traj


@dataclass
class VarianceDecomposition:
    measured: float
    bound: float
    radius: float
    signal: float
    noise: float


def variance_decomposition(task: Task, cfg: GqsgdConfig, x, batch_size: int, trials: int = 2000,
                           seed: int = 0) -> VarianceDecomposition:
    """Monte-Carlo ``E||G(stochastic grads) - grad f(x)||^2`` against its decomposition bound.

    Bound: ``theta * mean_i ||grad f_i(x)||^2 + (theta + 1/n) * mean_i E||g_i - grad f_i(x)||^2``.
    Measures the single-shot operator, i.e. without re-rounding inside the Allreduce.
    """
    n, d = task.n, task.d
    theta = theta_bound(cfg.scheme, n, d)
    full = np.stack([task.local_grad(i, x) for i in range(n)])
    gbar = full.mean(axis=0)
    gen = rngmod.stream(seed, rngmod.TRIAL)
    errs, noise = [], []
    for t in range(trials):
        grads = np.stack([task.local_grad(i, x, np.sort(gen.choice(task.m, batch_size, replace=False)))
                          for i in range(n)])
        noise.append(np.mean(np.sum((grads - full) ** 2, axis=1)))
        out = simulate_mean(grads, cfg, 1, gen).exact[0]
        errs.append(float(np.sum((out - gbar) ** 2)))
    errs = np.asarray(errs)
    signal = float(np.mean(np.sum(full ** 2, axis=1)))
    noise_mean = float(np.mean(noise))
    bound = theta * signal + (theta + 1.0 / n) * noise_mean
    return VarianceDecomposition(float(errs.mean()), bound, 4 * float(errs.std(ddof=1)) / math.sqrt(trials),
                                 signal, noise_mean)


def iterations_to_reach(losses, f_star: float, target: float) -> int | None:
    """First step whose suboptimality is at or below ``target``."""
    hits = np.flatnonzero(np.asarray(losses) - f_star <= target)
    return int(hits[0]) if hits.size else None
