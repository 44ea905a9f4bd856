"""Runnable statistical and exhaustive checks of the quantizer's guarantees.

Every check returns a :class:`BoundCheck`; ``passed`` is
``empirical <= bound + radius`` where ``radius`` is four standard errors of
the Monte-Carlo estimate (zero for exact checks).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product

import numpy as np

from . import rng as rngmod
from .algorithm import GqsgdConfig, iter_batches, simulate_mean, sparsity_bound, theta_bound
from .errors import OverflowDetected
from .exp_arith import ExpToken, reduce_pair, sample_k
from .quantizer import LevelKind, NormSpec, build_levels, quantize_levels

Z = 4.0


@dataclass
class BoundCheck:
    name: str
    empirical: float
    bound: float
    trials: int = 0
    radius: float = 0.0
    detail: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.empirical <= self.bound + self.radius)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name}: empirical={self.empirical:.6g} bound={self.bound:.6g} "
                f"radius={self.radius:.3g} trials={self.trials} {self.detail}").rstrip()


def _moments(xx, cfg: GqsgdConfig, trials: int, seed: int, field_: str = "mean"):
    """Per-element sum and sum of squares of the estimator, plus squared-error statistics."""
    xx = np.asarray(xx, dtype=np.float64)
    n, d = xx.shape
    xbar = xx.mean(axis=0)
    gen = rngmod.stream(seed, rngmod.TRIAL)
    s1 = np.zeros(d)
    s2 = np.zeros(d)
    err = []
    nnz = []
    for t in iter_batches(trials, n, d):
        out = simulate_mean(xx, cfg, t, gen)
        g = getattr(out, field_)
        dev = g - xbar
        s1 += dev.sum(axis=0)
        s2 += (dev ** 2).sum(axis=0)
        err.append(np.sum(dev ** 2, axis=1))
        nnz.append(out.nnz)
    return xbar, s1, s2, np.concatenate(err), np.concatenate(nnz)


def check_unbiased(cfg: GqsgdConfig, xx, trials: int = 100_000, seed: int = 0, name: str | None = None) -> BoundCheck:
    """Largest per-coordinate z-score of the estimator mean against the true mean."""
    xx = np.asarray(xx, dtype=np.float64)
    _, s1, s2, _, _ = _moments(xx, cfg, trials, seed)
    mean_dev = s1 / trials
    var = np.maximum(s2 / trials - mean_dev ** 2, 0.0) * trials / max(trials - 1, 1)
    se = np.sqrt(var / trials)
    exact = se == 0
    if np.any(np.abs(mean_dev[exact]) > 1e-12 * (1 + np.abs(xx).max())):
        z = math.inf
    else:
        z = float(np.max(np.abs(mean_dev[~exact]) / se[~exact], initial=0.0))
    n, d = xx.shape
    return BoundCheck(name or f"unbiased[{cfg.scheme.kind.value} s={cfg.scheme.s} n={n} d={d}]",
                      z, Z, trials, 0.0, "max |mean-xbar|/SE")


def _norm22(xx) -> float:
    return float(np.sum(np.asarray(xx) ** 2))


def check_variance(cfg: GqsgdConfig, xx, trials: int = 20_000, seed: int = 0, name: str | None = None) -> BoundCheck:
    """``E||G - xbar||^2 * n / ||xx||^2`` of the single-shot operator against theta."""
    xx = np.asarray(xx, dtype=np.float64)
    n, d = xx.shape
    _, _, _, err, _ = _moments(xx, cfg, trials, seed, field_="exact")
    scale = n / _norm22(xx)
    ratio = err * scale
    radius = Z * float(ratio.std(ddof=1)) / math.sqrt(trials)
    return BoundCheck(name or f"variance[{cfg.scheme.kind.value} s={cfg.scheme.s} n={n} d={d}]",
                      float(ratio.mean()), theta_bound(cfg.scheme, n, d), trials, radius)


def check_sparsity(cfg: GqsgdConfig, xx, trials: int = 10_000, seed: int = 0, name: str | None = None,
                   bound: float | None = None) -> BoundCheck:
    """Mean total nonzeros across workers against the stated bound (p = q = 2)."""
    xx = np.asarray(xx, dtype=np.float64)
    n, d = xx.shape
    _, _, _, _, nnz = _moments(xx, cfg, trials, seed)
    radius = Z * float(nnz.std(ddof=1)) / math.sqrt(trials)
    bound = sparsity_bound(cfg.scheme, n, d) if bound is None else bound
    return BoundCheck(name or f"sparsity[{cfg.scheme.kind.value} s={cfg.scheme.s} n={n} d={d}]",
                      float(nnz.mean()), bound, trials, radius)


def k_distribution(m: int) -> dict[int, Fraction]:
    """Exact law of ``sample_k``: ``P(k=j) = 2**-j`` for j < m, the rest at ``k = m``."""
    law = {j: Fraction(1, 2 ** j) for j in range(1, m)}
    law[m] = Fraction(1, 2 ** (m - 1))
    return law


def _k_representatives(m: int) -> dict[int, float]:
    # a uniform draw that maps to each k, used to drive reduce_pair through sample_k
    return {j: math.ldexp(1.0, -j) for j in range(1, m)} | {m: 0.0}


def check_reduce_exact(m: int = 8) -> BoundCheck:
    """Exhaustive exact check that the reduce is unbiased over the full law of ``k``.

    Enumerates every token pair with exponents in {0..m} whose sum lies in
    [-1/2, 1/2] (the range prescaling guarantees). Pairs outside that range
    must raise :class:`OverflowDetected` for some ``k``. Also checks the
    factor-2 magnitude property and commutativity in distribution.
    """
    law = k_distribution(m)
    reps = _k_representatives(m)
    assert sum(law.values()) == 1
    assert all(sample_k(u, m) == j for j, u in reps.items())
    tokens = [ExpToken(sg, e) for e in range(m + 1) for sg in (1, -1)]
    checked = mismatches = overflow_pairs = factor_violations = asym = 0
    for t1, t2 in product(tokens, tokens):
        target = t1.value() + t2.value()
        if abs(target) > Fraction(1, 2):
            try:
                for j in law:
                    reduce_pair(t1, t2, sample_k(reps[j], m))
            except OverflowDetected:
                overflow_pairs += 1
                continue
            mismatches += 1
            continue
        checked += 1
        dist12: dict[Fraction, Fraction] = {}
        dist21: dict[Fraction, Fraction] = {}
        expect = Fraction(0)
        for j, pj in law.items():
            k = sample_k(reps[j], m)
            out = reduce_pair(t1, t2, k)
            v = out.value()
            expect += pj * v
            dist12[v] = dist12.get(v, 0) + pj
            v21 = reduce_pair(t2, t1, k).value()
            dist21[v21] = dist21.get(v21, 0) + pj
            if target == 0:
                factor_violations += v != 0
            elif pj > 0 and not (abs(target) / 2 <= abs(v) <= 2 * abs(target) and v * target > 0):
                factor_violations += 1
        mismatches += expect != target
        asym += dist12 != dist21
    failures = mismatches + factor_violations + asym
    return BoundCheck(f"reduce_exact[m={m}]", float(failures), 0.0, checked, 0.0,
                      f"pairs={checked} overflow_pairs={overflow_pairs} mismatches={mismatches} "
                      f"factor2={factor_violations} asym={asym}")


def check_k_distribution(m: int = 8, trials: int = 1_000_000, seed: int = 0) -> BoundCheck:
    """Largest z-score of empirical ``P(k > b)`` against ``2**-b`` for b in 0..m-1."""
    u = rngmod.stream(seed, rngmod.TRIAL).random(trials)
    k = sample_k(u, m)
    worst = 0.0
    detail = []
    for b in range(m):
        p = math.ldexp(1.0, -b)
        emp = float(np.mean(k > b))
        se = math.sqrt(p * (1 - p) / trials)
        z = (abs(emp - p) / se) if se > 0 else (0.0 if emp == p else math.inf)
        worst = max(worst, z)
        detail.append(f"{b}:{emp:.5f}")
    return BoundCheck(f"k_distribution[m={m}]", worst, Z, trials, 0.0, "max z; " + " ".join(detail))


def local_qsgd(x, s: int, u) -> np.ndarray:
    """Classical single-worker QSGD: standard dithering against the shard's own L2 norm."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.sqrt(np.sum(x ** 2, axis=-1, keepdims=True))
    signs, idx = quantize_levels(x, norm, build_levels(LevelKind.STANDARD, s), u)
    return norm * signs * (s - idx) / s


def check_lemma1(n: int = 4, d: int = 64, s: int | None = 1, trials: int = 20_000, seed: int = 0) -> BoundCheck:
    """Averaging ``n`` independent local compressors gives a distributed compressor with theta = omega/n.

    ``s=None`` uses the identity compressor (omega = 0).
    """
    gen = rngmod.stream(seed, rngmod.TRIAL)
    xx = gen.normal(size=(n, d))
    xbar = xx.mean(axis=0)
    omega = 0.0 if s is None else min(d / s ** 2, math.sqrt(d) / s)
    theta = omega / n
    vals = []
    for t in iter_batches(trials, n, d):
        if s is None:
            comp = np.broadcast_to(xx, (t, n, d))
        else:
            comp = local_qsgd(np.broadcast_to(xx, (t, n, d)), s, gen.random((t, n, d)))
        g = comp.mean(axis=1)
        vals.append(np.sum((g - xbar) ** 2, axis=1) * n / _norm22(xx))
    vals = np.concatenate(vals)
    radius = Z * float(vals.std(ddof=1)) / math.sqrt(trials) if trials > 1 else 0.0
    return BoundCheck(f"lemma1[n={n} d={d} s={s}]", float(vals.mean()), theta, trials, radius)


def check_tree_inflation(n: int = 16, d: int = 64, s: int = 7, trials: int = 20_000, seed: int = 0,
                         spec: NormSpec | None = None, xx=None) -> BoundCheck:
    """Second-moment inflation of the re-rounding tree Allreduce over exact summation.

    Reports ``E||G_tree||^2 / E||G_exact||^2`` (the ``1 + omega`` factor that
    the per-step 9/8 argument bounds) and, for reference, the ratio of the
    centred errors in ``extra``.
    """
    gen = rngmod.stream(seed, rngmod.TRIAL)
    if xx is None:
        xx = gen.normal(size=d) + 0.3 * gen.normal(size=(n, d))
    xx = np.asarray(xx, dtype=np.float64)
    n, d = xx.shape
    cfg = GqsgdConfig(build_levels(LevelKind.EXPONENTIAL, s), spec or NormSpec())
    xbar = xx.mean(axis=0)
    m_tree, m_exact, v_tree, v_exact = [], [], [], []
    for t in iter_batches(trials, n, d):
        out = simulate_mean(xx, cfg, t, gen)
        m_tree.append(np.sum(out.mean ** 2, axis=1))
        m_exact.append(np.sum(out.exact ** 2, axis=1))
        v_tree.append(np.sum((out.mean - xbar) ** 2, axis=1))
        v_exact.append(np.sum((out.exact - xbar) ** 2, axis=1))
    a, b = np.concatenate(m_tree), np.concatenate(m_exact)
    ratio = a.mean() / b.mean()
    # delta-method standard error of a ratio of means
    cov = np.cov(a, b)
    var = (cov[0, 0] / b.mean() ** 2 - 2 * a.mean() * cov[0, 1] / b.mean() ** 3
           + a.mean() ** 2 * cov[1, 1] / b.mean() ** 4) / trials
    centred = float(np.concatenate(v_tree).mean() / np.concatenate(v_exact).mean())
    return BoundCheck(f"tree_inflation[n={n} s={s}]", float(ratio), 1.6, trials, Z * math.sqrt(max(var, 0.0)),
                      f"centred-error ratio={centred:.3g}; (9/8)^log2(n)={(9 / 8) ** math.log2(n):.4f}",
                      {"centred_ratio": centred})


def run_all(seed: int = 0, quick: bool = True) -> list[BoundCheck]:
    """The suite behind the ``verify`` command; ``quick`` trims trial counts."""
    f = 10 if quick else 1
    gen = rngmod.stream(seed, rngmod.DATA)
    checks = [check_reduce_exact(8), check_k_distribution(8, 1_000_000 // f, seed)]
    l2 = NormSpec(2, 2)
    for n, d in [(2, 16), (4, 64), (8, 64)]:
        xx = gen.normal(size=(n, d))
        for kind in (LevelKind.STANDARD, LevelKind.EXPONENTIAL):
            for s in (1, 2, 3):
                cfg = GqsgdConfig(build_levels(kind, s), l2)
                checks.append(check_variance(cfg, xx, 20_000 // f, seed))
            cfg = GqsgdConfig(build_levels(kind, 3))
            checks.append(check_unbiased(cfg, xx, 100_000 // f, seed))
            checks.append(check_sparsity(GqsgdConfig(build_levels(kind, 1), l2, sparse=True), xx, 10_000 // f, seed))
    checks.append(check_lemma1(4, 64, 1, 20_000 // f, seed))
    checks.append(check_lemma1(4, 64, None, 100, seed))
    checks.append(check_tree_inflation(16, 64, 7, 20_000 // f, seed))
    return checks


def write_csv(checks, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "empirical", "bound", "radius", "trials", "passed"])
        for c in checks:
            w.writerow([c.name, repr(c.empirical), repr(c.bound), repr(c.radius), c.trials, int(c.passed)])
