"""Global-QSGD: norm exchange, local quantization and mean reconstruction.

Two entry points share the same arithmetic:

* :func:`gqsgd_mean` runs one aggregation through the collective simulator,
  worker by worker, with real wire encodings and traffic accounting.
* :func:`simulate_mean` replays the same computation for many independent
  trials at once on stacked arrays. The statistical checks use it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .collectives import (
    CollectiveResult,
    ExpReduce,
    IntSum,
    MsgType,
    Op,
    Topology,
    TopoKind,
    TrafficReport,
    allgather,
    allreduce,
    norm_allreduce,
)
from .errors import InvalidArgument, ProtocolError, RefusedConfiguration, UndefinedRelativeError
from .exp_arith import ReduceContext, TokenVector, check_width, reduce_arrays, sample_k, tokens_from_levels
from .quantizer import (
    LevelKind,
    LevelScheme,
    NormSpec,
    combine_norm_stats,
    decode_sparse,
    encode_sparse,
    from_sparse,
    index_width,
    local_norm_stat,
    quantize_levels,
    quantize_shard,
    to_sparse,
)


@dataclass(frozen=True)
class GqsgdConfig:
    scheme: LevelScheme
    spec: NormSpec = field(default_factory=NormSpec)
    sparse: bool = False
    width: int | None = None
    topo: TopoKind = TopoKind.TREE

    def accumulator_width(self, n: int) -> int:
        """Wire integer width for the dense path; refuses widths that could overflow."""
        kind = self.scheme.kind
        if kind is LevelKind.CUSTOM:
            raise RefusedConfiguration("custom grids have no integer aggregation; use sparse=True")
        candidates = (self.width,) if self.width is not None else (8, 16, 32)
        for w in candidates:
            if not check_width(self.scheme.s, n, w, kind):
                continue
            if kind is LevelKind.EXPONENTIAL and not self._context(n, w).fits:
                continue
            return w
        raise RefusedConfiguration(
            f"{kind.value} dithering with s={self.scheme.s}, n={n} can overflow {candidates[-1]}-bit integers"
        )

    def _context(self, n: int, width: int) -> ReduceContext:
        return ReduceContext(self.scheme.s, n, width, sequential=self.topo is TopoKind.RING)

    def reduce_context(self, n: int) -> ReduceContext:
        """Prescale and k-sampler parameters of the dense exponential path."""
        return self._context(n, self.accumulator_width(n))

    def validate(self, n: int) -> None:
        if n < 1:
            raise InvalidArgument("need at least one worker")
        if not self.sparse:
            self.accumulator_width(n)


@dataclass
class GqsgdResult:
    mean: np.ndarray
    per_worker: dict[int, np.ndarray]
    norm: float
    report: TrafficReport
    norm_report: TrafficReport

    @property
    def total_report(self) -> TrafficReport:
        return self.norm_report.merge(self.report)


def _signed_magnitudes(signs, idx, s: int) -> np.ndarray:
    return np.asarray(signs, np.int64) * (s - np.asarray(idx, np.int64))


def _finish_standard(total, norm: float, n: int, s: int) -> np.ndarray:
    return np.asarray(total, np.float64) * (norm / (n * s))


def _finish_exponential(values, norm: float, n: int, shift: int) -> np.ndarray:
    return np.asarray(values, np.float64) * (math.ldexp(norm, shift) / n)


def gqsgd_mean(shards: Sequence, cfg: GqsgdConfig, seed: int = 0, round_: int = 0,
               transport=None, local: Sequence[int] | None = None) -> GqsgdResult:
    """Unbiased estimate of the mean of ``shards``, agreed on by every worker.

    ``local`` lists the ranks hosted by this process (default: all). Shards of
    remote ranks may be ``None``; they only fix the worker count.
    """
    n = len(shards)
    local = list(range(n)) if local is None else sorted(local)
    if n == 0 or not local:
        raise InvalidArgument("need at least one shard")
    xs = {i: np.asarray(shards[i], dtype=np.float64).ravel() for i in local}
    if len({x.size for x in xs.values()}) != 1:
        raise InvalidArgument("all shards must have equal length")
    d = xs[local[0]].size
    cfg.validate(n)
    scheme = cfg.scheme
    topo = Topology.build(n, cfg.topo)

    stats = [local_norm_stat(xs[i], cfg.spec) if i in xs else 0.0 for i in range(n)]
    norm_res = norm_allreduce(stats, cfg.spec, topo, transport, round_, local)
    norms = set(norm_res.values.values())
    if len(norms) != 1:
        raise ProtocolError("workers disagree on the global norm")
    norm = norms.pop()

    shards_q = [
        quantize_shard(xs[i], norm, scheme, rngmod.uniforms(seed, rngmod.QUANTIZE, i, round_, d)) if i in xs else None
        for i in range(n)
    ]

    if cfg.sparse:
        w = index_width(scheme)
        blobs = [encode_sparse(to_sparse(q, scheme), w) if q is not None else b"" for q in shards_q]
        gathered = allgather(blobs, topo, transport, round_, MsgType.SPARSE, local)
        per_worker = {}
        for wk, items in gathered.values.items():
            acc = np.zeros(d)
            for blob in items:
                acc += from_sparse(decode_sparse(blob, w), scheme)
            per_worker[wk] = acc / n
        report = gathered.report
    elif scheme.kind is LevelKind.STANDARD:
        codec = IntSum(cfg.accumulator_width(n))
        mags = [_signed_magnitudes(q.signs, q.level_idx, scheme.s) if q is not None else None for q in shards_q]
        res = allreduce(mags, codec, topo, transport, round_, local)
        per_worker = {wk: _finish_standard(v, norm, n, scheme.s) for wk, v in res.values.items()}
        report = res.report
    else:
        ctx = cfg.reduce_context(n)
        codec = ExpReduce(ctx.m, ctx.width, seed, round_)
        tokens = [tokens_from_levels(q.signs, q.level_idx, scheme.s, ctx.shift) if q is not None else None
                  for q in shards_q]
        res = allreduce(tokens, codec, topo, transport, round_, local)
        per_worker = {wk: _finish_exponential(t.values(), norm, n, ctx.shift) for wk, t in res.values.items()}
        report = res.report

    first = per_worker[min(per_worker)]
    if any(not np.array_equal(first, v) for v in per_worker.values()):
        raise ProtocolError("workers hold different aggregates")
    return GqsgdResult(first, per_worker, norm, report, norm_res.report)


# -- batched replay ----------------------------------------------------------

Draw = Callable[[int, int, int, int], np.ndarray]


def reduce_tokens_batch(signs: np.ndarray, exps: np.ndarray, topo: Topology, m: int, draw: Draw):
    """Apply the REDUCE events of ``topo`` to stacked tokens of shape (T, n, d).

    ``draw(step, dst, offset, size)`` returns uniforms of shape (T, size).
    Returns the aggregated tokens of shape (T, d).
    """
    signs = np.array(signs, dtype=np.int8)
    exps = np.array(exps, dtype=np.int64)
    n, d = exps.shape[1], exps.shape[2]
    if topo.kind is TopoKind.RING:
        bounds = np.concatenate([[0], np.cumsum([len(c) for c in np.array_split(np.arange(d), n)])])
    for ev in topo.schedule:
        if ev.op is not Op.REDUCE:
            continue
        lo, hi = (0, d) if ev.chunk is None else (int(bounds[ev.chunk]), int(bounds[ev.chunk + 1]))
        if hi == lo:
            continue
        k = sample_k(draw(ev.step, ev.dst, lo, hi - lo), m)
        s_new, e_new = reduce_arrays(signs[:, ev.dst, lo:hi], exps[:, ev.dst, lo:hi],
                                     signs[:, ev.src, lo:hi], exps[:, ev.src, lo:hi], k)
        signs[:, ev.dst, lo:hi] = s_new
        exps[:, ev.dst, lo:hi] = e_new
    if topo.kind is TopoKind.TREE:
        return signs[:, 0], exps[:, 0]
    out_s = np.empty((exps.shape[0], d), np.int8)
    out_e = np.empty((exps.shape[0], d), np.int64)
    for c in range(n):
        lo, hi = int(bounds[c]), int(bounds[c + 1])
        owner = (c - 1) % n
        out_s[:, lo:hi] = signs[:, owner, lo:hi]
        out_e[:, lo:hi] = exps[:, owner, lo:hi]
    return out_s, out_e


@dataclass
class BatchOutput:
    mean: np.ndarray
    exact: np.ndarray | None = None
    nnz: np.ndarray | None = None


def simulate_mean(xx, cfg: GqsgdConfig, trials: int, gen: np.random.Generator | None = None,
                  norm: float | None = None, quant_u: np.ndarray | None = None,
                  draw: Draw | None = None) -> BatchOutput:
    """Run ``trials`` independent aggregations of the shards ``xx`` (shape n x d).

    ``mean`` has shape (trials, d). ``exact`` is the mean of the quantized
    values summed without re-rounding (equal to ``mean`` except on the dense
    exponential path). ``nnz`` counts nonzero quantized coordinates across
    all workers per trial.
    """
    xx = np.asarray(xx, dtype=np.float64)
    if xx.ndim != 2:
        raise InvalidArgument("xx must have shape (n, d)")
    n, d = xx.shape
    cfg.validate(n)
    scheme = cfg.scheme
    if norm is None:
        norm = combine_norm_stats([local_norm_stat(x, cfg.spec) for x in xx], cfg.spec)
    if quant_u is None:
        quant_u = gen.random((trials, n, d))
    signs, idx = quantize_levels(np.broadcast_to(xx, (trials, n, d)), norm, scheme, quant_u)
    nnz = np.count_nonzero(idx < scheme.s, axis=(1, 2))

    if scheme.kind is LevelKind.EXPONENTIAL and not cfg.sparse:
        ctx = cfg.reduce_context(n)
        tok = tokens_from_levels(signs, idx, scheme.s, ctx.shift)
        values = np.where(tok.exps == 0, 0.0, tok.signs * np.ldexp(1.0, -tok.exps))
        exact = _finish_exponential(values.sum(axis=1), norm, n, ctx.shift)
        if draw is None:
            def draw(step, dst, offset, size):
                return gen.random((trials, size))
        topo = Topology.build(n, cfg.topo)
        rs, re = reduce_tokens_batch(tok.signs, tok.exps, topo, ctx.m, draw)
        mean = _finish_exponential(TokenVector(rs, re).values(), norm, n, ctx.shift)
        return BatchOutput(mean, exact, nnz)

    if scheme.kind is LevelKind.STANDARD and not cfg.sparse:
        total = _signed_magnitudes(signs, idx, scheme.s).sum(axis=1)
        mean = _finish_standard(total, norm, n, scheme.s)
        return BatchOutput(mean, mean, nnz)

    decoded = norm * signs * scheme.level(idx)
    acc = np.zeros((trials, d))
    for i in range(n):
        acc += decoded[:, i]
    mean = acc / n
    return BatchOutput(mean, mean, nnz)


def iter_batches(trials: int, n: int, d: int, budget: int = 2_000_000):
    """Split ``trials`` into chunks that keep (chunk, n, d) arrays near ``budget`` elements."""
    size = max(1, budget // max(1, n * d))
    done = 0
    while done < trials:
        take = min(size, trials - done)
        yield take
        done += take


@dataclass
class ErrorEstimate:
    value: float
    radius: float
    trials: int


def empirical_compression_error(shards, cfg: GqsgdConfig, trials: int = 1000, seed: int = 0) -> ErrorEstimate:
    """``E||G(xx) - mean||^2 / ||mean||^2`` with a 4-standard-error radius."""
    xx = np.asarray(shards, dtype=np.float64)
    xbar = xx.mean(axis=0)
    denom = float(np.dot(xbar, xbar))
    if not np.any(xx):
        return ErrorEstimate(0.0, 0.0, trials)
    if denom == 0.0:
        raise UndefinedRelativeError("the mean of the shards is zero")
    gen = rngmod.stream(seed, rngmod.TRIAL)
    errs = []
    for t in iter_batches(trials, *xx.shape):
        out = simulate_mean(xx, cfg, t, gen).mean
        errs.append(np.sum((out - xbar) ** 2, axis=1) / denom)
    errs = np.concatenate(errs)
    se = float(errs.std(ddof=1) / math.sqrt(trials)) if trials > 1 else math.inf
    return ErrorEstimate(float(errs.mean()), 4.0 * se, trials)


def theta_bound(scheme: LevelScheme, n: int, d: int) -> float:
    """Variance constant of the single-shot operator for p, q >= 2.

    Standard: ``sqrt(d) / (sqrt(n) s)``; exponential:
    ``1/(8n) + sqrt(d) / (sqrt(n) 2**(s-1))``. Each is the tighter branch of a
    minimum for small ``s`` and remains a valid upper bound for larger ``s``.
    """
    root = math.sqrt(d) / math.sqrt(n)
    if scheme.kind is LevelKind.STANDARD:
        return root / scheme.s
    if scheme.kind is LevelKind.EXPONENTIAL:
        return 1.0 / (8 * n) + root / 2 ** (scheme.s - 1)
    raise InvalidArgument("no variance bound for custom grids")


def sparsity_bound(scheme: LevelScheme, n: int, d: int) -> float:
    """Stated bound on the expected total nonzeros for p = q = 2."""
    if scheme.kind is LevelKind.STANDARD:
        return scheme.s ** 2 + math.sqrt(n * d)
    if scheme.kind is LevelKind.EXPONENTIAL:
        return 2 ** (2 * scheme.s - 2) + math.sqrt(n * d)
    raise InvalidArgument("no sparsity bound for custom grids")


def sparsity_bound_corrected(scheme: LevelScheme, n: int, d: int) -> float:
    """``t(t + sqrt(nd))`` with ``t`` the reciprocal width of the lowest segment."""
    t = scheme.s if scheme.kind is LevelKind.STANDARD else 2 ** (scheme.s - 1)
    return t * (t + math.sqrt(n * d))
