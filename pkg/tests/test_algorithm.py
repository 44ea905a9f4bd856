import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gqsgd import rng as rngmod
from gqsgd.algorithm import (
    GqsgdConfig,
    empirical_compression_error,
    gqsgd_mean,
    simulate_mean,
    sparsity_bound,
    sparsity_bound_corrected,
    theta_bound,
)
from gqsgd.collectives import TopoKind
from gqsgd.errors import InvalidArgument, RefusedConfiguration, UndefinedRelativeError
from gqsgd.quantizer import LevelScheme, NormSpec, build_levels, decode_shard, quantize_shard

L2 = NormSpec(2, 2)


def cfg(kind="exponential", s=7, **kw):
    return GqsgdConfig(build_levels(kind, s), **kw)


def replay_draw(seed, round_):
    """The uniforms gqsgd_mean's reduce codec consumes, shaped for simulate_mean."""
    def draw(step, dst, offset, size):
        return rngmod.uniforms(seed, rngmod.REDUCE, dst, round_, offset + size, step=step)[offset:][None]
    return draw


def quant_uniforms(seed, round_, n, d):
    return np.stack([rngmod.uniforms(seed, rngmod.QUANTIZE, i, round_, d) for i in range(n)])[None]


@pytest.mark.parametrize("kind,s", [("standard", 255), ("standard", 3), ("exponential", 7), ("exponential", 2)])
@pytest.mark.parametrize("spec", [NormSpec(), L2])
def test_single_worker_is_plain_quantization(kind, s, spec):
    x = np.random.default_rng(4).normal(size=33)
    c = cfg(kind, s, spec=spec)
    res = gqsgd_mean([x], c, seed=9)
    norm = np.abs(x).max() if spec.p == math.inf else np.linalg.norm(x)
    q = quantize_shard(x, norm, c.scheme, rngmod.uniforms(9, rngmod.QUANTIZE, 0, 0, 33))
    # the standard path scales integer sums once, so allow the last-bit difference that introduces
    rtol = 0 if kind == "exponential" else 1e-15
    np.testing.assert_allclose(res.mean, decode_shard(q, c.scheme), rtol=rtol, atol=0)


@pytest.mark.parametrize("c", [cfg("standard", 4), cfg("exponential", 3), cfg("exponential", 3, sparse=True),
                               cfg("standard", 4, topo=TopoKind.RING)])
def test_identical_grid_point_shards_are_exact(c):
    # on the exponential tree with power-of-two n every pairwise sum of equal powers of two is exact
    x = 2.0 * c.scheme.array[[0, 1, 2, 3, 3]] * np.array([1, -1, 1, -1, 1])
    res = gqsgd_mean([x] * 4, c, seed=1)
    assert np.array_equal(res.mean, x)


@pytest.mark.parametrize("kind", ["standard", "exponential"])
@pytest.mark.parametrize("topo", [TopoKind.TREE, TopoKind.RING])
@pytest.mark.parametrize("sparse", [False, True])
@pytest.mark.parametrize("n", [1, 3, 8])
def test_simulate_mean_replays_gqsgd_mean(kind, topo, sparse, n):
    d, seed, round_ = 23, 5, 2
    xx = np.random.default_rng(n).normal(size=(n, d))
    c = cfg(kind, 7 if kind == "exponential" else 15, topo=topo, sparse=sparse)
    res = gqsgd_mean(list(xx), c, seed=seed, round_=round_)
    sim = simulate_mean(xx, c, 1, quant_u=quant_uniforms(seed, round_, n, d), draw=replay_draw(seed, round_))
    np.testing.assert_allclose(sim.mean[0], res.mean, rtol=1e-14, atol=1e-15)
    for v in res.per_worker.values():
        assert np.array_equal(v, res.mean)


@pytest.mark.parametrize("c", [cfg(), cfg("standard", 15, topo=TopoKind.RING), cfg(sparse=True)])
def test_one_thread_per_rank_over_tcp(c):
    import threading

    from gqsgd.collectives import TcpTransport

    n = 4
    xx = np.random.default_rng(0).normal(size=(n, 16))
    full = gqsgd_mean(list(xx), c, seed=3)
    probe = TcpTransport({r: ("127.0.0.1", 0) for r in range(n)}, range(n))
    addrs = dict(probe.addrs)
    listeners = probe._listeners
    out, errors = {}, []

    def worker(r):
        # each rank sees only its own shard
        shards = [xx[i] if i == r else None for i in range(n)]
        tr = TcpTransport(addrs, [r], {r: listeners[r]})
        try:
            out[r] = gqsgd_mean(shards, c, seed=3, transport=tr, local=[r]).mean
        except Exception as exc:  # surfaced below
            errors.append(exc)
        finally:
            tr.close()

    threads = [threading.Thread(target=worker, args=(r,)) for r in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(60)
    assert not errors
    assert all(np.array_equal(out[r], full.mean) for r in range(n))


def test_dense_standard_unbiased_small_instance():
    xx = np.array([[0.3, -0.2, 0.0], [0.1, 0.4, -0.25]])
    c = cfg("standard", 2, spec=L2)
    T = 20_000
    out = simulate_mean(xx, c, T, np.random.default_rng(0)).mean
    se = out.std(axis=0) / math.sqrt(T)
    assert np.all(np.abs(out.mean(axis=0) - xx.mean(axis=0)) <= 4 * se + 1e-15)


def test_sparse_and_dense_paths_match_in_moments():
    xx = np.random.default_rng(1).normal(size=(4, 8))
    T = 40_000
    dense = simulate_mean(xx, cfg("standard", 3), T, np.random.default_rng(2)).mean
    sparse = simulate_mean(xx, cfg("standard", 3, sparse=True), T, np.random.default_rng(3)).mean
    se = np.sqrt(dense.var(axis=0) / T + sparse.var(axis=0) / T)
    assert np.all(np.abs(dense.mean(axis=0) - sparse.mean(axis=0)) <= 4 * se)
    v1, v2 = dense.var(axis=0).sum(), sparse.var(axis=0).sum()
    assert abs(v1 - v2) / v1 < 0.05


def test_sparse_and_dense_paths_identical_at_one_worker():
    x = np.random.default_rng(7).normal(size=40)
    for kind in ("standard", "exponential"):
        a = gqsgd_mean([x], cfg(kind, 5), seed=4).mean
        b = gqsgd_mean([x], cfg(kind, 5, sparse=True), seed=4).mean
        assert np.array_equal(a, b)


def test_custom_grid_only_on_sparse_path():
    scheme = LevelScheme.custom([1, 0.6, 0.1, 0])
    xx = np.random.default_rng(0).normal(size=(3, 10))
    with pytest.raises(RefusedConfiguration):
        gqsgd_mean(list(xx), GqsgdConfig(scheme))
    res = gqsgd_mean(list(xx), GqsgdConfig(scheme, sparse=True), seed=1)
    assert res.mean.shape == (10,)


def test_ring_uses_a_deeper_prescale():
    assert cfg("exponential", 7).reduce_context(8).shift == 4
    assert cfg("exponential", 7, topo=TopoKind.RING).reduce_context(8).shift == 8
    # 120 ring workers no longer fit exponents in 7 bits
    assert cfg("exponential", 7, topo=TopoKind.RING).accumulator_width(125) == 16


def test_accumulator_width_selection():
    assert cfg("standard", 255).accumulator_width(1) == 16
    assert cfg("standard", 15).accumulator_width(8) == 8
    assert cfg("exponential", 7).accumulator_width(16) == 8
    with pytest.raises(RefusedConfiguration):
        cfg("standard", 200, width=8).accumulator_width(2)
    with pytest.raises(RefusedConfiguration):
        gqsgd_mean([np.ones(3)] * 16, cfg("exponential", 200, width=8))


def test_input_validation():
    with pytest.raises(InvalidArgument):
        gqsgd_mean([], cfg())
    with pytest.raises(InvalidArgument):
        gqsgd_mean([np.ones(3), np.ones(4)], cfg())
    with pytest.raises(InvalidArgument):
        simulate_mean(np.ones(3), cfg(), 1, np.random.default_rng(0))


def test_traffic_ratio_dense_vs_float():
    xx = np.random.default_rng(0).normal(size=(8, 1024))
    res = gqsgd_mean(list(xx), cfg("exponential", 7))
    assert res.report.bytes_sent_total == 2 * 7 * 1024
    assert res.norm_report.bytes_sent_total == 2 * 7 * 8


def test_compression_error_examples():
    zero = np.zeros((3, 5))
    assert empirical_compression_error(zero, cfg(), 1000).value == 0.0
    with pytest.raises(UndefinedRelativeError):
        empirical_compression_error(np.array([[1.0, 2.0], [-1.0, -2.0]]), cfg(), 1000)
    # under L2 normalization most coordinates sit far below 1, where the exponential grid is finer
    xx = np.random.default_rng(0).normal(size=(4, 256)) + 1.0
    for s in (7, 10):
        std = empirical_compression_error(xx, cfg("standard", s, spec=L2, sparse=True), 2000, seed=1)
        exp = empirical_compression_error(xx, cfg("exponential", s, spec=L2, sparse=True), 2000, seed=1)
        assert exp.value + exp.radius < std.value - std.radius


def test_bound_formulas():
    assert theta_bound(build_levels("standard", 8), 4, 64) == pytest.approx(math.sqrt(64) / (2 * 8))
    # the boundary s = sqrt(nd) gives theta = 1/n
    assert theta_bound(build_levels("standard", 16), 4, 64) == pytest.approx(1 / 4)
    assert theta_bound(build_levels("exponential", 30), 8, 64) == pytest.approx(1 / 64, rel=1e-6)
    assert sparsity_bound(build_levels("standard", 2), 4, 64) == 20
    assert sparsity_bound(build_levels("exponential", 3), 4, 64) == 16 + 16
    assert sparsity_bound_corrected(build_levels("standard", 2), 4, 64) == 2 * 18
    with pytest.raises(InvalidArgument):
        theta_bound(LevelScheme.custom([1, 0.5, 0]), 2, 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 12), st.sampled_from(["standard", "exponential"]),
       st.sampled_from([TopoKind.TREE, TopoKind.RING]), st.integers(0, 2 ** 32 - 1))
def test_output_stays_on_the_grid(n, d, kind, topo, seed):
    xx = np.random.default_rng(seed).normal(size=(n, d))
    c = cfg(kind, 4, topo=topo)
    res = gqsgd_mean(list(xx), c, seed=seed)
    scaled = res.mean * n / res.norm
    if kind == "standard":
        # sums of multiples of 1/s
        assert np.allclose(scaled * 4, np.round(scaled * 4), atol=1e-9)
    else:
        nz = np.abs(scaled[scaled != 0])
        # each coordinate is one signed power of two (up to the division by n)
        assert np.allclose(np.frexp(nz)[0], 0.5, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 16), st.sampled_from([TopoKind.TREE, TopoKind.RING]), st.integers(0, 2 ** 32 - 1))
def test_worst_case_inputs_never_overflow(n, topo, seed):
    # every worker at the norm with the same sign drives partial sums to their largest values
    x = np.ones(16)
    res = gqsgd_mean([x] * n, cfg("exponential", 7, topo=topo), seed=seed)
    assert np.all(res.mean > 0)
