import math
import socket
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gqsgd.collectives import (
    MAGIC,
    ExpReduce,
    FloatSum,
    InProcTransport,
    IntSum,
    MsgType,
    Op,
    TcpTransport,
    Topology,
    TopoKind,
    allgather,
    allreduce,
    decode_frame,
    encode_frame,
    make_transport,
    norm_allreduce,
    parse_addr,
    ring_allreduce,
    schedule_traffic,
    tree_allreduce,
)
from gqsgd.errors import AbortedCollective, InvalidArgument, OverflowDetected, ProtocolError
from gqsgd.exp_arith import TokenVector
from gqsgd.quantizer import NormSpec, combine_norm_stats


def simulate_schedule(topo, values):
    """Oracle: replay the event list on plain Python sets of contributor ids."""
    n = topo.n
    if topo.kind is TopoKind.TREE:
        held = [{i} for i in range(n)]
        for events in topo.by_step():
            snap = [set(h) for h in held]
            for ev in events:
                held[ev.dst] = (held[ev.dst] | snap[ev.src]) if ev.op is Op.REDUCE else set(snap[ev.src])
        return held
    held = [[{i} for _ in range(n)] for i in range(n)]
    for events in topo.by_step():
        snap = [[set(c) for c in h] for h in held]
        for ev in events:
            c = ev.chunk
            held[ev.dst][c] = (held[ev.dst][c] | snap[ev.src][c]) if ev.op is Op.REDUCE else set(snap[ev.src][c])
    return held


@pytest.mark.parametrize("n", range(1, 18))
@pytest.mark.parametrize("kind", ["tree", "ring"])
def test_schedule_reaches_everyone(n, kind):
    topo = Topology.build(n, kind)
    held = simulate_schedule(topo, None)
    everyone = set(range(n))
    if kind == "tree":
        assert all(h == everyone for h in held)
        assert topo.steps == 2 * math.ceil(math.log2(n)) if n > 1 else topo.steps == 0
        assert sum(e.op is Op.REDUCE for e in topo.schedule) == n - 1
    else:
        assert all(c == everyone for h in held for c in h)
        assert topo.steps == 2 * (n - 1)


def test_step_counts_examples():
    assert Topology.build(16, "tree").steps == 8
    assert Topology.build(4, "ring").steps == 6
    with pytest.raises(InvalidArgument):
        Topology.build(0)


def test_no_worker_sends_twice_per_step():
    for n in (3, 8, 13):
        for kind in ("tree", "ring"):
            for events in Topology.build(n, kind).by_step():
                srcs = [e.src for e in events]
                assert len(srcs) == len(set(srcs))


def test_tree_integer_sum():
    topo = Topology.build(4)
    res = tree_allreduce([np.array([v]) for v in (1, 2, 3, 4)], IntSum(32), topo)
    assert all(int(v[0]) == 10 for v in res.values.values())
    assert res.report.reduce_invocations == 3
    assert res.report.steps == 4


def test_ring_integer_sum():
    topo = Topology.build(3, "ring")
    payloads = [np.arange(7) * (i + 1) for i in range(3)]
    res = ring_allreduce(payloads, IntSum(32), topo)
    for v in res.values.values():
        assert np.array_equal(v, np.arange(7) * 6)
    with pytest.raises(InvalidArgument):
        tree_allreduce(payloads, IntSum(32), topo)
    with pytest.raises(InvalidArgument):
        ring_allreduce(payloads, IntSum(32), Topology.build(3))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 20), st.sampled_from(["tree", "ring"]), st.integers(0, 2 ** 31))
def test_integer_allreduce_is_exact(n, d, kind, seed):
    gen = np.random.default_rng(seed)
    payloads = [gen.integers(-1000, 1000, d) for _ in range(n)]
    res = allreduce(payloads, IntSum(32), Topology.build(n, kind))
    expect = np.sum(payloads, axis=0)
    assert all(np.array_equal(v, expect) for v in res.values.values())


def test_ring_traffic_per_worker():
    n, d = 4, 1024
    res = ring_allreduce([np.zeros(d, np.int64)] * n, IntSum(32), Topology.build(n, "ring"))
    assert res.report.bytes_per_worker == [2 * (n - 1) * d * 4 // n] * n
    assert schedule_traffic(Topology.build(n, "ring"), d, 4).bytes_per_worker == res.report.bytes_per_worker


def test_tree_traffic_matches_schedule_accounting():
    for n in (2, 5, 8):
        topo = Topology.build(n)
        res = tree_allreduce([np.zeros(33, np.int64)] * n, IntSum(8), topo)
        ref = schedule_traffic(topo, 33, 1)
        assert res.report.bytes_per_worker == ref.bytes_per_worker
        assert res.report.step_bytes == ref.step_bytes
        assert res.report.bytes_sent_total == sum(ref.step_bytes)


def test_integer_overflow_detected():
    with pytest.raises(OverflowDetected):
        allreduce([np.array([100]), np.array([100])], IntSum(8), Topology.build(2))


def test_shape_mismatch_rejected():
    with pytest.raises(InvalidArgument):
        allreduce([np.zeros(3), np.zeros(4)], FloatSum(), Topology.build(2))
    with pytest.raises(InvalidArgument):
        allreduce([np.zeros(3)], FloatSum(), Topology.build(2))


def test_norm_allreduce_examples():
    res = norm_allreduce([25, 25], NormSpec(2, 2), Topology.build(2))
    assert all(v == math.sqrt(50) for v in res.values.values())
    res = norm_allreduce([4, 2, 1, 3], NormSpec(), Topology.build(4))
    assert all(v == 4 for v in res.values.values())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=12), st.sampled_from([NormSpec(2, 2), NormSpec()]),
       st.sampled_from(["tree", "ring"]))
def test_norm_allreduce_matches_single_process(stats, spec, kind):
    res = norm_allreduce(stats, spec, Topology.build(len(stats), kind))
    vals = set(res.values.values())
    assert len(vals) == 1
    # the tree adds in a different order than fsum; allow a few ulps
    assert vals.pop() == pytest.approx(combine_norm_stats(stats, spec), rel=1e-14)


def test_allgather_examples():
    res = allgather([b"A", b"B"], Topology.build(2))
    assert res.values == {0: [b"A", b"B"], 1: [b"A", b"B"]}
    res = allgather([b"", b"", b""], Topology.build(3))
    assert all(v == [b"", b"", b""] for v in res.values.values())
    sizes = [3, 10, 0, 7]
    res = allgather([bytes(s) for s in sizes], Topology.build(4))
    assert res.report.bytes_sent_total == 3 * sum(sizes)


def test_frame_layout():
    frame = encode_frame(MsgType.EXP, 7, b"xyz")
    assert frame[:2] == MAGIC == b"\x47\x51"
    assert frame[2] == 4
    assert struct.unpack("<II", frame[3:11]) == (7, 3)
    assert decode_frame(frame) == (MsgType.EXP, 7, b"xyz")
    for bad in (frame[:5], b"XX" + frame[2:], frame[:2] + b"\x09" + frame[3:], frame + b"!"):
        with pytest.raises(ProtocolError):
            decode_frame(bad)


def test_parse_addr():
    assert parse_addr("127.0.0.1:80") == ("127.0.0.1", 80)
    with pytest.raises(InvalidArgument):
        parse_addr("nohost")


def test_message_type_mismatch():
    class Liar(FloatSum):
        msg_type = MsgType.SPARSE

    tr = InProcTransport()
    tr.send(1, 0, encode_frame(MsgType.DENSE, 0, b"\x00" * 4))
    with pytest.raises(ProtocolError):
        allreduce([np.zeros(1), np.zeros(1)], Liar(), Topology.build(2), tr)


def test_worker_failure_aborts_collective():
    class Broken(FloatSum):
        def combine(self, a, b, worker, step, offset=0):
            raise RuntimeError("worker crashed")

    with pytest.raises(AbortedCollective):
        allreduce([np.zeros(2)] * 4, Broken(), Topology.build(4))


def test_exp_reduce_keyed_by_destination():
    codec = ExpReduce(8, 8, seed=3, round_=1)
    a = TokenVector(np.ones(64, np.int8), np.full(64, 4))
    b = TokenVector(np.ones(64, np.int8), np.full(64, 6))
    first = codec.combine(a, b, worker=2, step=0)
    again = codec.combine(a, b, worker=2, step=0)
    other = codec.combine(a, b, worker=3, step=0)
    assert np.array_equal(first.exps, again.exps)
    assert not np.array_equal(first.exps, other.exps)
    # offset selects the matching slice of the same stream
    part = codec.combine(TokenVector(a.signs[10:20], a.exps[10:20]), TokenVector(b.signs[10:20], b.exps[10:20]),
                         worker=2, step=0, offset=10)
    assert np.array_equal(part.exps, first.exps[10:20])


def test_exp_reduce_tree_unbiased_two_workers():
    # n=2: one reduce; exact expectation by enumerating each element's outcome frequencies
    a = TokenVector(np.array([1, 1, -1], np.int8), np.array([3, 4, 5]))
    b = TokenVector(np.array([1, -1, 1], np.int8), np.array([5, 6, 3]))
    target = a.values() + b.values()
    acc = np.zeros(3)
    T = 20_000
    for seed in range(T):
        res = allreduce([a, b], ExpReduce(8, 8, seed), Topology.build(2))
        acc += res.value.values()
    assert np.all(np.abs(acc / T - target) <= 4 * np.abs(target) / math.sqrt(T))


@pytest.mark.parametrize("kind", ["tree", "ring"])
def test_tcp_matches_inproc(kind):
    gen = np.random.default_rng(0)
    n = 5
    toks = [TokenVector(np.where(gen.random(50) < 0.5, -1, 1).astype(np.int8), gen.integers(4, 9, 50))
            for _ in range(n)]
    topo = Topology.build(n, kind)
    ref = allreduce(toks, ExpReduce(9, 8, 11), topo)
    with make_transport("tcp", n) as tr:
        got = allreduce(toks, ExpReduce(9, 8, 11), topo, tr)
    for w in range(n):
        assert np.array_equal(ref.values[w].exps, got.values[w].exps)
        assert np.array_equal(ref.values[w].signs, got.values[w].signs)
    assert ref.report.bytes_per_worker == got.report.bytes_per_worker


def test_tcp_rejects_connection_without_hello():
    tr = TcpTransport.loopback(2)
    try:
        host, port = tr.addrs[1]
        with socket.create_connection((host, port)) as s:
            s.sendall(encode_frame(MsgType.DENSE, 0, b""))
            with pytest.raises(ProtocolError):
                tr.recv(0, 1)
    finally:
        tr.close()


def test_make_transport_rejects_unknown():
    with pytest.raises(InvalidArgument):
        make_transport("udp", 2)
