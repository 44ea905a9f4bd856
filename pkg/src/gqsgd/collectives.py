"""Simulated collectives over pluggable transports, with byte accounting.

A collective is a fixed schedule of point-to-point events. Each event moves
one encoded payload from ``src`` to ``dst``; the receiver either combines it
with its own state (``REDUCE``) or overwrites its state (``COPY``). Because
the schedule fixes every pairing and every random draw is keyed by
(worker, round, step, element), results are identical whichever transport
carries the bytes.
"""

from __future__ import annotations

import enum
import math
import socket
import struct
import threading
import time
from collections import defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .errors import AbortedCollective, InvalidArgument, OverflowDetected, ProtocolError
from .exp_arith import TokenVector, ceil_log2, pack_tokens, reduce_vec, unpack_tokens
from .quantizer import NormSpec


class MsgType(enum.IntEnum):
    NORM = 1
    DENSE = 2
    SPARSE = 3
    EXP = 4
    CTRL = 5


class TopoKind(enum.Enum):
    TREE = "tree"
    RING = "ring"


class Op(enum.Enum):
    REDUCE = "reduce"
    COPY = "copy"


@dataclass(frozen=True)
class Event:
    step: int
    src: int
    dst: int
    op: Op
    chunk: int | None = None


def _tree_schedule(n: int) -> list[Event]:
    h = ceil_log2(n)
    events = []
    for t in range(h):
        for i in range(0, n, 2 ** (t + 1)):
            if i + 2 ** t < n:
                events.append(Event(t, i + 2 ** t, i, Op.REDUCE))
    for j, t in enumerate(reversed(range(h))):
        for i in range(0, n, 2 ** (t + 1)):
            if i + 2 ** t < n:
                events.append(Event(h + j, i, i + 2 ** t, Op.COPY))
    return events


def _ring_schedule(n: int) -> list[Event]:
    events = []
    if n == 1:
        return events
    for t in range(n - 1):
        for w in range(n):
            events.append(Event(t, w, (w + 1) % n, Op.REDUCE, (w - t) % n))
    for t in range(n - 1):
        for w in range(n):
            events.append(Event(n - 1 + t, w, (w + 1) % n, Op.COPY, (w + 1 - t) % n))
    return events


@dataclass(frozen=True)
class Topology:
    n: int
    kind: TopoKind
    schedule: tuple[Event, ...]

    @classmethod
    def build(cls, n: int, kind: TopoKind | str = TopoKind.TREE) -> "Topology":
        if n < 1:
            raise InvalidArgument("need at least one worker")
        kind = TopoKind(kind)
        events = _tree_schedule(n) if kind is TopoKind.TREE else _ring_schedule(n)
        return cls(n, kind, tuple(events))

    @property
    def steps(self) -> int:
        return 1 + max((e.step for e in self.schedule), default=-1)

    def by_step(self):
        groups: dict[int, list[Event]] = defaultdict(list)
        for e in self.schedule:
            groups[e.step].append(e)
        return [groups[t] for t in sorted(groups)]


@dataclass
class TrafficReport:
    n: int
    bytes_per_worker: list[int] = field(default_factory=list)
    steps: int = 0
    reduce_invocations: int = 0
    messages: int = 0
    step_bytes: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.bytes_per_worker:
            self.bytes_per_worker = [0] * self.n

    @property
    def bytes_sent_total(self) -> int:
        return sum(self.bytes_per_worker)

    def merge(self, other: "TrafficReport") -> "TrafficReport":
        return TrafficReport(
            self.n,
            [a + b for a, b in zip(self.bytes_per_worker, other.bytes_per_worker)],
            self.steps + other.steps,
            self.reduce_invocations + other.reduce_invocations,
            self.messages + other.messages,
            self.step_bytes + other.step_bytes,
        )


# -- payload codecs ----------------------------------------------------------

_INT = {8: "<i1", 16: "<i2", 32: "<i4"}


class IntSum:
    """Signed integer addition on ``width``-bit wire integers."""

    msg_type = MsgType.DENSE

    def __init__(self, width: int = 32):
        if width not in _INT:
            raise InvalidArgument(f"width must be 8, 16 or 32, got {width}")
        self.width = width

    def encode(self, a) -> bytes:
        a = np.asarray(a, dtype=np.int64)
        self._check(a)
        return a.astype(_INT[self.width]).tobytes()

    def decode(self, buf: bytes):
        return np.frombuffer(buf, _INT[self.width]).astype(np.int64)

    def _check(self, a):
        lim = 2 ** (self.width - 1)
        if a.size and (a.min() < -lim or a.max() > lim - 1):
            raise OverflowDetected(f"integer sum does not fit in {self.width} bits")

    def combine(self, a, b, worker: int, step: int, offset: int = 0):
        out = np.asarray(a, dtype=np.int64) + np.asarray(b, dtype=np.int64)
        self._check(out)
        return out

    def split(self, a, n):
        return np.array_split(np.asarray(a), n)

    def join(self, chunks):
        return np.concatenate(chunks) if chunks else np.zeros(0, np.int64)


class FloatSum:
    """Plain floating-point summation (uncompressed baseline)."""

    msg_type = MsgType.DENSE

    def __init__(self, dtype="<f4"):
        self.dtype = np.dtype(dtype)

    def encode(self, a) -> bytes:
        return np.asarray(a, dtype=self.dtype).tobytes()

    def decode(self, buf: bytes):
        return np.frombuffer(buf, self.dtype).copy()

    def combine(self, a, b, worker: int, step: int, offset: int = 0):
        return (np.asarray(a, self.dtype) + np.asarray(b, self.dtype)).astype(self.dtype)

    split = IntSum.split
    join = IntSum.join


class NormCombine:
    """float64 sum (finite p) or max (p = inf) for the norm exchange."""

    msg_type = MsgType.NORM

    def __init__(self, spec: NormSpec):
        self.spec = spec

    def encode(self, a) -> bytes:
        return np.asarray(a, dtype="<f8").tobytes()

    def decode(self, buf: bytes):
        return np.frombuffer(buf, "<f8").copy()

    def combine(self, a, b, worker: int, step: int, offset: int = 0):
        if self.spec.p == math.inf:
            return np.maximum(a, b)
        return np.asarray(a) + np.asarray(b)

    split = IntSum.split
    join = IntSum.join


class ExpReduce:
    """Stochastic power-of-two reduce on sign/exponent tokens."""

    msg_type = MsgType.EXP

    def __init__(self, m: int, width: int, seed: int, round_: int = 0):
        self.m = m
        self.width = width
        self.seed = seed
        self.round = round_

    def encode(self, t: TokenVector) -> bytes:
        return pack_tokens(t, self.width)

    def decode(self, buf: bytes) -> TokenVector:
        return unpack_tokens(buf, self.width)

    def combine(self, a: TokenVector, b: TokenVector, worker: int, step: int, offset: int = 0):
        u = rngmod.uniforms(self.seed, rngmod.REDUCE, worker, self.round, offset + len(a), step=step)
        return reduce_vec(a, b, u[offset:], self.m)

    def split(self, t: TokenVector, n):
        return [TokenVector(s, e) for s, e in zip(np.array_split(t.signs, n), np.array_split(t.exps, n))]

    def join(self, chunks):
        return TokenVector(np.concatenate([c.signs for c in chunks]), np.concatenate([c.exps for c in chunks]))


# -- transports --------------------------------------------------------------

_FRAME = struct.Struct("<2sBII")
MAGIC = b"\x47\x51"


def encode_frame(msg_type: int, round_: int, payload: bytes) -> bytes:
    return _FRAME.pack(MAGIC, int(msg_type), round_ & 0xFFFFFFFF, len(payload)) + payload


def decode_frame(buf: bytes) -> tuple[int, int, bytes]:
    if len(buf) < _FRAME.size:
        raise ProtocolError("truncated frame header")
    magic, msg_type, round_, length = _FRAME.unpack_from(buf)
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    if msg_type not in MsgType._value2member_map_:
        raise ProtocolError(f"unknown message type {msg_type}")
    if len(buf) != _FRAME.size + length:
        raise ProtocolError("frame length mismatch")
    return msg_type, round_, buf[_FRAME.size:]


class InProcTransport:
    """Per-link FIFO queues inside one process."""

    def __init__(self):
        self._queues: dict[tuple[int, int], deque] = defaultdict(deque)

    def send(self, src: int, dst: int, frame: bytes) -> None:
        self._queues[src, dst].append(bytes(frame))

    def recv(self, src: int, dst: int) -> bytes:
        q = self._queues[src, dst]
        if not q:
            raise AbortedCollective(f"no message from worker {src} to {dst}")
        return q.popleft()

    def flush(self) -> None:
        pass

    def close(self) -> None:
        self._queues.clear()


def _recv_exact(sock: socket.socket, length: int) -> bytes:
    chunks = []
    while length:
        chunk = sock.recv(min(length, 1 << 20))
        if not chunk:
            raise AbortedCollective("peer closed the connection")
        chunks.append(chunk)
        length -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes:
    head = _recv_exact(sock, _FRAME.size)
    magic, _, _, length = _FRAME.unpack(head)
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    return head + _recv_exact(sock, length)


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not port.isdigit() or int(port) > 65535:
        raise InvalidArgument(f"expected HOST:PORT, got {addr!r}")
    return host or "127.0.0.1", int(port)


class TcpTransport:
    """Length-prefixed frames over TCP, one connection per ordered worker pair.

    ``addrs`` maps every rank to its listening address; ``local`` lists the
    ranks hosted by this process. A fresh connection opens with a CTRL frame
    carrying the sender's rank.
    """

    def __init__(self, addrs: dict[int, tuple[str, int]], local: Sequence[int], listeners=None):
        self.addrs = dict(addrs)
        self.local = set(local)
        self._listeners = dict(listeners or {})
        for r in self.local:
            if r not in self._listeners:
                ls = socket.create_server(self.addrs[r], reuse_port=False)
                self._listeners[r] = ls
                self.addrs[r] = ls.getsockname()[:2]
        self._out: dict[tuple[int, int], tuple[socket.socket, ThreadPoolExecutor]] = {}
        self._in: dict[tuple[int, int], socket.socket] = {}
        self._pending = []
        self._lock = threading.Lock()

    @classmethod
    def loopback(cls, n: int) -> "TcpTransport":
        addrs = {r: ("127.0.0.1", 0) for r in range(n)}
        return cls(addrs, range(n))

    def _connect(self, src: int, dst: int):
        with self._lock:
            if (src, dst) not in self._out:
                sock = self._dial(self.addrs[dst])
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.sendall(encode_frame(MsgType.CTRL, 0, struct.pack("<I", src)))
                self._out[src, dst] = (sock, ThreadPoolExecutor(max_workers=1))
            return self._out[src, dst]

    @staticmethod
    def _dial(addr, patience: float = 30.0) -> socket.socket:
        # peers in other processes may not be listening yet
        deadline = time.monotonic() + patience
        while True:
            try:
                return socket.create_connection(addr, timeout=30)
            except ConnectionRefusedError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)

    def send(self, src: int, dst: int, frame: bytes) -> None:
        sock, pool = self._connect(src, dst)
        self._pending.append(pool.submit(sock.sendall, frame))

    def _accept_from(self, src: int, dst: int) -> socket.socket:
        while (src, dst) not in self._in:
            ls = self._listeners[dst]
            ls.settimeout(30)
            try:
                conn, _ = ls.accept()
            except OSError as exc:
                raise AbortedCollective(f"worker {dst} accept failed: {exc}") from exc
            conn.settimeout(30)
            msg_type, _, payload = decode_frame(read_frame(conn))
            if msg_type != MsgType.CTRL:
                raise ProtocolError("connection did not start with a CTRL frame")
            (peer,) = struct.unpack("<I", payload)
            self._in[peer, dst] = conn
        return self._in[src, dst]

    def recv(self, src: int, dst: int) -> bytes:
        try:
            return read_frame(self._accept_from(src, dst))
        except OSError as exc:
            raise AbortedCollective(f"receive {src}->{dst} failed: {exc}") from exc

    def flush(self) -> None:
        pending, self._pending = self._pending, []
        for fut in pending:
            try:
                fut.result(timeout=60)
            except OSError as exc:
                raise AbortedCollective(f"send failed: {exc}") from exc

    def close(self) -> None:
        for sock, pool in self._out.values():
            pool.shutdown(wait=True)
            sock.close()
        for sock in self._in.values():
            sock.close()
        for ls in self._listeners.values():
            ls.close()
        self._out.clear()
        self._in.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_transport(kind: str, n: int):
    if kind == "inproc":
        return InProcTransport()
    if kind == "tcp":
        return TcpTransport.loopback(n)
    raise InvalidArgument(f"unknown transport {kind!r}")


# -- schedule execution ------------------------------------------------------

def _run(states, codec, topo: Topology, transport, round_: int, chunked: bool, local=None):
    """Execute ``topo.schedule`` in step order; returns the final states and traffic."""
    n = topo.n
    local = set(range(n)) if local is None else set(local)
    transport = transport if transport is not None else InProcTransport()
    report = TrafficReport(n, steps=topo.steps)
    offsets = None
    if chunked:
        states = {w: codec.split(states[w], n) for w in local}
        sizes = [len(c) if not isinstance(c, np.ndarray) else c.size for c in next(iter(states.values()))]
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)
    else:
        states = {w: states[w] for w in local}
    try:
        for events in topo.by_step():
            step_bytes = 0
            for ev in events:
                if ev.src in local:
                    obj = states[ev.src][ev.chunk] if chunked else states[ev.src]
                    payload = codec.encode(obj)
                    transport.send(ev.src, ev.dst, encode_frame(codec.msg_type, round_, payload))
                    report.bytes_per_worker[ev.src] += len(payload)
                    step_bytes += len(payload)
                report.messages += 1
            transport.flush()
            for ev in events:
                if ev.dst not in local:
                    continue
                msg_type, _, payload = decode_frame(transport.recv(ev.src, ev.dst))
                if msg_type != codec.msg_type:
                    raise ProtocolError(f"expected message type {codec.msg_type}, got {msg_type}")
                incoming = codec.decode(payload)
                if ev.op is Op.REDUCE:
                    report.reduce_invocations += 1
                    if chunked:
                        mine = states[ev.dst][ev.chunk]
                        states[ev.dst][ev.chunk] = codec.combine(
                            mine, incoming, ev.dst, ev.step, int(offsets[ev.chunk])
                        )
                    else:
                        states[ev.dst] = codec.combine(states[ev.dst], incoming, ev.dst, ev.step)
                elif chunked:
                    states[ev.dst][ev.chunk] = incoming
                else:
                    states[ev.dst] = incoming
            report.step_bytes.append(step_bytes)
    except (OverflowDetected, ProtocolError, AbortedCollective):
        raise
    except Exception as exc:  # any worker failure aborts the collective for everyone
        raise AbortedCollective(f"collective aborted: {exc}") from exc
    if chunked:
        states = {w: codec.join(states[w]) for w in states}
    return states, report


@dataclass
class CollectiveResult:
    values: dict[int, object]
    report: TrafficReport

    @property
    def value(self):
        """The result on the lowest-numbered local worker."""
        return self.values[min(self.values)]


def allreduce(payloads: Sequence, codec, topo: Topology, transport=None, round_: int = 0, local=None):
    if len(payloads) != topo.n:
        raise InvalidArgument(f"expected {topo.n} payloads, got {len(payloads)}")
    shapes = {np.shape(p.exps if isinstance(p, TokenVector) else p) for p in payloads if p is not None}
    if len(shapes) > 1:
        raise InvalidArgument(f"payload shapes differ: {sorted(shapes)}")
    chunked = topo.kind is TopoKind.RING
    states, report = _run(list(payloads), codec, topo, transport, round_, chunked, local)
    return CollectiveResult(states, report)


def tree_allreduce(payloads, codec, topo: Topology, transport=None, round_: int = 0, local=None):
    if topo.kind is not TopoKind.TREE:
        raise InvalidArgument("tree_allreduce needs a tree topology")
    return allreduce(payloads, codec, topo, transport, round_, local)


def ring_allreduce(payloads, codec, topo: Topology, transport=None, round_: int = 0, local=None):
    if topo.kind is not TopoKind.RING:
        raise InvalidArgument("ring_allreduce needs a ring topology")
    return allreduce(payloads, codec, topo, transport, round_, local)


def norm_allreduce(stats: Sequence[float], spec: NormSpec, topo: Topology, transport=None, round_: int = 0, local=None):
    """Global norm on every worker: sum-then-root for p = 2, max for p = inf."""
    payloads = [np.array([float(s)]) if s is not None else None for s in stats]
    tree = Topology.build(topo.n, TopoKind.TREE) if topo.kind is TopoKind.RING else topo
    res = allreduce(payloads, NormCombine(spec), tree, transport, round_, local)
    root = (lambda v: float(v[0])) if spec.p == math.inf else (lambda v: math.sqrt(float(v[0])))
    return CollectiveResult({w: root(v) for w, v in res.values.items()}, res.report)


class _BytesCodec:
    def __init__(self, msg_type):
        self.msg_type = msg_type

    def encode(self, b):
        return bytes(b)

    def decode(self, b):
        return b


def allgather(payloads: Sequence[bytes], topo: Topology, transport=None, round_: int = 0,
              msg_type: MsgType = MsgType.SPARSE, local=None):
    """Every worker ends with all ``n`` byte payloads in worker order.

    Items travel around the ring, each forwarded ``n - 1`` times.
    """
    n = topo.n
    local = set(range(n)) if local is None else set(local)
    transport = transport if transport is not None else InProcTransport()
    codec = _BytesCodec(msg_type)
    held = {w: {w: bytes(payloads[w])} for w in local}
    report = TrafficReport(n, steps=max(n - 1, 0))
    try:
        for t in range(n - 1):
            step_bytes = 0
            for w in range(n):
                item, dst = (w - t) % n, (w + 1) % n
                if w in local:
                    data = held[w][item]
                    transport.send(w, dst, encode_frame(msg_type, round_, data))
                    report.bytes_per_worker[w] += len(data)
                    step_bytes += len(data)
                report.messages += 1
            transport.flush()
            for w in range(n):
                item, dst = (w - t) % n, (w + 1) % n
                if dst in local:
                    mt, _, data = decode_frame(transport.recv(w, dst))
                    if mt != msg_type:
                        raise ProtocolError(f"expected message type {msg_type}, got {mt}")
                    held[dst][item] = codec.decode(data)
            report.step_bytes.append(step_bytes)
    except (ProtocolError, AbortedCollective):
        raise
    except Exception as exc:
        raise AbortedCollective(f"allgather aborted: {exc}") from exc
    return CollectiveResult({w: [held[w][i] for i in range(n)] for w in local}, report)


def schedule_traffic(topo: Topology, d: int, itemsize: int) -> TrafficReport:
    """Traffic of an Allreduce of ``d`` elements of ``itemsize`` bytes, without moving data."""
    report = TrafficReport(topo.n, steps=topo.steps)
    sizes = [c.size * itemsize for c in np.array_split(np.arange(d), topo.n)]
    for events in topo.by_step():
        step = 0
        for ev in events:
            size = d * itemsize if ev.chunk is None else sizes[ev.chunk]
            report.bytes_per_worker[ev.src] += size
            report.messages += 1
            report.reduce_invocations += ev.op is Op.REDUCE
            step += size
        report.step_bytes.append(step)
    return report
