"""Level grids, global norms and unbiased stochastic rounding.

A worker normalizes its shard by the norm of the *concatenated* vector of all
shards, so every worker quantizes onto the same grid and the quantized values
can be summed directly by an Allreduce.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CorruptPayload, InvalidArgument, InvalidInput, PreconditionViolation


class LevelKind(enum.Enum):
    STANDARD = "standard"
    EXPONENTIAL = "exponential"
    CUSTOM = "custom"


@dataclass(frozen=True)
class LevelScheme:
    """Decreasing quantization grid ``levels[0] = 1 > ... > levels[s] = 0``."""

    kind: LevelKind
    s: int
    levels: tuple[float, ...]
    _array: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.s < 1 or len(self.levels) != self.s + 1:
            raise InvalidArgument(f"need s >= 1 and s+1 levels, got s={self.s}, {len(self.levels)} levels")
        arr = np.asarray(self.levels, dtype=np.float64)
        if arr[0] != 1.0 or arr[-1] != 0.0 or np.any(np.diff(arr) >= 0):
            raise InvalidArgument("levels must start at 1, end at 0 and strictly decrease")
        arr.setflags(write=False)
        object.__setattr__(self, "_array", arr)

    @classmethod
    def custom(cls, levels: Sequence[float]) -> "LevelScheme":
        return cls(LevelKind.CUSTOM, len(levels) - 1, tuple(float(v) for v in levels))

    @property
    def array(self) -> np.ndarray:
        return self._array

    def level(self, idx):
        """Level value(s) for index array ``idx``."""
        return self._array[idx]

    @property
    def index_bits(self) -> int:
        """Bits needed to store a level index in {0..s}."""
        return max(1, int(self.s).bit_length())


def build_levels(kind: LevelKind | str, s: int) -> LevelScheme:
    kind = LevelKind(kind)
    if not isinstance(s, (int, np.integer)) or s < 1:
        raise InvalidArgument(f"s must be a positive integer, got {s!r}")
    s = int(s)
    if kind is LevelKind.STANDARD:
        levels = tuple((s - i) / s for i in range(s + 1))
    elif kind is LevelKind.EXPONENTIAL:
        levels = tuple(math.ldexp(1.0, -i) for i in range(s)) + (0.0,)
    else:
        raise InvalidArgument("use LevelScheme.custom for custom grids")
    return LevelScheme(kind, s, levels)


@dataclass(frozen=True)
class NormSpec:
    """Element norm order ``q`` and aggregation order ``p``, each 2 or inf."""

    q: float = math.inf
    p: float = math.inf

    def __post_init__(self):
        for name in ("q", "p"):
            v = getattr(self, name)
            if v not in (2, math.inf):
                raise InvalidArgument(f"{name} must be 2 or inf, got {v!r}")

    @classmethod
    def parse(cls, name: str) -> "NormSpec":
        table = {"l2": cls(2, 2), "linf": cls(math.inf, math.inf)}
        try:
            return table[name.lower()]
        except KeyError:
            raise InvalidArgument(f"unknown norm {name!r}; expected l2 or linf") from None


def _as_finite(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInput("vector contains NaN or Inf")
    return x


def _squared(v: float, what: str) -> float:
    # p = 2 ships squared norms; overflow is an error, underflow only loses
    # shards too small to matter unless every shard is that small
    sq = v * v
    if not math.isfinite(sq):
        raise InvalidInput(f"{what} {v:.3g} overflows when squared")
    return sq


def local_norm_stat(x, spec: NormSpec) -> float:
    """Per-worker statistic to be combined by the norm Allreduce.

    ``||x||_q ** p`` for finite ``p`` (sum-combined), ``||x||_q`` for ``p = inf``
    (max-combined). Squared statistics that overflow binary64 raise
    :class:`InvalidInput`.
    """
    x = _as_finite(x).ravel()
    if x.size == 0:
        return 0.0
    amax = float(np.max(np.abs(x)))
    if spec.q == math.inf:
        return amax if spec.p == math.inf else _squared(amax, "max magnitude")
    if amax == 0:
        return 0.0
    # scale by the largest magnitude so the sum of squares cannot under- or overflow
    qnorm = amax * math.sqrt(float(np.dot(x / amax, x / amax)))
    qnorm = max(qnorm, amax)
    return qnorm if spec.p == math.inf else _squared(qnorm, "shard norm")


def combine_norm_stats(stats: Sequence[float], spec: NormSpec) -> float:
    stats = np.asarray(stats, dtype=np.float64)
    if np.any(stats < 0) or not np.all(np.isfinite(stats)):
        raise InvalidInput("norm statistics must be finite and non-negative")
    if stats.size == 0:
        return 0.0
    if spec.p == math.inf:
        return float(np.max(stats))
    try:
        total = math.fsum(stats.tolist())
    except OverflowError:
        total = math.inf
    if not math.isfinite(total):
        raise InvalidInput("norm statistic overflowed")
    return math.sqrt(total)


def global_norm(shards: Sequence, spec: NormSpec) -> float:
    """``||xx||_{q,p}`` of the concatenated shards, computed in one process."""
    norm = combine_norm_stats([local_norm_stat(x, spec) for x in shards], spec)
    amax = max((float(np.max(np.abs(x))) for x in map(np.ravel, shards) if x.size), default=0.0)
    if norm < amax:
        raise InvalidInput(f"squared norm statistics underflowed (max magnitude {amax:.3g})")
    return norm


def random_round(y: float, scheme: LevelScheme, u01: float) -> int:
    """Round ``y`` in [0, 1] to one of its two neighbouring levels.

    Reference scalar implementation: returns the index of the upper level
    with probability proportional to the distance from the lower one.
    """
    if not 0.0 <= y <= 1.0:
        raise InvalidInput(f"normalized value {y!r} outside [0, 1]")
    lv = scheme.array
    # smallest u with levels[u+1] <= y; levels decrease so search the reversed grid
    u = scheme.s - 1 - (int(np.searchsorted(lv[::-1], y, side="right")) - 1)
    u = min(max(u, 0), scheme.s - 1)
    upper, lower = lv[u], lv[u + 1]
    p_up = (y - lower) / (upper - lower)
    return u if u01 < p_up else u + 1


def _round_standard(y: np.ndarray, s: int, u: np.ndarray) -> np.ndarray:
    v = y * s
    j = np.minimum(np.floor(v), s)
    mag = j + (u < (v - j))
    return (s - mag).astype(np.int64)


def _round_exponential(y: np.ndarray, s: int, u: np.ndarray) -> np.ndarray:
    mant, expo = np.frexp(y)
    # y = mant * 2**expo with mant in [0.5, 1): bracket [2**(expo-1), 2**expo],
    # upper index -expo, lower index 1-expo, P(upper) = 2*mant - 1 exactly
    idx = (1 - expo) - (u < 2.0 * mant - 1.0)
    tail = y < math.ldexp(1.0, -(s - 1))
    # last segment [0, 2**-(s-1)] rounds to index s-1 or s (zero)
    tail_idx = s - (u < np.ldexp(y, s - 1))
    return np.where(tail, tail_idx, idx).astype(np.int64)


def _round_generic(y: np.ndarray, scheme: LevelScheme, u: np.ndarray) -> np.ndarray:
    lv = scheme.array
    s = scheme.s
    rev = lv[::-1]
    upper_idx = s - 1 - (np.searchsorted(rev, y, side="right") - 1)
    upper_idx = np.clip(upper_idx, 0, s - 1)
    upper, lower = lv[upper_idx], lv[upper_idx + 1]
    p_up = (y - lower) / (upper - lower)
    return np.where(u < p_up, upper_idx, upper_idx + 1).astype(np.int64)


def round_levels(y, scheme: LevelScheme, u) -> np.ndarray:
    """Vectorized :func:`random_round` over arrays of any shape."""
    y = np.asarray(y, dtype=np.float64)
    u = np.broadcast_to(np.asarray(u, dtype=np.float64), y.shape)
    if y.size and (y.min() < 0.0 or y.max() > 1.0):
        raise InvalidInput("normalized values outside [0, 1]")
    if scheme.kind is LevelKind.STANDARD:
        return _round_standard(y, scheme.s, u)
    if scheme.kind is LevelKind.EXPONENTIAL:
        return _round_exponential(y, scheme.s, u)
    return _round_generic(y, scheme, u)


def quantize_levels(x, norm, scheme: LevelScheme, u) -> tuple[np.ndarray, np.ndarray]:
    """Signs and level indices for ``x`` normalized by ``norm``.

    Works on any array shape; ``norm`` broadcasts against ``x`` (a trailing
    axis of length 1 per trial is typical for batched use).
    """
    x = _as_finite(x)
    norm = np.asarray(norm, dtype=np.float64)
    signs = np.where(x < 0, -1, 1).astype(np.int8)
    mag = np.abs(x)
    if np.any(mag > norm):
        raise PreconditionViolation("norm is smaller than an element magnitude")
    safe = np.where(norm > 0, norm, 1.0)
    y = np.where(norm > 0, mag / safe, 0.0)
    idx = round_levels(y, scheme, u)
    return signs, idx


@dataclass(frozen=True)
class QuantizedShard:
    signs: np.ndarray
    level_idx: np.ndarray
    norm: float

    @property
    def d(self) -> int:
        return int(self.level_idx.size)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def quantize_shard(x, norm: float, scheme: LevelScheme, rng) -> QuantizedShard:
    """Quantize one worker's shard against the shared global ``norm``.

    ``rng`` is a numpy Generator or a precomputed array of uniforms, one per
    element.
    """
    x = _as_finite(x).ravel()
    norm = float(norm)
    if norm == 0.0:
        if np.any(x != 0):
            raise PreconditionViolation("zero norm with a nonzero shard")
        return QuantizedShard(
            _frozen(np.ones(x.size, np.int8)), _frozen(np.full(x.size, scheme.s, np.int64)), 0.0
        )
    u = rng.random(x.size) if isinstance(rng, np.random.Generator) else np.asarray(rng, np.float64)
    if u.shape != x.shape:
        raise InvalidArgument("need one uniform per element")
    signs, idx = quantize_levels(x, norm, scheme, u)
    return QuantizedShard(_frozen(signs), _frozen(idx), norm)


def decode_shard(shard: QuantizedShard, scheme: LevelScheme) -> np.ndarray:
    idx = np.asarray(shard.level_idx)
    if idx.size and (idx.min() < 0 or idx.max() > scheme.s):
        raise CorruptPayload(f"level index outside 0..{scheme.s}")
    return shard.norm * shard.signs * scheme.level(idx)


@dataclass(frozen=True)
class SparsePayload:
    """Nonzero coordinates of a quantized shard."""

    d: int
    indices: np.ndarray
    signs: np.ndarray
    level_idx: np.ndarray
    norm: float = 0.0

    @property
    def nnz(self) -> int:
        return int(self.indices.size)


def to_sparse(shard: QuantizedShard, scheme: LevelScheme) -> SparsePayload:
    keep = np.flatnonzero(np.asarray(shard.level_idx) < scheme.s)
    return SparsePayload(
        shard.d,
        _frozen(keep.astype(np.uint32)),
        _frozen(np.asarray(shard.signs)[keep]),
        _frozen(np.asarray(shard.level_idx)[keep]),
        shard.norm,
    )


def _check_sparse(payload: SparsePayload, scheme: LevelScheme) -> None:
    idx = np.asarray(payload.indices, dtype=np.int64)
    if idx.size:
        if idx.min() < 0 or idx.max() >= payload.d or np.any(np.diff(idx) <= 0):
            raise CorruptPayload("sparse indices must be strictly increasing and < d")
        lv = np.asarray(payload.level_idx)
        if lv.min() < 0 or lv.max() >= scheme.s:
            raise CorruptPayload("sparse payload stores a zero or out-of-range level")
    if not (idx.size == np.size(payload.signs) == np.size(payload.level_idx)):
        raise CorruptPayload("sparse payload arrays differ in length")


def from_sparse(payload: SparsePayload, scheme: LevelScheme, norm: float | None = None) -> np.ndarray:
    _check_sparse(payload, scheme)
    norm = payload.norm if norm is None else float(norm)
    out = np.zeros(payload.d)
    out[np.asarray(payload.indices, dtype=np.int64)] = norm * payload.signs * scheme.level(payload.level_idx)
    return out


# -- wire formats (little-endian) ------------------------------------------

_UINT = {8: "<u1", 16: "<u2", 32: "<u4"}
_DENSE_HEAD = struct.Struct("<dI")
_SPARSE_HEAD = struct.Struct("<dII")


def index_width(scheme: LevelScheme) -> int:
    """Smallest wire width in {8, 16, 32} that stores every level index."""
    for w in (8, 16, 32):
        if scheme.s < 2 ** w:
            return w
    raise InvalidArgument("too many levels")


def _pack_uint(values, width: int) -> bytes:
    if width not in _UINT:
        raise InvalidArgument(f"width must be 8, 16 or 32, got {width}")
    values = np.asarray(values, dtype=np.int64)
    if values.size and (values.min() < 0 or values.max() >= 2 ** width):
        raise InvalidArgument(f"value does not fit in {width} bits")
    return values.astype(_UINT[width]).tobytes()


def _bitmap(signs) -> bytes:
    return np.packbits(np.asarray(signs) < 0, bitorder="little").tobytes()


def _unbitmap(buf: bytes, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, np.uint8), count=count, bitorder="little")
    return np.where(bits == 1, -1, 1).astype(np.int8)


def encode_shard(shard: QuantizedShard, width: int = 8) -> bytes:
    """``[norm f64][d u32][sign bitmap][level indices, width bits each]``."""
    return _DENSE_HEAD.pack(shard.norm, shard.d) + _bitmap(shard.signs) + _pack_uint(shard.level_idx, width)


def decode_shard_bytes(buf: bytes, width: int = 8) -> QuantizedShard:
    if width not in _UINT or len(buf) < _DENSE_HEAD.size:
        raise CorruptPayload("truncated dense shard")
    norm, d = _DENSE_HEAD.unpack_from(buf)
    nbm = (d + 7) // 8
    expected = _DENSE_HEAD.size + nbm + d * width // 8
    if len(buf) != expected:
        raise CorruptPayload(f"dense shard has {len(buf)} bytes, expected {expected}")
    off = _DENSE_HEAD.size
    signs = _unbitmap(buf[off:off + nbm], d)
    idx = np.frombuffer(buf, _UINT[width], count=d, offset=off + nbm).astype(np.int64)
    return QuantizedShard(_frozen(signs), _frozen(idx), norm)


def encode_sparse(payload: SparsePayload, width: int = 8) -> bytes:
    """``[norm][d][nnz][indices u32][sign bitmap over nnz][level indices over nnz]``."""
    return (
        _SPARSE_HEAD.pack(payload.norm, payload.d, payload.nnz)
        + np.asarray(payload.indices, dtype="<u4").tobytes()
        + _bitmap(payload.signs)
        + _pack_uint(payload.level_idx, width)
    )


def decode_sparse(buf: bytes, width: int = 8) -> SparsePayload:
    if width not in _UINT or len(buf) < _SPARSE_HEAD.size:
        raise CorruptPayload("truncated sparse payload")
    norm, d, nnz = _SPARSE_HEAD.unpack_from(buf)
    nbm = (nnz + 7) // 8
    expected = _SPARSE_HEAD.size + 4 * nnz + nbm + nnz * width // 8
    if len(buf) != expected:
        raise CorruptPayload(f"sparse payload has {len(buf)} bytes, expected {expected}")
    off = _SPARSE_HEAD.size
    indices = np.frombuffer(buf, "<u4", count=nnz, offset=off).astype(np.uint32)
    off += 4 * nnz
    signs = _unbitmap(buf[off:off + nbm], nnz)
    idx = np.frombuffer(buf, _UINT[width], count=nnz, offset=off + nbm).astype(np.int64)
    idx_sorted = indices.astype(np.int64)
    if nnz and (idx_sorted.max() >= d or np.any(np.diff(idx_sorted) <= 0)):
        raise CorruptPayload("sparse indices must be strictly increasing and < d")
    return SparsePayload(d, _frozen(indices), _frozen(signs), _frozen(idx), norm)
