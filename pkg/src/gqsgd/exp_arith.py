"""Sign/exponent tokens and the unbiased stochastic reduce for exponential dithering.

A token ``(sign, e)`` stands for ``sign * 2**-e``, with ``e = 0`` reserved for
exact zero. Summing two tokens yields a real number that is generally not a
power of two, so the reduce re-rounds the sum to a neighbouring power of two
with probabilities that keep it unbiased. All inputs are divided by a power of
two at least ``2n`` beforehand, which keeps every partial sum at or below 1/2
and therefore every nonzero exponent at or above 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import CorruptPayload, InvalidArgument, OverflowDetected
from .quantizer import LevelKind


@dataclass(frozen=True)
class ExpToken:
    sign: int
    e: int

    def __post_init__(self):
        if self.sign not in (-1, 1) or self.e < 0:
            raise InvalidArgument(f"invalid token {self.sign, self.e}")

    def value(self) -> Fraction:
        """Exact dyadic value."""
        return Fraction(0) if self.e == 0 else self.sign * Fraction(1, 2 ** self.e)

    def __float__(self) -> float:
        return 0.0 if self.e == 0 else self.sign * math.ldexp(1.0, -self.e)


def ceil_log2(n: int) -> int:
    return (int(n) - 1).bit_length()


@dataclass(frozen=True)
class ReduceContext:
    """Parameters of one exponential-dithering aggregation.

    Inputs are scaled down by ``2**shift`` so no partial sum can reach 1. A
    binary tree adds sibling subtrees, so a node covering ``2**t`` workers
    stays below ``2**(t - shift)`` and ``shift = 1 + ceil(log2 n)`` suffices.
    A ring accumulates one worker at a time and each re-rounding may double
    the power-of-two bound, so ``sequential=True`` uses ``shift = n``.
    ``m`` bounds the exponent gap the k-sampler resolves exactly; exponents
    range over ``1 .. s - 1 + shift``, so ``m = s + shift`` keeps every gap
    below ``m``.
    """

    s: int
    n: int
    width: int = 8
    sequential: bool = False

    @property
    def shift(self) -> int:
        """Exponent offset added by the power-of-two prescale."""
        return max(self.n, 1) if self.sequential else 1 + ceil_log2(self.n)

    @property
    def m(self) -> int:
        return self.s + self.shift

    @property
    def max_exponent(self) -> int:
        return self.s - 1 + self.shift

    @property
    def fits(self) -> bool:
        return self.max_exponent < 2 ** (self.width - 1)


def prescale(x, n: int) -> np.ndarray:
    """Divide by ``2**(1 + ceil(log2 n))``: ``2n`` for power-of-two ``n``, the next power of two above otherwise.

    A power-of-two factor keeps :func:`postscale` an exact inverse.
    """
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    return np.ldexp(np.asarray(x, dtype=np.float64), -(1 + ceil_log2(n)))


def postscale(x, n: int) -> np.ndarray:
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    return np.ldexp(np.asarray(x, dtype=np.float64), 1 + ceil_log2(n))


def sample_k(u01, m: int):
    """``k = -floor(log2(max(u, 2**-m)))`` so that ``P(k > b) = 2**-b`` for b < m.

    The floor of the logarithm is read off the binary exponent, so there is
    no transcendental rounding at power-of-two boundaries. Accepts scalars or
    arrays.
    """
    if m < 1:
        raise InvalidArgument("m must be >= 1")
    p = np.maximum(np.asarray(u01, dtype=np.float64), math.ldexp(1.0, -m))
    _, expo = np.frexp(p)
    k = (1 - expo).astype(np.int64)
    return int(k) if k.ndim == 0 else k


def cnat_round(x: float, u01: float) -> float:
    """Unbiased stochastic rounding of ``x`` to an adjacent power of two."""
    if x == 0:
        return 0.0
    mant, expo = math.frexp(abs(x))
    # |x| in [2**(expo-1), 2**expo); P(up) = (|x| - lo) / lo = 2*mant - 1
    lo = math.ldexp(1.0, expo - 1)
    mag = 2 * lo if u01 < 2 * mant - 1 else lo
    return math.copysign(mag, x)


def reduce_pair(t1: ExpToken, t2: ExpToken, k: int) -> ExpToken:
    """Add two tokens and re-round to a single token (branch-free form)."""
    s1, e1, s2, e2 = t1.sign, t1.e, t2.sign, t2.e
    e1nz = int(e1 > 0)
    e2nz = int(e2 > 0)
    e2z = 1 - e2nz
    sign12 = s1 * s2 * e1nz * e2nz
    diff = abs(e1 - e2) - (1 - sign12) // 2
    smaller = (int(e1 <= e2) + e2z) * e1nz
    nonz = 1 - int(e1 == e2 and sign12 == -1)
    sign_out = s1 * smaller + s2 * (1 - smaller)
    e_out = (e1 * smaller + e2 * (1 - smaller) - sign12 * int(k > diff)) * nonz
    if sign12 == 1 and e_out <= 0:
        raise OverflowDetected("token sum reached 1; inputs were not prescaled")
    return ExpToken(sign_out, e_out)


def reduce_arrays(s1, e1, s2, e2, k) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`reduce_pair` on sign/exponent integer arrays."""
    e1 = np.asarray(e1, dtype=np.int64)
    e2 = np.asarray(e2, dtype=np.int64)
    s1 = np.asarray(s1, dtype=np.int64)
    s2 = np.asarray(s2, dtype=np.int64)
    e1nz = (e1 > 0).astype(np.int64)
    e2z = (e2 == 0).astype(np.int64)
    sign12 = s1 * s2 * e1nz * (1 - e2z)
    diff = np.abs(e1 - e2) - (1 - sign12) // 2
    smaller = ((e1 <= e2).astype(np.int64) + e2z) * e1nz
    nonz = 1 - ((e1 == e2) & (sign12 == -1)).astype(np.int64)
    sign_out = s1 * smaller + s2 * (1 - smaller)
    e_out = (e1 * smaller + e2 * (1 - smaller) - sign12 * (k > diff)) * nonz
    if np.any((sign12 == 1) & (e_out <= 0)):
        raise OverflowDetected("token sum reached 1; inputs were not prescaled")
    # zeros carry sign +1 so equal sums compare bit-equal
    sign_out = np.where(e_out == 0, 1, sign_out)
    return sign_out.astype(np.int8), e_out


@dataclass(frozen=True)
class TokenVector:
    signs: np.ndarray
    exps: np.ndarray

    def __len__(self):
        return int(self.exps.shape[-1])

    def values(self) -> np.ndarray:
        return np.where(self.exps == 0, 0.0, self.signs * np.ldexp(1.0, -self.exps.astype(np.int64)))


def reduce_vec(v1: TokenVector, v2: TokenVector, rng, m: int) -> TokenVector:
    """Element-wise reduce with an independent ``k`` per element.

    ``rng`` is a numpy Generator or an array of uniforms shaped like the
    tokens.
    """
    if v1.exps.shape != v2.exps.shape:
        raise InvalidArgument("token vectors differ in length")
    u = rng.random(v1.exps.shape) if isinstance(rng, np.random.Generator) else np.asarray(rng)
    k = sample_k(u, m)
    signs, exps = reduce_arrays(v1.signs, v1.exps, v2.signs, v2.exps, k)
    return TokenVector(signs, exps)


def tokens_from_levels(signs, level_idx, s: int, shift: int) -> TokenVector:
    """Tokens for quantized levels ``2**-idx`` scaled down by ``2**shift``."""
    idx = np.asarray(level_idx, dtype=np.int64)
    zero = idx >= s
    exps = np.where(zero, 0, idx + shift)
    sg = np.where(zero, 1, np.asarray(signs)).astype(np.int8)
    return TokenVector(sg, exps)


def check_width(s: int, n: int, A: int, kind) -> bool:
    """Whether aggregating ``n`` workers' ``s``-level payloads fits signed ``A``-bit integers.

    Standard dithering needs ``1 + log2(s+1) + log2(n) <= A``; exponential
    dithering only ships exponents and needs ``1 + log2(s + 1 + log2 n) <= A``.
    Both are evaluated in exact integer arithmetic, rounding ``log2 n`` up.
    """
    if min(s, n, A) < 1:
        raise InvalidArgument("s, n and A must be positive")
    kind = LevelKind(kind)
    if kind is LevelKind.EXPONENTIAL:
        return s + 1 + ceil_log2(n) <= 2 ** (A - 1)
    return (s + 1) * 2 ** ceil_log2(n) <= 2 ** (A - 1)


# -- wire atoms: [1 sign bit][A-1 exponent bits] ---------------------------

_LANE = {8: "<u1", 16: "<u2", 32: "<u4"}


def pack_tokens(tokens: TokenVector, width: int) -> bytes:
    if width not in _LANE:
        raise InvalidArgument(f"width must be 8, 16 or 32, got {width}")
    exps = np.asarray(tokens.exps, dtype=np.int64)
    if exps.size and exps.max() >= 2 ** (width - 1):
        raise OverflowDetected(f"exponent does not fit in {width - 1} bits")
    word = exps | (np.asarray(tokens.signs) < 0).astype(np.int64) << (width - 1)
    return word.astype(_LANE[width]).tobytes()


def unpack_tokens(buf: bytes, width: int) -> TokenVector:
    if width not in _LANE or len(buf) % (width // 8):
        raise CorruptPayload("token buffer length does not match width")
    word = np.frombuffer(buf, _LANE[width]).astype(np.int64)
    exps = word & (2 ** (width - 1) - 1)
    signs = np.where(word >> (width - 1), -1, 1).astype(np.int8)
    return TokenVector(signs, exps)
