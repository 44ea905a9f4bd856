"""Analytic cost of tree Allreduce, with and without quantized payloads.

Costs use log base 2 of the worker count. ``omega`` is the ratio of the
quantized reduction throughput to the native one (``gamma_hat / gamma``), so
``omega = 1/79`` means the custom reduce is 79 times slower.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

from .errors import InvalidArgument

# Reduction-throughput ratios measured on an A100 with 25 MB buffers;
# hardware specific, shipped as defaults only.
OMEGA_STANDARD = 1.0
OMEGA_EXPONENTIAL = 1.0 / 79.0
DEFAULT_SIZE = 25 * 2 ** 20


class Verdict(enum.Enum):
    ALWAYS = "always"
    NEVER = "never"
    BOUNDED = "bounded"


@dataclass(frozen=True)
class CostParams:
    alpha: float
    beta: float
    gamma: float
    S: float
    N: int
    rho: float = 4.0
    omega: float = 1.0
    delta: float = 0.0

    def __post_init__(self):
        if self.N < 2:
            raise InvalidArgument("the cost model needs N >= 2 workers")
        if min(self.beta, self.gamma, self.S, self.omega) <= 0 or self.alpha < 0 or self.delta < 0:
            raise InvalidArgument("alpha, delta must be >= 0; beta, gamma, S, omega must be > 0")
        if self.rho < 1:
            raise InvalidArgument("rho must be >= 1")

    @property
    def S_hat(self) -> float:
        return self.S / self.rho

    @property
    def gamma_hat(self) -> float:
        return self.gamma * self.omega

    def with_(self, **kw) -> "CostParams":
        return replace(self, **kw)


def baseline_cost(p: CostParams) -> float:
    lg = math.log2(p.N)
    return 2 * lg * p.alpha + 2 * lg * p.S / p.beta + lg * p.S / p.gamma


def quantized_cost(p: CostParams) -> float:
    lg = math.log2(p.N)
    return 2 * lg * p.alpha + 2 * lg * p.S_hat / p.beta + lg * p.S_hat / p.gamma_hat + p.delta * p.S


@dataclass(frozen=True)
class Threshold:
    verdict: Verdict
    beta_max: float = math.nan

    def speedup(self, beta: float) -> bool:
        if self.verdict is Verdict.ALWAYS:
            return True
        if self.verdict is Verdict.NEVER:
            return False
        return beta < self.beta_max


def speedup_threshold(omega: float, rho: float, gamma: float) -> Threshold:
    """Largest bandwidth at which quantization still pays off (delta = 0).

    Speedup holds iff ``2(rho-1)/beta > (1 - omega*rho) / (omega*gamma)``.
    """
    if min(omega, rho, gamma) <= 0:
        raise InvalidArgument("omega, rho and gamma must be positive")
    c = 1.0 - omega * rho
    if c < 0:
        return Threshold(Verdict.ALWAYS)
    if rho == 1:
        return Threshold(Verdict.NEVER)
    if c == 0:
        return Threshold(Verdict.ALWAYS)
    return Threshold(Verdict.BOUNDED, 2 * omega * (rho - 1) / c * gamma)


@dataclass(frozen=True)
class Prediction:
    baseline: float
    quantized: float
    threshold: Threshold

    @property
    def ratio(self) -> float:
        return self.baseline / self.quantized

    @property
    def speedup(self) -> bool:
        return self.baseline > self.quantized


def predict(p: CostParams) -> Prediction:
    return Prediction(baseline_cost(p), quantized_cost(p), speedup_threshold(p.omega, p.rho, p.gamma))


def format_table(p: CostParams) -> str:
    pr = predict(p)
    th = pr.threshold
    if th.verdict is Verdict.BOUNDED:
        bound = f"beta < {th.beta_max:.6g} B/s = {th.beta_max / p.gamma:.6g} * gamma"
    else:
        bound = th.verdict.value
    rows = [
        ("alpha [s]", f"{p.alpha:.6g}"),
        ("beta [B/s]", f"{p.beta:.6g}"),
        ("gamma [B/s]", f"{p.gamma:.6g}"),
        ("omega", f"{p.omega:.6g}"),
        ("rho", f"{p.rho:.6g}"),
        ("S [B]", f"{p.S:.6g}"),
        ("N", str(p.N)),
        ("delta", f"{p.delta:.6g}"),
        ("baseline [s]", f"{pr.baseline:.6g}"),
        ("quantized [s]", f"{pr.quantized:.6g}"),
        ("speedup ratio", f"{pr.ratio:.6g}"),
        ("beta_max", bound),
        ("verdict", "speedup" if pr.speedup else "no speedup"),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)
