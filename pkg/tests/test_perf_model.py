import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gqsgd.errors import InvalidArgument
from gqsgd.perf_model import (
    OMEGA_EXPONENTIAL,
    CostParams,
    Verdict,
    baseline_cost,
    format_table,
    predict,
    quantized_cost,
    speedup_threshold,
)


def params(**kw):
    base = dict(alpha=1e-5, beta=50e9, gamma=2e12, S=25e6, N=8)
    base.update(kw)
    return CostParams(**base)


def test_baseline_examples():
    assert baseline_cost(CostParams(0, 1e18, 1, 1, 2)) == pytest.approx(1.0)
    p2 = params(N=2)
    assert baseline_cost(params(N=16)) == pytest.approx(4 * baseline_cost(p2))
    assert baseline_cost(params(alpha=0, S=2e6)) == pytest.approx(2 * baseline_cost(params(alpha=0, S=1e6)))
    with pytest.raises(InvalidArgument):
        params(N=1)


def test_quantized_examples():
    p = params(rho=1.0, omega=1.0)
    assert quantized_cost(p) == baseline_cost(p)
    p = params(alpha=0.0, rho=4.0, omega=1.0)
    assert quantized_cost(p) == pytest.approx(baseline_cost(p) / 4)
    assert quantized_cost(params(delta=1e-9)) - quantized_cost(params()) == pytest.approx(1e-9 * 25e6)


def test_params_validation():
    with pytest.raises(InvalidArgument):
        params(rho=0.5)
    with pytest.raises(InvalidArgument):
        params(beta=0)
    with pytest.raises(InvalidArgument):
        params(alpha=-1)
    assert params(rho=4).S_hat == 25e6 / 4
    assert params(omega=0.5).gamma_hat == 1e12


def test_threshold_examples():
    th = speedup_threshold(1 / 79, 4, 1.0)
    assert th.verdict is Verdict.BOUNDED
    assert th.beta_max == pytest.approx(0.08, rel=1e-12)
    assert speedup_threshold(1.0, 4, 2e12).verdict is Verdict.ALWAYS
    assert speedup_threshold(1.0, 1, 2e12).verdict is Verdict.NEVER
    # omega*rho = 1 exactly: the compute term vanishes and any bandwidth gives a speedup
    assert speedup_threshold(0.25, 4, 1.0).verdict is Verdict.ALWAYS
    with pytest.raises(InvalidArgument):
        speedup_threshold(0, 4, 1)


def test_nvlink_and_pcie_predictions():
    th = speedup_threshold(OMEGA_EXPONENTIAL, 4, 2e12)
    assert th.beta_max == pytest.approx(160e9, rel=1e-12)
    assert th.speedup(53.9e9)
    assert predict(params(alpha=0, beta=53.9e9, omega=OMEGA_EXPONENTIAL)).speedup
    assert predict(params(alpha=0, beta=5.4e9, omega=OMEGA_EXPONENTIAL)).speedup
    assert not predict(params(alpha=0, beta=400e9, omega=OMEGA_EXPONENTIAL)).speedup


def test_rho_one_gives_unit_ratio():
    pr = predict(params(rho=1.0, omega=1.0))
    assert pr.ratio == 1.0 and not pr.speedup


def test_threshold_formula_in_exact_rationals():
    # oracle: solve baseline = quantized for beta with alpha = delta = 0, in Fractions
    for omega, rho in [(Fraction(1, 79), 4), (Fraction(1, 10), 2), (Fraction(1, 5), 3)]:
        gamma = Fraction(2 * 10 ** 12)
        # 2S/b + S/g = 2S/(rho b) + S/(rho omega g)  =>  b = 2(1-1/rho) / (1/(rho omega g) - 1/g)
        b = 2 * (1 - Fraction(1, rho)) / (1 / (rho * omega * gamma) - 1 / gamma)
        th = speedup_threshold(float(omega), rho, float(gamma))
        assert th.beta_max == pytest.approx(float(b), rel=1e-12)


def test_closed_form_agrees_with_direct_comparison():
    gen = np.random.default_rng(0)
    disagree = 0
    for _ in range(10_000):
        p = CostParams(alpha=float(gen.uniform(0, 1e-4)), beta=float(10 ** gen.uniform(8, 13)),
                       gamma=float(10 ** gen.uniform(10, 13)), S=float(10 ** gen.uniform(3, 9)),
                       N=int(gen.integers(2, 64)), rho=float(gen.uniform(1, 8)), omega=float(10 ** gen.uniform(-3, 0.5)))
        pr = predict(p)
        rel = abs(pr.baseline - pr.quantized) / pr.baseline
        if rel > 1e-9:  # skip draws sitting on the boundary
            disagree += pr.threshold.speedup(p.beta) != pr.speedup
    assert disagree == 0


@settings(max_examples=200)
@given(st.floats(1e-3, 1.0), st.floats(1.0, 8.0), st.floats(1.5, 8.0))
def test_quantized_cost_monotone(omega, rho, factor):
    p = params(omega=omega, rho=rho)
    assert quantized_cost(p.with_(omega=min(omega * factor, 10.0))) <= quantized_cost(p)
    assert quantized_cost(p.with_(rho=rho * factor)) <= quantized_cost(p)


def test_format_table():
    text = format_table(params(omega=1 / 79))
    assert "beta_max" in text and "0.08 * gamma" in text
    assert format_table(params(omega=1.0)).splitlines()[-2].endswith("always")
    assert math.isnan(speedup_threshold(1.0, 4, 1.0).beta_max)
