import math

import numpy as np
import pytest

from extinction_lab import barriers as B
from extinction_lab.exponents import derive

TRIPLES = [(1, 1.6, 0.7), (2, 1.5, 0.6), (3, 1.7, 0.8)]


@pytest.fixture(scope="module")
def e1():
    return derive(1, 1.6, 0.7)


@pytest.fixture(scope="module")
def super1(e1):
    return B.feasible_super_params(e1)


def test_profile_at_origin(e1):
    P = B.BarrierParams(B.BarrierKind.SUPER, a=2.0, b=1.0, T=1.0, exps=e1)
    assert float(B.super_profile(0.0, P)) == pytest.approx(2 ** -0.875, rel=1e-14)
    assert float(B.super_profile(0.0, P)) == pytest.approx(0.5452, abs=1e-4)


def test_profile_far_field(e1):
    P = B.BarrierParams(B.BarrierKind.SUPER, a=2.0, b=3.0, T=1.0, exps=e1)
    y = 1e12
    assert float(B.super_profile(y, P)) * y ** (e1.theta * e1.gamma) == pytest.approx(3.0 ** -e1.gamma, rel=1e-6)


def test_spatial_tail_of_initial_trace(e1):
    P = B.BarrierParams(B.BarrierKind.SUPER, a=5.0, b=2.0, T=3.0, exps=e1)
    r = 1e10
    expected = 3.0 ** (1 / (1 - e1.q)) * 2.0 ** -e1.gamma * r ** (-e1.q / (1 - e1.q))
    assert float(B.super_value(0.0, r, P)) == pytest.approx(expected, rel=1e-5)


def test_value_at_origin_and_horizon(e1):
    P = B.BarrierParams(B.BarrierKind.SUPER, a=5.0, b=2.0, T=3.0, exps=e1)
    assert float(B.super_value(0.0, 0.0, P)) == pytest.approx(3.0 ** e1.alpha * 5.0 ** -e1.gamma)
    with pytest.raises(ValueError):
        B.super_value(3.0, 1.0, P)
    assert np.all(B.super_value_or_zero(3.5, np.array([0.0, 1.0]), P) == 0)


def test_h1_limit_at_small_y(e1):
    P = B.BarrierParams(B.BarrierKind.SUPER, a=2.0, b=1.5, T=1.0, exps=e1)
    d = B.residual_h1h2(np.array([1e-12]), P)
    p = e1.p
    h1_0 = -e1.alpha * 2.0 + (e1.gamma * 1.5 * e1.theta) ** (p - 1) * e1.N * 2.0 ** ((e1.gamma + 1) * (2 - p))
    assert d.h1[0] == pytest.approx(h1_0, rel=1e-9)
    assert abs(d.h2[0]) < 1e-6


def test_residual_rejects_origin_and_nonpositive_y(super1):
    with pytest.raises(ValueError):
        B.residual_operator(0.1, 0.0, super1)
    with pytest.raises(ValueError):
        B.residual_h1h2(np.array([0.0]), super1)


def test_kind_mismatch_rejected(super1):
    with pytest.raises(ValueError):
        B.sub_profile_value(0.0, 1.0, super1)


@pytest.mark.parametrize("triple", TRIPLES)
def test_supersolution_certificate(triple):
    e = derive(*triple)
    P = B.feasible_super_params(e)
    lower, upper, b_thresh = B.super_conditions(e, P.b)
    assert P.b >= b_thresh
    assert lower <= P.y0 ** ((e.p - 2 * e.q) / (1 - e.q)) <= upper
    assert P.a == pytest.approx(e.lam * P.b * P.y0 ** e.theta)
    assert B.scan_super(P) >= 0
    assert P.certificate["scan_min_h1h2"] >= 0


@pytest.mark.parametrize("triple", TRIPLES)
def test_closed_form_matches_high_precision_differences(triple):
    e = derive(*triple)
    P = B.feasible_super_params(e)
    for frac in (0.25, 0.5):
        tau = P.T * (1 - frac)
        for k in (0.1, 1.0, 10.0):
            ratio = B.super_richardson(P, P.T * frac, k * P.y0 / tau ** e.beta)
            assert 3.9 < ratio < 4.1


def test_double_precision_oracle_on_moderate_barrier(e1):
    # with O(1) parameters the plain float FD operator already converges at second order
    P = B.BarrierParams(B.BarrierKind.SUPER, a=1.0, b=1.0, T=1.0, exps=e1)
    exact = float(B.residual_operator(0.3, 0.8, P))

    def val(t, r):
        return float(B.super_value(t, r, P))

    assert B.richardson_ratio(exact, val, 0.3, 0.8, 1, 1.6, 0.7, 1e-2) == pytest.approx(4.0, abs=0.2)


def test_dominating_supersolution_covers_optimal_tail(e1, super1):
    W = B.dominating_supersolution(1.0, e1, super1)
    r = np.concatenate([[0.0], np.logspace(-4, 4, 2000)])
    assert np.all(B.super_value(0.0, r, W) >= (1 + r) ** (-e1.sigma_opt))
    assert math.log2(W.T) == int(math.log2(W.T))
    assert B.scan_super(W) >= 0  # T does not enter H1 + H2


def test_dominating_horizon_monotone_in_amplitude(e1, super1):
    Ts = [B.dominating_supersolution(c, e1, super1).T for c in (0.5, 1.0, 10.0, 1e3)]
    assert Ts == sorted(Ts)


def test_sub_profile_formula(e1):
    P = B.BarrierParams(B.BarrierKind.SUB, a=3.0, b=2.0, T=2.0, exps=e1)
    assert float(B.sub_profile_value(0.0, 0.0, P)) == pytest.approx(2.0 ** (1 / 0.3) * 3.0 ** -e1.gamma)


@pytest.mark.parametrize("triple", TRIPLES)
def test_subsolution_certificate(triple):
    e = derive(*triple)
    P = B.feasible_sub_params(e, T=1.0)
    assert P.kind is B.BarrierKind.SUB
    assert B.scan_sub(P) <= 0
    t, r = B.sub_scan_grid(1.0)
    assert t.min() == pytest.approx(0.01) and t.max() == pytest.approx(0.99)


def test_sub_search_budget_exhaustion_reports_best(e1):
    with pytest.raises(B.SubFeasibilityError) as info:
        B.feasible_sub_params(e1, T=1.0, max_iter=2, max_a_doublings=1)
    assert info.value.best is not None
    assert info.value.best_violation > 0


def test_subsolution_below_data(e1):
    r = np.linspace(0, 50, 500)
    data = (1 + r) ** -2.0
    w = B.subsolution_below(e1, 100.0, r, data)
    assert np.all(B.sub_profile_value(0.0, r, w) <= data)
    assert B.scan_sub(w) <= 0


def test_params_serialization(super1):
    d = super1.to_dict()
    assert d["kind"] == "super" and d["p"] == 1.6 and d["y0"] == super1.y0
    assert super1.with_T(8.0).T == 8.0
    with pytest.raises(ValueError):
        B.BarrierParams(B.BarrierKind.SUPER, a=-1.0, b=1.0, T=1.0, exps=super1.exps)
