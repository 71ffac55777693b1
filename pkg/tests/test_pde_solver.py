import numpy as np
import pytest

from extinction_lab import barriers as B
from extinction_lab import pde_solver as S
from extinction_lab.exponents import derive


def cfg(**kw):
    base = dict(p=1.6, q=0.7, eps=1e-8, extinct_tol=1e-10, t_max=1.0, dt_max=0.05)
    base.update(kw)
    return S.SolverConfig(**base)


def test_grid_geometry():
    g = S.RadialGrid(10.0, 100, 2)
    assert g.dr == pytest.approx(0.1)
    assert g.r[0] == 0 and g.r[-1] == pytest.approx(10.0)
    # shell volumes times the sphere area sum to the disk area pi R^2
    assert S.sphere_area(2) * g.volumes.sum() == pytest.approx(np.pi * 100, rel=1e-12)
    with pytest.raises(ValueError):
        S.RadialGrid(10.0, 4, 1)


def test_sphere_area():
    assert S.sphere_area(1) == pytest.approx(2.0)
    assert S.sphere_area(2) == pytest.approx(2 * np.pi)
    assert S.sphere_area(3) == pytest.approx(4 * np.pi)


def test_init_from_samples_profile():
    g = S.RadialGrid(50.0, 1000, 1)
    u = S.init_from(lambda r: (1 + r) ** -3.0, g)
    assert u.values[0] == 1.0
    assert u.values[-1] == pytest.approx(51.0 ** -3)


@pytest.mark.parametrize("profile", [lambda r: 0 * r, lambda r: -1 + 0 * r, lambda r: np.nan + 0 * r])
def test_init_from_rejects_bad_data(profile):
    with pytest.raises(ValueError):
        S.init_from(profile, S.RadialGrid(1.0, 20, 1))


def test_barrier_trace_initial_field_bounded_by_peak():
    e = derive(1, 1.6, 0.7)
    P = B.feasible_super_params(e)
    g = S.RadialGrid(50.0, 200, 1)
    u = S.init_from(lambda r: B.super_value(0.0, r, P), g)
    assert np.all(u.values <= P.a ** -e.gamma * P.T ** e.alpha * (1 + 1e-14))


def test_operator_vanishes_on_constants():
    g = S.RadialGrid(5.0, 50, 3)
    assert np.all(S.discrete_operator(np.full(51, 2.0), g, 1.6, 0.7, 1e-6) == 0)


def test_operator_on_quadratic_matches_p_laplacian_away_from_origin():
    # u = -r^2/2 in N = 1 with p = 2 and no absorption contribution check via q small
    g = S.RadialGrid(2.0, 400, 1)
    u = 10 - 0.5 * g.r ** 2
    op = S.discrete_operator(u, g, 2.0 - 1e-12, 0.5, 1e-12)
    grad = np.abs(g.r)
    interior = slice(10, 390)
    # -Delta u = 1 for p = 2, plus |u'|^q
    assert np.allclose(op[interior], 1.0 + grad[interior] ** 0.5, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("regularize,atol", [(True, 1e-10), (False, 1e-7)])
def test_constant_state_is_steady_under_neumann(regularize, atol):
    # plain |g|^q with q < 1 feeds on rounding ripples, so only the regularized sink is exact
    g = S.RadialGrid(5.0, 100, 2)
    u = S.init_from(lambda r: 0.3 + 0 * r, g)
    rec = S.run(u, cfg(boundary=S.Boundary.NEUMANN, t_max=2.0, regularize_absorption=regularize))
    assert np.allclose(rec.snapshots[-1][1].values, 0.3, rtol=0, atol=atol)


@pytest.mark.parametrize("absorption", list(S.Absorption))
def test_flat_state_with_matching_trace_does_not_drain(absorption):
    g = S.RadialGrid(200.0, 1000, 1)
    c = 1.39e-5
    u = S.init_from(lambda r: c * (1 + 1e-3 * np.exp(-r ** 2)), g)
    conf = cfg(t_max=1e6, dt_max=1e4, extinct_tol=1e-300, boundary=S.Boundary.BARRIER_TRACE,
               absorption=absorption, regularize_absorption=True)
    rec = S.run(u, conf, bc=lambda t: c)
    assert rec.snapshots[-1][1].values.min() == pytest.approx(c, rel=1e-6)


def test_monotone_data_stays_monotone():
    g = S.RadialGrid(20.0, 400, 1)
    u = S.init_from(lambda r: (1 + r * r) ** -2.0, g)
    rec = S.run(u, cfg(t_max=0.5, snapshot_every=0.1))
    for _, f in rec.snapshots:
        assert np.all(np.diff(f.values) <= 1e-15)


def test_mass_and_sup_decay():
    g = S.RadialGrid(20.0, 400, 2)
    u = S.init_from(lambda r: (1 + r * r) ** -2.0, g)
    rec = S.run(u, cfg(t_max=0.5))
    s = rec.series
    assert np.all(np.diff(s.l1) <= 1e-14)
    assert np.all(np.diff(s.linf) <= 1e-14)
    assert rec.mass_balance_residual < 1e-6


@pytest.mark.parametrize("scheme", list(S.Scheme))
def test_mass_balance_closes_with_boundary_flux(scheme):
    g = S.RadialGrid(4.0, 80, 1)
    u = S.init_from(lambda r: 1 - (r / 5) ** 2, g)
    # a coarse eps keeps the explicit stability limit affordable; the identity holds for any eps
    rec = S.run(u, cfg(t_max=0.3, scheme=scheme, dt_max=0.01, eps=1e-2))
    assert rec.series.l1[-1] < rec.series.l1[0] * 0.95  # mass has left through r_max
    assert rec.mass_balance_residual < 1e-10


def test_explicit_and_semi_implicit_agree():
    g = S.RadialGrid(10.0, 100, 1)
    u = S.init_from(lambda r: (1 + r * r) ** -1.0, g)
    a = S.run(u, cfg(t_max=0.2, scheme=S.Scheme.EXPLICIT, rel_change=0.002))
    b = S.run(u, cfg(t_max=0.2, rel_change=0.002))
    assert np.max(np.abs(a.snapshots[-1][1].values - b.snapshots[-1][1].values)) < 5e-3


def test_explicit_step_respects_stability_limit():
    g = S.RadialGrid(1.0, 100, 1)
    u = S.init_from(lambda r: 1 - 0.5 * r, g)
    _, dt = S.step(u, cfg(scheme=S.Scheme.EXPLICIT), 10.0)
    assert dt < 10.0


def test_extinction_detected():
    g = S.RadialGrid(20.0, 400, 1)
    u = S.init_from(lambda r: (1 + r) ** -3.0, g)
    rec = S.run(u, cfg(t_max=20.0, extinct_tol=1e-8))
    assert rec.t_extinct is not None and 0 < rec.t_extinct < 20.0
    assert rec.series.linf[-1] < 1e-8


def test_barrier_trace_needs_boundary_function():
    g = S.RadialGrid(1.0, 20, 1)
    u = S.init_from(lambda r: 1 + 0 * r, g)
    with pytest.raises(ValueError):
        S.step(u, cfg(boundary=S.Boundary.BARRIER_TRACE), 0.01)


@pytest.fixture(scope="module")
def dominating():
    e = derive(1, 1.6, 0.7)
    return B.dominating_supersolution(1.0, e, B.feasible_super_params(e))


def _comparison_run(W, u0_scale, n=300, r_max=50.0):
    g = S.RadialGrid(r_max, n, 1)
    u0 = S.init_from(lambda r: u0_scale * B.super_value(0.0, r, W), g)
    amp = float(u0.values.max())
    edge = np.array([r_max])
    conf = S.SolverConfig(p=1.6, q=0.7, eps=1e-8 * amp, eps_relative=True, extinct_tol=1e-10 * amp,
                          t_max=W.T * (1 - 1e-9), rel_change=0.02, dt_max=0.02 * W.T,
                          boundary=S.Boundary.BARRIER_TRACE)
    return S.run(u0, conf, bc=lambda t: u0_scale * float(B.super_value_or_zero(t, edge, W)[0]))


def test_half_barrier_stays_ordered(dominating):
    rec = _comparison_run(dominating, 0.5)
    assert S.compare_with_barrier(rec, dominating, "above") == 0.0


def test_crossing_data_is_a_precondition_error(dominating):
    rec = _comparison_run(dominating, 2.0, n=100)
    with pytest.raises(ValueError, match="initial ordering"):
        S.compare_with_barrier(rec, dominating, "above")


def test_compare_side_and_kind_validation(dominating):
    rec = _comparison_run(dominating, 0.5, n=100)
    with pytest.raises(ValueError):
        S.compare_with_barrier(rec, dominating, "below")
    with pytest.raises(ValueError):
        S.compare_with_barrier(rec, dominating, "sideways")


def test_comparison_tolerance_shrinks_with_resolution():
    g1, g2 = S.RadialGrid(1.0, 100, 1), S.RadialGrid(1.0, 200, 1)
    t1 = S.comparison_tolerance(g1, 1e-3, 1e-6, 1.6, 1.0)
    t2 = S.comparison_tolerance(g2, 5e-4, 1e-7, 1.6, 1.0)
    assert 0 < t2 < t1


def test_snapshot_round_trip(tmp_path):
    g = S.RadialGrid(3.0, 30, 1)
    u = S.init_from(lambda r: np.exp(-r), g)
    c = cfg()
    path = tmp_path / "snap.txt"
    S.dump_snapshot(path, 0.125, u, c)
    text = path.read_text()
    assert text.startswith("# t = 0.125")
    assert c.digest() in text
    t, v = S.load_snapshot(path, g)
    assert t == 0.125 and np.array_equal(v.values, u.values)


def test_config_digest_is_stable_and_sensitive():
    assert cfg().digest() == cfg().digest()
    assert cfg().digest() != cfg(eps=2e-8).digest()
    with pytest.raises(ValueError):
        cfg(eps=-1.0)
