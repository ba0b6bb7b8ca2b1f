import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polystab.errors import DomainError, RegionError, VerificationFailure
from polystab.lyapunov import (
    Boundary,
    GridSpec,
    LyapunovParams,
    Phi,
    build_tables,
    check_flux,
    cutoff,
    derive_params,
    flux_report,
    psi,
    psi0,
    psi1,
    psi2,
    psi3,
    psi_field,
    search_params,
    verify_drift,
    with_overrides,
)
from polystab.model import PolarPoint, RegionKind, SystemSpec, generator_values


@pytest.fixture(scope="module")
def base():
    """Unsearched default parameters for n=1, gamma=1.5 with their tables."""
    params = derive_params(1, 1.5, search=False)
    return params, build_tables(params, 1.0)


@pytest.fixture(scope="module")
def searched():
    params, cert, trace = search_params(1, 1.5)
    return params, build_tables(params, 1.0), cert, trace


# --- parameters -------------------------------------------------------------


def test_exponents_n2():
    p = derive_params(2, 3.0, search=False)
    assert (p.p, p.q, p.p2, p.p3) == (1.0, 0.75, 2.0, 2.5)
    assert p.p3 < 1.5 * p.n + 1


def test_exponents_n1():
    p = derive_params(1, 1.5, search=False)
    assert p.p == 0.5 and p.q == 0.75
    assert p.p2 == pytest.approx(1.25, abs=1e-15)
    assert p.p3 == pytest.approx(1.625, abs=1e-15)


def test_defaults_are_admissible(base):
    params, _ = base
    pp = params.partition
    assert pp.theta0 == pytest.approx(3 * math.pi / 4)
    assert params.h1 == pytest.approx(0.5 * params.h1_cap)
    assert params.h2 == pytest.approx(params.h1 / 2)
    assert params.delta == pytest.approx(1 / (2 * params.p3))
    assert params.admissible and params.constraint_violations() == []


@pytest.mark.parametrize("n,gamma", [(1, 1.0), (1, 2.0), (2, 4.0), (2, 1.5)])
def test_gamma_outside_interval(n, gamma):
    with pytest.raises(DomainError):
        derive_params(n, gamma, search=False)


def test_invariants_enforced(base):
    params, _ = base
    with pytest.raises(DomainError):
        with_overrides(params, q=0.4)  # p3 no longer consistent
    with pytest.raises(DomainError):
        with_overrides(params, delta=params.n / params.p3 * 1.01)
    with pytest.raises(DomainError):
        with_overrides(params, h3=0.0)
    with pytest.raises(DomainError):
        derive_params(1, 1.5, {"q": 0.2}, search=False)  # q <= p/n
    with pytest.raises(DomainError):
        derive_params(1, 1.5, {"bogus": 1.0}, search=False)


def test_h2_above_h1_is_flagged(base):
    params, _ = base
    bad = with_overrides(params, h2=2 * params.h1)
    assert not bad.admissible
    assert any("h2" in v for v in bad.constraint_violations())


# --- local pieces -----------------------------------------------------------


def test_psi0_examples(base):
    params, _ = base
    th0 = params.partition.theta0
    rs = params.partition.r_star
    assert psi0(params, PolarPoint(rs, th0)).value == pytest.approx(rs**0.5)
    p2 = derive_params(2, 3.0, search=False)
    r = 2 * p2.partition.r_star
    v = psi0(p2, PolarPoint(r, math.pi / 2))
    assert v.value == pytest.approx(r) and v.gradient == (pytest.approx(1.0), 0.0)
    with pytest.raises(RegionError):
        psi0(params, PolarPoint(rs * 2, 0.1))


def test_psi1_equals_psi0_at_theta0(base):
    params, _ = base
    th0 = params.partition.theta0
    r = 3 * params.partition.r_star
    for s in (1, -1):
        assert psi1(params, PolarPoint(r, s * th0)).value == pytest.approx(r**params.p, rel=1e-12)


@pytest.mark.parametrize("lam", [2.0, 10.0])
def test_homogeneity(base, lam):
    params, _ = base
    pp = params.partition
    r = pp.r_star * 1.5
    th2 = 0.5 * (pp.theta1 + pp.eta_star * r ** (-params.k))
    for fn, th in ((psi0, 0.9 * math.pi), (psi1, 0.5 * (pp.theta0 + pp.theta1)), (psi2, th2)):
        a = fn(params, PolarPoint(r, th)).value
        b = fn(params, PolarPoint(lam * r, th)).value
        assert b == pytest.approx(lam**params.p * a, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(1.0, 50.0), st.sampled_from([1, -1]))
def test_psi1_t1_residual(u, rf, sign):
    params = derive_params(1, 1.5, search=False)
    pp = params.partition
    n, p = params.n, params.p
    th = sign * (pp.theta1 + u * (pp.theta0 - pp.theta1))
    r = rf * pp.r_star
    v = psi1(params, PolarPoint(r, th))
    # cos(n theta) r d_r + sin(n theta) d_theta, the leading drift on S1
    t1 = math.cos(n * th) * r * v.gradient[0] + math.sin(n * th) * v.gradient[1]
    rhs = -params.h1 * r**p * abs(th) ** (-params.q)
    assert t1 == pytest.approx(rhs, rel=1e-8, abs=1e-10 * r**p)


def test_psi2_t2_residual_and_lower_bound(base):
    params, _ = base
    pp = params.partition
    n, p = params.n, params.p
    for r in pp.r_star * np.array([1.0, 3.0, 20.0]):
        lo = pp.eta_star * r ** (-params.k)
        for th in np.geomspace(lo, pp.theta1, 7):
            for s in (1, -1):
                v = psi2(params, PolarPoint(r, s * th))
                t2 = r * v.gradient[0] + n * s * th * v.gradient[1]
                assert t2 == pytest.approx(-params.h2 * r**p * th ** (-params.q), rel=1e-10)
                assert v.value / (r**p * th ** (-p / n)) > 0.1
    with pytest.raises(DomainError):
        psi2(params, PolarPoint(pp.r_star, 0.0))


def test_psi2_equals_psi1_at_theta1(base):
    params, _ = base
    pp = params.partition
    for r in pp.r_star * np.array([1.0, 7.0]):
        a = psi1(params, PolarPoint(r, pp.theta1)).value
        b = psi2(params, PolarPoint(r, pp.theta1)).value
        assert b == pytest.approx(a, rel=1e-10)


def test_psi3_matches_psi2_on_eta_boundary(base):
    params, tables = base
    pp = params.partition
    for r in pp.r_star * np.array([1.0, 2.5, 40.0]):
        th = pp.eta_star * r ** (-params.k)
        for s in (1, -1):
            a = psi2(params, PolarPoint(r, s * th)).value
            b = psi3(params, tables, PolarPoint(r, s * th)).value
            assert b == pytest.approx(a, rel=1e-8)


def test_psi3_positive_and_two_term_scaling(base):
    params, tables = base
    pp = params.partition
    for eta in np.linspace(-pp.eta_star, pp.eta_star, 9):
        rs = pp.r_star * np.array([1.0, 3.0, 11.0])
        v = np.array([psi3(params, tables, PolarPoint(r, eta * r ** (-params.k))).value for r in rs])
        assert np.all(v > 0)
        A = np.column_stack([rs**params.p3, rs**params.p2])
        coef = np.linalg.solve(A[:2], v[:2])
        assert A[2] @ coef == pytest.approx(v[2], rel=1e-8)


def test_psi3_solves_its_pde(base):
    params, tables = base
    pp = params.partition
    n = params.n
    for r in pp.r_star * np.array([1.0, 4.0]):
        for eta in np.linspace(-0.9, 0.9, 7) * pp.eta_star:
            th = eta * r ** (-params.k)
            v = psi3(params, tables, PolarPoint(r, th))
            # r d_r + n theta d_theta + (sigma^2 / 2) r^-(n+2) d_theta^2
            A = r * v.gradient[0] + n * th * v.gradient[1] + 0.5 * r ** (-(n + 2)) * v.second[1]
            assert A == pytest.approx(-params.h3 * r**params.p3, rel=1e-7)


def test_psi3_outside_table(base):
    params, tables = base
    pp = params.partition
    r = pp.r_star * 2
    with pytest.raises(RegionError):
        psi3(params, tables, PolarPoint(r, 1.5 * pp.eta_star * r ** (-params.k)))


# --- global function --------------------------------------------------------


def test_cutoff_profile():
    lam, lr, lrr = cutoff(np.array([0.5, 1.0, 1.5, 2.0, 5.0]), 1.0)
    assert lam[0] == 0 and lam[1] == 0 and lam[3] == 1 and lam[4] == 1
    assert 0 < lam[2] < 1
    assert lr[1] == 0 and lr[3] == 0 and lrr[3] == pytest.approx(0, abs=1e-12)
    r = np.linspace(1.05, 1.95, 9)
    h = 1e-6
    fd = (cutoff(r + h, 1.0)[0] - cutoff(r - h, 1.0)[0]) / (2 * h)
    np.testing.assert_allclose(cutoff(r, 1.0)[1], fd, rtol=1e-6)


def test_psi_zero_in_ball(base):
    params, tables = base
    assert psi(params, tables, PolarPoint(0.5 * params.partition.r_star, 1.0)).value == 0.0


def test_psi_continuity_across_interfaces(base):
    params, tables = base
    pp = params.partition
    rng = np.random.default_rng(5)
    r = pp.r_star * np.exp(rng.uniform(0, math.log(100), 1000))
    fam = rng.integers(0, 4, r.size)
    angle = np.where(fam == 0, pp.theta0, np.where(fam == 1, pp.theta1, pp.eta_star * r ** (-params.k)))
    angle = np.where(fam == 3, math.pi, angle)
    sign = rng.choice([-1.0, 1.0], r.size)
    eps = 1e-10 * angle
    up, _ = psi_field(params, tables, r, sign * (angle + eps))
    dn, _ = psi_field(params, tables, r, sign * (angle - eps))
    rel = np.abs(up.val - dn.val) / np.maximum(up.val, 1e-300)
    assert np.max(rel[up.val > 0]) < 1e-7


def test_psi_averages_on_interface(base):
    params, tables = base
    pp = params.partition
    r = 3 * pp.r_star
    v = psi(params, tables, PolarPoint(r, pp.theta1)).value
    a = psi1(params, PolarPoint(r, pp.theta1)).value
    assert v == pytest.approx(a, rel=1e-9)
    assert psi(params, tables, PolarPoint(r, 2.0)).region.kind == RegionKind.S1


# --- flux -------------------------------------------------------------------


def test_flux_signs_and_symmetry(searched):
    params, tables, _, _ = searched
    r = params.partition.r_star * np.geomspace(1, 100, 40)
    rep = flux_report(params, tables, r)
    for b in Boundary:
        assert np.all(rep[(b, 1)] <= 0)
        np.testing.assert_allclose(rep[(b, 1)], rep[(b, -1)], rtol=1e-12, atol=0)
    assert np.all(rep[(Boundary.EDGE, 1)] == 0)
    assert np.all(rep[(Boundary.THETA0, 1)][r >= 2 * params.partition.r_star] < 0)


def test_flux_h2_above_h1_fails_at_theta1(base):
    params, tables = base
    bad = with_overrides(params, h2=2 * params.h1)
    r = params.partition.r_star * np.geomspace(2, 100, 20)
    for s in (1, -1):
        assert np.all(check_flux(bad, tables, Boundary.THETA1, r, s) > 0)
    assert np.all(check_flux(params, tables, Boundary.THETA1, r) <= 0)


def test_flux_errors(base):
    params, tables = base
    with pytest.raises(DomainError):
        check_flux(params, tables, Boundary.THETA0, [0.5 * params.partition.r_star])
    with pytest.raises(DomainError):
        check_flux(params, tables, Boundary.THETA0, [params.partition.r_star], sign=0)
    other = build_tables(with_overrides(params, eta_star=params.partition.eta_star / 2), 1.0)
    with pytest.raises(DomainError):
        check_flux(params, other, Boundary.ETA, [params.partition.r_star])


# --- drift certificate ------------------------------------------------------


def test_search_finds_certificate(searched):
    params, tables, cert, trace = searched
    assert trace[-1][-1] == "ok"
    assert cert.success and cert.m > 0 and not cert.violations
    assert cert.r_max == pytest.approx(100 * params.partition.r_star, rel=0.05)


@pytest.mark.parametrize("phi", [Phi.POWER, Phi.PSIDELTA])
def test_verify_drift_both_phi(searched, phi):
    params, tables, _, _ = searched
    cert = verify_drift(SystemSpec.monomial(1, 1.0), params, tables, phi=phi)
    assert cert.success and cert.m > 0 and cert.violations == []
    assert cert.fd_max_rel < 1e-4
    assert cert.envelope["c"] > 0 and cert.envelope["c_trend_ok"] and cert.envelope["d_trend_ok"]
    assert set(cert.worst_margin) == {"S0", "S1", "S2", "S3"}
    text = cert.to_text()
    assert "[params]" in text and "[certificate]" in text and f"phi = {phi.value}" in text


def test_s0_margin_slope(searched):
    params, tables, _, _ = searched
    spec = SystemSpec.monomial(1, 1.0)
    r = params.partition.r_star * np.geomspace(2, 100, 30)
    th = np.full_like(r, math.pi / params.n)
    pc, kind = psi_field(params, tables, r, th)
    assert np.all(kind == int(RegionKind.S0))
    L = generator_values(spec, r, th, pc.dr, pc.dth, pc.drr, pc.dthth)
    slope = np.polyfit(np.log(r), np.log(-L), 1)[0]
    assert slope == pytest.approx(params.p + params.n, abs=0.05)


def test_verify_drift_coarse_grid_and_mismatch(searched):
    params, tables, _, _ = searched
    spec = SystemSpec.monomial(1, 1.0)
    grid = GridSpec(n_radii=60, per_region=12)
    assert verify_drift(spec, params, tables, grid, fd_check=False).success
    with pytest.raises(DomainError):
        verify_drift(SystemSpec.monomial(2, 1.0), params, tables, grid)


def test_refinement_keeps_success(searched):
    params, tables, _, _ = searched
    spec = SystemSpec.monomial(1, 1.0)
    coarse = verify_drift(spec, params, tables, GridSpec(n_radii=100, per_region=20), fd_check=False)
    fine = verify_drift(spec, params, tables, GridSpec(n_radii=200, per_region=40), fd_check=False)
    assert coarse.success and fine.success
    assert fine.m <= coarse.m * (1 + 1e-9)


def test_failure_raises_with_certificate(base):
    params, tables = base
    spec = SystemSpec.monomial(1, 1.0)
    grid = GridSpec(n_radii=40, per_region=10)
    # h2 > h1 leaves the interior drift intact; only the flux check sees it
    assert verify_drift(spec, with_overrides(params, h2=2 * params.h1), tables, grid, fd_check=False).success
    # a vanishing h3 removes the S3 decay
    bad = with_overrides(params, h3=params.h3 * 1e-8)
    with pytest.raises(VerificationFailure) as ei:
        verify_drift(spec, bad, tables, grid, raise_on_failure=True, fd_check=False)
    cert = ei.value.certificate
    assert not cert.success and cert.violations
    assert cert.violations == sorted(cert.violations)


@pytest.mark.parametrize("n,gamma", [(2, 3.0), (3, 4.0)])
def test_search_higher_degree(n, gamma):
    params, cert, _ = search_params(n, gamma)
    assert isinstance(params, LyapunovParams) and params.admissible
    assert cert.success
    tables = build_tables(params, 1.0)
    cert2 = verify_drift(SystemSpec.monomial(n, 1.0), params, tables, phi=Phi.PSIDELTA, fd_check=False)
    assert cert2.success


def test_phi_parse():
    assert Phi.parse("PowerGamma") is Phi.POWER
    assert Phi.parse("psidelta") is Phi.PSIDELTA
    with pytest.raises(DomainError):
        Phi.parse("other")
