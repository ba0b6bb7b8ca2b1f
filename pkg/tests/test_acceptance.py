"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Every criterion runs at its stated tolerance.  These runs take several
minutes in total; select them with ``pytest tests/test_acceptance.py``.
"""

import math
import time

import numpy as np
import pytest

from polystab import experiments as ex
from polystab.exitmoments import solve_bvp
from polystab.lyapunov import derive_params
from polystab.model import SystemSpec

pytestmark = pytest.mark.slow


def _fmt(x):
    return f"{x:.4g}" if isinstance(x, float) else str(x)


# --- 1. spike spacing -------------------------------------------------------

# level grids span one decade above 4 r_low; run lengths give at least 50 gaps
# at the top level
SPIKE_RUNS = {
    1: dict(r_low=2.0, levels=np.geomspace(8, 80, 6), t_end=1e6),
    2: dict(r_low=2.0, levels=np.geomspace(8, 80, 6), t_end=2e6),
    3: dict(r_low=1.0, levels=np.geomspace(4, 40, 6), t_end=5e6),
}


@pytest.mark.parametrize("n", [1, 2, 3])
def test_spike_spacing_slope(n, acceptance):
    t0 = time.time()
    run = SPIKE_RUNS[n]
    res = ex.run_spikes(SystemSpec.monomial(n, 1.0), run["levels"], run["r_low"], run["t_end"], seed=100 + n)
    s = res.summary
    decade = s["window_hi"] / s["window_lo"] >= 10 * (1 - 1e-9)
    ok = (
        abs(s["slope_plain"] - n) <= 0.15 * n
        and s["residual_plain"] < 0.1
        and abs(s["slope_timechanged"] - n) <= 0.2 * n
        and decade
        and not s["capped"]
    )
    detail = (
        f"n={n} plain slope={_fmt(s['slope_plain'])} resid={_fmt(s['residual_plain'])} "
        f"timechanged slope={_fmt(s['slope_timechanged'])} resid={_fmt(s['residual_timechanged'])} "
        f"window=[{_fmt(s['window_lo'])}, {_fmt(s['window_hi'])}] gaps={s['total_gaps']} "
        f"({time.time() - t0:.0f}s)"
    )
    assert acceptance(1, "spike-spacing", ok, detail)


# --- 2 and 3. stationary tail and moments -----------------------------------


@pytest.fixture(scope="module")
def stationary_n1():
    # 10% burn-in leaves just over 10^7 physical-clock samples
    t0 = time.time()
    spec = SystemSpec.monomial(1, 1.0)
    samples = ex.stationary_series(spec, 1.12e7, seed=200, r_star=1.0)
    return spec, samples, time.time() - t0


def test_stationary_tail_exponent(stationary_n1, acceptance):
    spec, samples, t_run = stationary_n1
    t0 = time.time()
    res = ex.run_tail(spec, 1.12e7, r_low=1.0, samples=samples)
    s = res.summary
    ok = (
        s["samples_plain"] >= 10_000_000
        and abs(s["slope_plain"] + 2) <= 0.3
        and abs(s["slope_timechanged"] + 1) <= 0.3
    )
    detail = (
        f"plain slope={_fmt(s['slope_plain'])}±{_fmt(s['slope_se_plain'])} "
        f"timechanged slope={_fmt(s['slope_timechanged'])}±{_fmt(s['slope_se_timechanged'])} "
        f"samples={s['samples_plain']} ({t_run + time.time() - t0:.0f}s)"
    )
    assert acceptance(2, "stationary-tail", ok, detail)


def test_moment_threshold(stationary_n1, acceptance):
    spec, samples, _ = stationary_n1
    t0 = time.time()
    res = ex.run_moments(spec, [1.0, 2.5], 1.12e7, samples=samples)
    s = res.summary
    v1, v25 = s["verdict_gamma_1.0"], s["verdict_gamma_2.5"]
    ok = v1 == "Converged" and v25 == "Diverging"
    detail = (
        f"gamma=1 {v1} (ratios {s['last_ratios_gamma_1.0']}) "
        f"gamma=2.5 {v25} (ratios {s['last_ratios_gamma_2.5']}) ({time.time() - t0:.0f}s)"
    )
    assert acceptance(3, "moment-threshold", ok, detail)


# --- 4. exit moments, BVP against Monte Carlo -------------------------------

EXIT_GRID = [
    (n, sigma, frac, width)
    for n, sigma in ((1, 1.0), (2, 0.5), (3, 1.0))
    for frac, width in ((0.4, 5.0), (0.2, 3.0))
]


def test_exit_moment_oracles(acceptance):
    t0 = time.time()
    worst_rel = worst_nse = 0.0
    parts = []
    for i, (n, sigma, frac, width) in enumerate(EXIT_GRID):
        a = frac * (3 * n + 2) / 2
        eta_star = width * sigma
        res = ex.run_exitmoments(a, 0.0, eta_star, sigma, n, mc_points=11, mc_paths=100_000, seed=400 + i)
        r, z = res.summary["mc_worst_rel"], res.summary["mc_worst_nse"]
        worst_rel, worst_nse = max(worst_rel, r), max(worst_nse, z)
        parts.append(f"(n={n},s={sigma},a={a:.3g},eta*={eta_star:g}):{r:.2e}/{z:.2f}")
    ok = worst_rel < 0.01 and worst_nse < 3.0
    detail = f"worst rel={worst_rel:.2e} worst |diff|/se={worst_nse:.2f} [{' '.join(parts)}] ({time.time() - t0:.0f}s)"
    assert acceptance(4, "exit-moment-oracle", ok, detail)


# --- 5. boundary derivative asymptotics -------------------------------------


def test_derivative_asymptotics(acceptance):
    t0 = time.time()
    a, n = 1.0, 1
    scaled, rels = [], []
    for es in (25.0, 50.0, 100.0, 200.0):
        t = solve_bvp(a, 0.0, es, 1.0, n, richardson=False)
        ref = 2 * a / ((3 * n + 2) * es)
        err = abs(t.derivs[-1] + ref)
        scaled.append(es * err)
        rels.append(err / ref)
    decreasing = all(x > y for x, y in zip(scaled, scaled[1:]))
    ok = decreasing and rels[-1] < 0.03
    detail = (
        "scaled errors " + ", ".join(f"{x:.3e}" for x in scaled)
        + f"; rel at eta*=200 {rels[-1]:.2e} ({time.time() - t0:.1f}s)"
    )
    assert acceptance(5, "derivative-asymptotics", ok, detail)


# --- 6. eigenvalue limit ----------------------------------------------------


def test_eigenvalue_limit(acceptance):
    t0 = time.time()
    parts, ok = [], True
    for n in (1, 2):
        res = ex.run_eigen(n, 1.0, [50.0])
        lam, limit = res.summary["lambda1_eta_50.0"], res.summary["limit"]
        rel = abs(lam - limit) / limit
        ok &= rel < 0.05
        parts.append(f"n={n} lambda1={lam:.6g} limit={limit:g} rel={rel:.1e}")
    assert acceptance(6, "eigenvalue-limit", ok, "; ".join(parts) + f" ({time.time() - t0:.1f}s)")


# --- 7. Lyapunov certificate ------------------------------------------------


def test_lyapunov_certificate(acceptance):
    t0 = time.time()
    parts, ok = [], True
    for n, gamma in ((1, 1.5), (2, 3.0), (3, 4.0)):
        res = ex.run_lyapunov(n, gamma)
        s = res.summary
        case = (
            s["success"]
            and s["admissible"]
            and s["flux_max_jump"] <= 0
            and s["power_success"] and s["psidelta_success"]
            and s["power_envelope_ok"] and s["psidelta_envelope_ok"]
        )
        ok &= bool(case)
        parts.append(
            f"(n={n},gamma={gamma:g}) m_power={s['power_m']:.3g} m_psidelta={s['psidelta_m']:.3g} "
            f"max_jump={s['flux_max_jump']:.2e} r*={s['param_r_star']:.3g}"
        )
    base = derive_params(1, 1.5, search=False)
    neg = ex.run_lyapunov(1, 1.5, search=False, overrides={"h2": 2 * base.h1})
    caught = neg.summary["flux_max_jump"] > 0
    ok &= caught
    parts.append(f"h2>h1 flux violation detected={caught} (max_jump={neg.summary['flux_max_jump']:.2e})")
    assert acceptance(7, "lyapunov-certificate", ok, "; ".join(parts) + f" ({time.time() - t0:.0f}s)")


# --- 8. sigma rescaling -----------------------------------------------------


def test_sigma_rescaling(acceptance):
    t0 = time.time()
    res = ex.run_rescaling(1, sigma=2.0, t_end=2.0, n_paths=100_000, seed=800)
    s = res.summary
    ok = s["ks_pvalue"] > 0.01
    detail = (
        f"n=1 sigma=2 l={s['l']:.4g} l'={s['l_prime']:.4g} KS D={s['ks_statistic']:.4g} "
        f"p={s['ks_pvalue']:.3g} samples={s['n_paths']} capped={s['capped']} ({time.time() - t0:.0f}s)"
    )
    assert acceptance(8, "sigma-rescaling", ok, detail)


# --- 9. deterministic explosion and decay -----------------------------------


def test_deterministic_blowup(acceptance):
    t0 = time.time()
    parts, ok = [], True
    for n in (1, 2):
        s = ex.run_blowup(n, r0=1.0, r_cap=1e6).summary
        case = s["blowup_rel_err"] < 0.02 and s["decay_monotone"] and math.isfinite(s["blowup_time"])
        ok &= bool(case)
        parts.append(
            f"n={n} T={s['blowup_time']:.5g} exact={s['blowup_exact']:.5g} rel={s['blowup_rel_err']:.2e} "
            f"decay monotone={s['decay_monotone']}"
        )
    assert acceptance(9, "deterministic-blowup", ok, "; ".join(parts) + f" ({time.time() - t0:.0f}s)")
