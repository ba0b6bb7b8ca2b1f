"""End-to-end experiments shared by the command line and the acceptance suite.

Each runner returns an ExperimentResult: a flat key=value summary plus
named tables of plot-ready rows.  Everything is a pure function of its
arguments and seed.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import lyapunov as ly
from .errors import DomainError, InsufficientData
from .exitmoments import OUSpec, mc_exit_moment, smallest_eigenvalue, solve_bvp, weber_residual
from .model import SystemSpec, blowup_time_monomial
from .simulate import (
    IntegratorConfig,
    Mode,
    integrate,
    sample_stationary,
    scan_spikes,
    substream,
    terminal_states,
    wedge_exits,
)
from .stats import (
    MIN_EXCEEDANCES,
    batch_means_se,
    burn_in,
    empirical_moment,
    exit_tail_rate,
    fit_loglog,
    fit_window,
    ktau_tail,
    survival,
    tail_survival,
)

__all__ = [
    "ExperimentResult",
    "run_simulate",
    "run_blowup",
    "run_lyapunov",
    "run_spikes",
    "run_tail",
    "run_moments",
    "run_exitrate",
    "run_eigen",
    "run_exitmoments",
    "run_rescaling",
    "stationary_series",
    "deep_start",
]


@dataclass
class ExperimentResult:
    kind: str
    summary: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)  # name -> (columns, rows)
    text: dict = field(default_factory=dict)  # name -> preformatted file body
    ok: bool = True

    def summary_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.summary.items())


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def run_simulate(spec: SystemSpec, cfg: IntegratorConfig, seed=0, z0=0j) -> ExperimentResult:
    traj = integrate(spec, z0, cfg, seed)
    res = ExperimentResult("simulate")
    res.summary.update(
        n=spec.n,
        sigma=spec.sigma,
        mode=cfg.mode.value,
        steps=traj.steps,
        points=traj.times.size,
        t_final=float(traj.times[-1]),
        max_r=float(traj.radii().max()),
        capped=traj.capped,
        floor_hits=traj.floor_hits,
    )
    for e in traj.events:
        res.summary[f"event_{e.kind}"] = e.t
    if np.iscomplexobj(traj.states):
        rows = np.column_stack([traj.times, traj.states.real, traj.states.imag, np.abs(traj.states)])
        res.tables["trajectory"] = (["t", "re", "im", "r"], rows)
    else:
        rows = np.column_stack([traj.times, traj.states[:, 0], traj.states[:, 1], traj.physical_time])
        res.tables["trajectory"] = (["s", "r", "theta", "t"], rows)
    return res


def run_blowup(n: int, r0: float = 1.0, r_cap: float = 1e6, eps: float = 0.01, dt_base: float = 1e-2) -> ExperimentResult:
    """Noise-free runs on the ray theta = 0 (explosion) and theta = pi/n (decay)."""
    spec = SystemSpec.monomial(n, 0.0)
    exact = blowup_time_monomial(r0, n)
    # the cap moves z by at most eps per step, so reaching r_cap takes about
    # r_cap / eps steps; keep a thinned record
    thin = max(1, int(r_cap / eps) >> 13)
    cfg = IntegratorConfig(dt_base=dt_base, drift_cap_eps=eps, r_cap=r_cap, t_max=10 * exact,
                           mode=Mode.DETERMINISTIC_CARTESIAN, thin=thin)
    up = integrate(spec, complex(r0, 0.0), cfg)
    t_blow = next((e.t for e in up.events if e.kind == "Blowup"), math.nan)
    z_dn = r0 * complex(math.cos(math.pi / n), math.sin(math.pi / n))
    dn = integrate(spec, z_dn, IntegratorConfig(dt_base=dt_base, drift_cap_eps=eps, r_cap=r_cap, t_max=20.0,
                                                mode=Mode.DETERMINISTIC_CARTESIAN))
    r_dn = np.abs(dn.states)
    res = ExperimentResult("blowup")
    res.summary.update(
        n=n,
        r0=r0,
        r_cap=r_cap,
        blowup_time=t_blow,
        blowup_exact=exact,
        blowup_rel_err=abs(t_blow - exact) / exact,
        decay_monotone=bool(np.all(np.diff(r_dn) <= 0)),
        decay_final_r=float(r_dn[-1]),
    )
    res.tables["decay"] = (["t", "r"], np.column_stack([dn.times, r_dn]))
    return res


def run_lyapunov(
    n: int,
    gamma: float,
    sigma: float = 1.0,
    search: bool = True,
    overrides: dict | None = None,
    grid_spec: ly.GridSpec | None = None,
    phis=(ly.Phi.POWER, ly.Phi.PSIDELTA),
) -> ExperimentResult:
    """Parameter search, flux checks and drift certificates for each Phi."""
    spec = SystemSpec.monomial(n, sigma)
    grid = grid_spec or ly.GridSpec()
    params = ly.derive_params(n, gamma, overrides, sigma, search=search, spec=spec, grid_spec=grid)
    tables = ly.build_tables(params, sigma)
    rs = params.partition.r_star
    r_flux = rs * np.geomspace(1.0, grid.r_max_factor, 50)
    flux = ly.flux_report(params, tables, r_flux)
    max_jump = max(float(np.max(v)) for v in flux.values())
    res = ExperimentResult("lyapunov")
    res.summary.update(n=n, gamma=gamma, sigma=sigma, admissible=params.admissible, flux_max_jump=max_jump)
    res.summary.update({f"param_{k}": v for k, v in params.as_dict().items()})
    ok = max_jump <= 0
    for phi in phis:
        cert = ly.verify_drift(spec, params, tables, grid, phi)
        tag = ly.Phi(phi).value
        res.summary[f"{tag}_success"] = cert.success
        res.summary[f"{tag}_m"] = cert.m
        res.summary[f"{tag}_b"] = cert.b
        res.summary[f"{tag}_fd_max_rel"] = cert.fd_max_rel
        res.summary[f"{tag}_envelope_ok"] = bool(cert.envelope.get("c_trend_ok", False) and cert.envelope.get("d_trend_ok", False))
        res.text[f"certificate_{tag}.txt"] = cert.to_text()
        ok = ok and cert.success
    rows = [(b.value, s, float(r), float(j)) for (b, s), v in flux.items() for r, j in zip(r_flux, v)]
    res.tables["flux"] = (["boundary", "sign", "r", "jump"], rows)
    for name, t in (("G_p2", tables.p2), ("G_p3", tables.p3)):
        res.tables[name] = (["eta", "G", "Gprime"], np.column_stack([t.grid, t.values, t.derivs]))
    res.ok = ok
    res.summary["success"] = ok
    return res


def _spike_task(spec, levels, r_low, t_end, dt_base, eps, seed, i):
    return scan_spikes(spec, levels, r_low, t_end, substream(seed, i), dt_base, eps)


def run_spikes(
    spec: SystemSpec,
    levels,
    r_low: float,
    t_end: float,
    seed=0,
    n_paths: int = 1,
    workers: int = 1,
    dt_base: float = 1e-2,
    eps: float = 0.05,
    clock: str = "both",
    min_gaps: int = MIN_EXCEEDANCES,
) -> ExperimentResult:
    """Mean spike spacing against level R, on the plain and slow clocks.

    Path i runs for ``t_end`` on substream(seed, i) and gaps are pooled.
    The fit keeps levels with at least ``min_gaps`` gaps and R >= 4 r_low.
    """
    levels = np.sort(np.asarray(levels, dtype=float))
    args = (spec, levels, r_low, t_end, dt_base, eps, seed)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scans = list(pool.map(lambda i: _spike_task(*args, i), range(n_paths)))
    else:
        scans = [_spike_task(*args, i) for i in range(n_paths)]
    gt = [np.concatenate([sc.gaps_t[j] for sc in scans]) for j in range(levels.size)]
    gs = [np.concatenate([sc.gaps_s[j] for sc in scans]) for j in range(levels.size)]
    counts = np.array([g.size for g in gt])
    window = fit_window(levels, counts, r_low, min_gaps)
    res = ExperimentResult("spikes")
    res.summary.update(
        n=spec.n,
        sigma=spec.sigma,
        r_low=r_low,
        t_end=t_end,
        n_paths=n_paths,
        capped=any(sc.capped for sc in scans),
        n_window=int(window.sum()),
        total_gaps=int(counts.sum()),
    )
    rows = []
    for j, R in enumerate(levels):
        def ms(g):
            return (float(g.mean()), float(g.std(ddof=1) / math.sqrt(g.size))) if g.size > 1 else (math.nan, math.nan)
        rows.append((R, int(counts[j]), *ms(gt[j]), *ms(gs[j]), bool(window[j])))
    res.tables["spikes"] = (["R", "gaps", "mean_gap_t", "se_t", "mean_gap_s", "se_s", "in_window"], rows)
    clocks = ("plain", "timechanged") if clock == "both" else (clock,)
    for name in clocks:
        means = np.array([r[2] if name == "plain" else r[4] for r in rows])
        try:
            slope, icpt, resid = fit_loglog(levels, means, window)
        except DomainError as exc:
            raise InsufficientData(f"spike fit on the {name} clock: {exc}") from exc
        res.summary[f"slope_{name}"] = slope
        res.summary[f"intercept_{name}"] = icpt
        res.summary[f"residual_{name}"] = resid
    res.summary["window_lo"] = float(levels[window].min()) if window.any() else math.nan
    res.summary["window_hi"] = float(levels[window].max()) if window.any() else math.nan
    return res


def stationary_series(spec, t_end, seed=0, r_star=1.0, dt_sample=1.0, ds_sample=1.0, dt_base=1e-2, eps=0.05):
    """Burned-in |z| samples on the physical and slow clock grids of one path."""
    st = sample_stationary(spec, t_end, seed, dt_sample, ds_sample, dt_base, eps)
    if st.capped:
        raise InsufficientData("stationary run reached the radius cap")
    return burn_in(st.plain, r_star), burn_in(st.timechanged, r_star)


def run_tail(
    spec: SystemSpec,
    t_end: float,
    seed=0,
    levels=None,
    r_low: float = 1.0,
    dt_sample: float = 1.0,
    ds_sample: float = 1.0,
    dt_base: float = 1e-2,
    eps: float = 0.05,
    samples: tuple | None = None,
) -> ExperimentResult:
    """Survival of |z| under the stationary law, on both clocks.

    ``samples`` may pass a (plain, timechanged) pair from stationary_series
    to reuse one long run.
    """
    levels = np.geomspace(2 * r_low, 200 * r_low, 15) if levels is None else np.asarray(levels, dtype=float)
    if samples is None:
        samples = stationary_series(spec, t_end, seed, r_low, dt_sample, ds_sample, dt_base, eps)
    plain, slow = samples
    res = ExperimentResult("tail")
    res.summary.update(n=spec.n, sigma=spec.sigma, t_end=t_end, samples_plain=plain.size, samples_timechanged=slow.size)
    for name, x in (("plain", plain), ("timechanged", slow)):
        fit = tail_survival(x, levels, r_low)
        res.summary[f"slope_{name}"] = fit.slope
        res.summary[f"slope_se_{name}"] = fit.slope_se
        res.summary[f"residual_{name}"] = fit.residual
        res.summary[f"window_{name}"] = f"{fit.levels[fit.window].min()!r}:{fit.levels[fit.window].max()!r}"
        rows = []
        for (R, S, c, w) in fit.rows():
            rows.append((R, S, c, batch_means_se((x >= R).astype(float)), w))
        res.tables[f"tail_{name}"] = (["R", "survival", "count", "se", "in_window"], rows)
    return res


def run_moments(
    spec: SystemSpec,
    gammas,
    t_end: float,
    seed=0,
    r_star: float = 1.0,
    dt_sample: float = 1.0,
    dt_base: float = 1e-2,
    eps: float = 0.05,
    samples: tuple | None = None,
) -> ExperimentResult:
    """Running stationary means of |z|^gamma with convergence verdicts."""
    if samples is None:
        samples = stationary_series(spec, t_end, seed, r_star, dt_sample, dt_sample, dt_base, eps)
    plain = samples[0]
    res = ExperimentResult("moments")
    res.summary.update(n=spec.n, sigma=spec.sigma, t_end=t_end, samples=plain.size)
    rows = []
    for g in gammas:
        ms = empirical_moment(plain, g)
        res.summary[f"verdict_gamma_{g!r}"] = ms.verdict.value
        res.summary[f"last_ratios_gamma_{g!r}"] = ";".join(f"{x:.4f}" for x in ms.ratios[-3:])
        rows += [(g, int(c), float(m)) for c, m in zip(ms.counts, ms.means)]
    res.tables["moments"] = (["gamma", "count", "mean"], rows)
    return res


def deep_start(n: int, eta_star: float, r_in: float, width: float = 0.1) -> float:
    """Radius where the wedge |theta| <= eta* r^-(n+2)/2 is at most ``width`` wide."""
    return max(2.0 * r_in, (eta_star / width) ** (2.0 / (n + 2)))


def run_exitrate(
    spec: SystemSpec,
    eta_star: float,
    n_exits: int,
    seed=0,
    r_in: float = 1.0,
    r0: float | None = None,
    n_ktau: int = 0,
    ds: float = 1e-3,
    clock: str = "timechanged",
    upper_fraction: float = 0.2,
) -> ExperimentResult:
    """Exit-time tail rate from the thin wedge, against the eigenvalue.

    Exits for the rate start deep in the wedge, where the angular motion on
    the slow clock is the unstable Ornstein-Uhlenbeck process.  With
    ``n_ktau`` > 0 a second ensemble started at 2 r_in gives the tail of the
    orbit parameter K at exit.
    """
    r0 = deep_start(spec.n, eta_star, r_in) if r0 is None else r0
    ex = wedge_exits(spec, eta_star, r_in, n_exits, seed, ds, r0, clock)
    rate = exit_tail_rate(ex.tau, upper_fraction)
    lam = smallest_eigenvalue(eta_star, spec.sigma, spec.n)
    res = ExperimentResult("exitrate")
    res.summary.update(
        n=spec.n,
        sigma=spec.sigma,
        eta_star=eta_star,
        r0=r0,
        n_exits=n_exits,
        angular_fraction=float(ex.angular.mean()),
        rate=rate,
        lambda1=lam,
        rel_err=abs(rate - lam) / lam,
        mean_tau=float(ex.tau.mean()),
    )
    ts = np.sort(ex.tau)
    grid = np.quantile(ts, np.linspace(0, 0.995, 40))
    S, _ = survival(ts, grid)
    res.tables["tau_survival"] = (["tau", "survival"], np.column_stack([grid, S]))
    if n_ktau:
        kx = wedge_exits(spec, eta_star, r_in, n_ktau, substream(seed, 1 << 30), ds, None, clock)
        fit = ktau_tail(kx.K, min_samples=min(n_ktau, 10_000))
        res.summary.update(ktau_slope=fit.slope, ktau_residual=fit.residual, ktau_events=int(kx.angular.sum()))
        res.tables["ktau"] = (["K", "survival", "count", "in_window"], list(fit.rows()))
    return res


def run_eigen(n: int, sigma: float, eta_stars, grid_size: int | None = None) -> ExperimentResult:
    limit = (3 * n + 2) / 2
    res = ExperimentResult("eigen")
    res.summary.update(n=n, sigma=sigma, limit=limit)
    rows = []
    for es in eta_stars:
        lam = smallest_eigenvalue(es, sigma, n, grid_size)
        rows.append((es, lam, abs(lam - limit) / limit))
        res.summary[f"lambda1_eta_{es!r}"] = lam
    res.tables["eigen"] = (["eta_star", "lambda1", "rel_diff_limit"], rows)
    return res


def run_exitmoments(
    a: float,
    c: float,
    eta_star: float,
    sigma: float,
    n: int,
    grid_size: int | None = None,
    mc_points: int = 0,
    mc_paths: int = 100_000,
    mc_dt: float = 1e-2,
    seed=0,
    workers: int = 1,
) -> ExperimentResult:
    """Exit-moment table, optionally cross-checked by Monte Carlo at interior points."""
    table = solve_bvp(a, c, eta_star, sigma, n, grid_size)
    res = ExperimentResult("exitmoments")
    res.summary.update(
        a=a, c=c, eta_star=eta_star, sigma=sigma, n=n, grid_size=table.grid.size,
        richardson=table.richardson, weber_residual=weber_residual(table) if c == 0 else math.nan,
    )
    res.tables["G"] = (["eta", "G", "Gprime"], np.column_stack([table.grid, table.values, table.derivs]))
    if mc_points:
        spec = OUSpec.for_degree(n, sigma)
        lo, hi = c - eta_star, c + eta_star
        pts = np.linspace(lo, hi, mc_points + 2)[1:-1]
        rows = []
        worst_rel = worst_se = 0.0
        for i, x in enumerate(pts):
            m, se = mc_exit_moment(a, c, x, spec, eta_star, mc_paths, mc_dt, substream(seed, i), workers)
            g = table.evaluate(x)[0]
            rel = abs(m - g) / g
            nse = abs(m - g) / se if se > 0 else math.inf
            worst_rel, worst_se = max(worst_rel, rel), max(worst_se, nse)
            rows.append((x, g, m, se, rel, nse))
        res.tables["mc"] = (["eta", "G_bvp", "G_mc", "se_mc", "rel_diff", "n_se"], rows)
        res.summary.update(mc_worst_rel=worst_rel, mc_worst_nse=worst_se)
    return res


def run_rescaling(
    n: int,
    sigma: float = 2.0,
    t_end: float = 2.0,
    n_paths: int = 100_000,
    seed=0,
    dt_base: float = 1e-2,
    eps: float = 0.05,
    workers: int = 1,
    exponents: tuple | None = None,
) -> ExperimentResult:
    """Two-sample KS test of sigma^-l |z^sigma(t)| against |z^1(sigma^l' t)|.

    The reference run uses (dt_base, eps); the sigma run uses the mapped
    discretisation (dt_base sigma^-l', eps sigma^l), under which the two
    Euler schemes are related by the same rescaling as the SDEs.
    ``exponents`` overrides (l, l') for sensitivity checks.
    """
    l, lp = exponents if exponents is not None else (2 / (n + 2), 2 * n / (n + 2))
    cfg_s = IntegratorConfig(dt_base=dt_base * sigma**-lp, drift_cap_eps=eps * sigma**l, t_max=t_end)
    cfg_1 = IntegratorConfig(dt_base=dt_base, drift_cap_eps=eps, t_max=t_end * sigma**lp)
    zs = terminal_states(SystemSpec.monomial(n, sigma), cfg_s, n_paths, substream(seed, 0), workers=workers)
    z1 = terminal_states(SystemSpec.monomial(n, 1.0), cfg_1, n_paths, substream(seed, 1), workers=workers)
    # capped paths stay in as |z| = inf, the top of both empirical laws
    a, b = np.abs(zs) * sigma**-l, np.abs(z1)
    ks = sps.ks_2samp(a, b)
    res = ExperimentResult("rescaling")
    res.summary.update(
        n=n, sigma=sigma, l=l, l_prime=lp, t_end=t_end, n_paths=n_paths,
        capped=int((~np.isfinite(a)).sum() + (~np.isfinite(b)).sum()),
        ks_statistic=float(ks.statistic), ks_pvalue=float(ks.pvalue),
    )
    q = np.linspace(0.01, 0.99, 50)
    res.tables["quantiles"] = (["q", "rescaled_sigma", "reference"], np.column_stack([q, np.quantile(a, q), np.quantile(b, q)]))
    return res
