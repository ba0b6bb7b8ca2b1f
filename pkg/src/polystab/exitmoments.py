"""Exit moments of the unstable Ornstein-Uhlenbeck process.

The process is d eta = k eta dt + sigma dW with k = 3n/2 + 1, killed when it
leaves [c - eta*, c + eta*].  G(eta) = E_eta exp(a tau) solves

    sigma^2/2 G'' + k eta G' + a G = 0,   G(c +- eta*) = 1,

and stays bounded as long as a is below the first Dirichlet eigenvalue.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from numba import njit
from scipy.interpolate import CubicHermiteSpline
from scipy.sparse.linalg import splu

from .errors import BudgetError, ConvergenceError, DomainError, SolveError, TableError

__all__ = [
    "OUSpec",
    "ExitMomentTable",
    "default_grid_size",
    "solve_bvp",
    "mc_exit_moment",
    "weber_beta",
    "weber_residual",
    "smallest_eigenvalue",
]


def ou_rate(n: int) -> float:
    return 1.5 * n + 1.0


@dataclass(frozen=True)
class OUSpec:
    rate: float
    sigma: float

    def __post_init__(self):
        if not self.rate > 0:
            raise DomainError(f"OU rate must be positive, got {self.rate}")
        if not self.sigma > 0:
            raise DomainError(f"OU sigma must be positive, got {self.sigma}")

    @classmethod
    def for_degree(cls, n: int, sigma: float) -> "OUSpec":
        return cls(ou_rate(n), float(sigma))


@dataclass(eq=False)
class ExitMomentTable:
    """G = E exp(a tau) sampled on a uniform grid, with G'."""

    a: float
    c: float
    eta_star: float
    sigma: float
    n: int
    grid: np.ndarray
    values: np.ndarray
    derivs: np.ndarray
    richardson: float | None = None
    _spline: CubicHermiteSpline | None = field(default=None, repr=False)

    @property
    def rate(self) -> float:
        return ou_rate(self.n)

    @property
    def grid_size(self) -> int:
        return int(self.grid.size)

    @property
    def lo(self) -> float:
        return float(self.grid[0])

    @property
    def hi(self) -> float:
        return float(self.grid[-1])

    def _get_spline(self):
        if self._spline is None:
            self._spline = CubicHermiteSpline(self.grid, self.values, self.derivs)
        return self._spline

    def evaluate(self, eta):
        """Return (G, G', G'') at eta; G'' is taken from the ODE itself."""
        eta = np.asarray(eta, dtype=float)
        # small slack absorbs the rounding in eta = theta * r^k on the boundary
        slack = 1e-9 * max(1.0, self.eta_star)
        if np.any(eta < self.lo - slack) or np.any(eta > self.hi + slack):
            raise TableError(
                f"eta outside table range [{self.lo}, {self.hi}]: "
                f"[{float(np.min(eta))}, {float(np.max(eta))}]"
            )
        e = np.clip(eta, self.lo, self.hi)
        spl = self._get_spline()
        g = spl(e)
        gp = spl(e, 1)
        gpp = -(2.0 / self.sigma**2) * (self.rate * e * gp + self.a * g)
        return g, gp, gpp

    def to_csv(self, path) -> None:
        header = (
            f"a={self.a!r},c={self.c!r},eta_star={self.eta_star!r},"
            f"sigma={self.sigma!r},n={self.n},grid_size={self.grid_size}"
        )
        data = np.column_stack([self.grid, self.values, self.derivs])
        with open(path, "w") as fh:
            fh.write("# " + header + "\n")
            fh.write("eta,G,Gprime\n")
            np.savetxt(fh, data, delimiter=",", fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "ExitMomentTable":
        with open(path) as fh:
            first = fh.readline()
        if not first.startswith("#"):
            raise TableError(f"{path}: missing metadata header")
        meta = dict(kv.split("=", 1) for kv in first[1:].strip().split(","))
        data = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
        if data.shape[0] != int(meta["grid_size"]):
            raise TableError(f"{path}: expected {meta['grid_size']} rows, got {data.shape[0]}")
        return cls(
            a=float(meta["a"]),
            c=float(meta["c"]),
            eta_star=float(meta["eta_star"]),
            sigma=float(meta["sigma"]),
            n=int(meta["n"]),
            grid=data[:, 0].copy(),
            values=data[:, 1].copy(),
            derivs=data[:, 2].copy(),
        )


def _check_a(a: float, n: int) -> None:
    cap = ou_rate(n)
    if not (0.0 < a < cap):
        raise DomainError(f"a must lie in (0, {cap}) for n={n}, got {a}")


def default_grid_size(eta_star: float, sigma: float, per_sigma: int = 256) -> int:
    """Grid of 2^m + 1 points with spacing at most sigma / per_sigma."""
    need = 2.0 * eta_star * per_sigma / sigma
    m = max(7, int(math.ceil(math.log2(max(need, 2.0)))))
    return 2**m + 1


def _solve_tridiagonal(a, c, eta_star, sigma, n, N):
    k = ou_rate(n)
    eta = np.linspace(c - eta_star, c + eta_star, N)
    h = eta[1] - eta[0]
    d2 = 0.5 * sigma**2 / h**2
    lower = d2 - k * eta / (2 * h)
    upper = d2 + k * eta / (2 * h)
    diag = np.full(N, a - 2 * d2)
    M = N - 2
    ab = np.empty((3, M))
    ab[0, 0] = 0.0
    ab[0, 1:] = upper[1:-2]
    ab[1] = diag[1:-1]
    ab[2, :-1] = lower[2:-1]
    ab[2, -1] = 0.0
    rhs = np.zeros(M)
    rhs[0] -= lower[1]
    rhs[-1] -= upper[-2]
    try:
        inner = scipy.linalg.solve_banded((1, 1), ab, rhs, check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolveError(f"tridiagonal solve failed: {exc}") from exc
    if not np.all(np.isfinite(inner)):
        raise SolveError("tridiagonal solve produced non-finite values")
    G = np.ones(N)
    G[1:-1] = inner
    Gp = np.empty(N)
    Gp[1:-1] = (G[2:] - G[:-2]) / (2 * h)
    # one-sided Taylor step closed with G'' from the ODE at the endpoint
    s2 = sigma**2
    Gp[-1] = (1.0 - G[-2] - h * h * a / s2) / (h + h * h * k * eta[-1] / s2)
    Gp[0] = (G[1] - 1.0 + h * h * a / s2) / (h - h * h * k * eta[0] / s2)
    return eta, G, Gp


def solve_bvp(
    a: float,
    c: float,
    eta_star: float,
    sigma: float,
    n: int,
    grid_size: int | None = None,
    richardson: bool = True,
) -> ExitMomentTable:
    """Second-order finite-difference solve of the exit-moment ODE.

    With ``richardson`` the solve is repeated on the doubled grid and the
    relative sup-norm change is stored on the table.
    """
    _check_a(a, n)
    if not eta_star > abs(c):
        raise DomainError(f"eta_star must exceed |c|: eta_star={eta_star}, c={c}")
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    N = default_grid_size(eta_star, sigma) if grid_size is None else int(grid_size)
    if N < 64:
        raise DomainError(f"grid_size must be at least 64, got {N}")
    eta, G, Gp = _solve_tridiagonal(a, c, eta_star, sigma, n, N)
    change = None
    if richardson:
        _, G2, _ = _solve_tridiagonal(a, c, eta_star, sigma, n, 2 * N - 1)
        change = float(np.max(np.abs(G - G2[::2])) / np.max(np.abs(G2)))
    return ExitMomentTable(a, float(c), float(eta_star), float(sigma), int(n), eta, G, Gp, change)


@njit(cache=True, nogil=True)
def _ou_exit_chunk(x, t, alive, tau, normals, rate, sigma, dt, dt_min, lo, hi):
    """Advance live paths by one normal per step until exit or the chunk ends."""
    n_alive = 0
    for j in range(x.shape[0]):
        if not alive[j]:
            continue
        xj = x[j]
        tj = t[j]
        for i in range(normals.shape[0]):
            # shrink the step near the boundary so that neither the drift nor
            # a few standard deviations of noise can reach it within one step
            dist = min(hi - xj, xj - lo)
            h = (dist / (4.0 * sigma)) ** 2
            h_drift = 0.5 * dist / (rate * abs(xj) + 1e-300)
            if h_drift < h:
                h = h_drift
            if h > dt:
                h = dt
            elif h < dt_min:
                h = dt_min
            e1 = math.expm1(rate * h)
            sd = sigma * math.sqrt(e1 * (e1 + 2.0) / (2.0 * rate))
            xn = (1.0 + e1) * xj + sd * normals[i, j]
            if xn >= hi or xn <= lo:
                edge = hi if xn >= hi else lo
                tau[j] = tj + h * (edge - xj) / (xn - xj)
                alive[j] = False
                break
            xj = xn
            tj += h
        x[j] = xj
        t[j] = tj
        if alive[j]:
            n_alive += 1
    return n_alive


def _mc_block(a, c, eta0, spec, eta_star, m, dt, t_cap, seq, chunk):
    rng = np.random.Generator(np.random.Philox(seq))
    dt_min = dt * 1e-6
    # work in the centred variable x = eta - c
    x = np.full(m, eta0 - c)
    t = np.zeros(m)
    tau = np.full(m, np.nan)
    alive = np.ones(m, dtype=np.bool_)
    n_alive = m
    while n_alive:
        idx = np.flatnonzero(alive & (t < t_cap))
        if idx.size == 0:
            break
        sub_x, sub_t, sub_tau = x[idx], t[idx], tau[idx]
        sub_alive = np.ones(idx.size, dtype=np.bool_)
        normals = rng.standard_normal((chunk, idx.size))
        n_alive = _ou_exit_chunk(
            sub_x, sub_t, sub_alive, sub_tau, normals, spec.rate, spec.sigma, dt, dt_min,
            -eta_star, eta_star,
        )
        x[idx], t[idx], tau[idx], alive[idx] = sub_x, sub_t, sub_tau, sub_alive
    return tau, t


def mc_exit_moment(
    a: float,
    c: float,
    eta0: float,
    spec: OUSpec,
    eta_star: float,
    n_paths: int,
    dt: float,
    seed: int,
    workers: int = 1,
    t_cap: float | None = None,
    block_size: int = 8192,
    return_info: bool = False,
):
    """Monte Carlo estimate of E exp(a tau) with its standard error.

    Paths advance by the exact OU transition.  Steps are ``dt`` in the bulk
    and shrink near the boundary so that a crossing hidden inside one step is
    improbable; the exit time inside the crossing step is linearly
    interpolated.  Paths are split into fixed
    blocks, each with its own Philox substream, so the result does not depend
    on ``workers``.  Paths still inside at ``t_cap`` contribute
    exp(a t_cap) and are reported as censored; ``t_cap`` defaults to a time
    far in the exponential exit tail.
    """
    if not (0.0 < a < spec.rate):
        raise DomainError(f"a must lie in (0, {spec.rate}), got {a}")
    if not eta_star > abs(c):
        raise DomainError("eta_star must exceed |c|")
    if not (c - eta_star <= eta0 <= c + eta_star):
        raise DomainError(f"eta0={eta0} outside [{c - eta_star}, {c + eta_star}]")
    if n_paths < 1 or not dt > 0:
        raise DomainError("n_paths must be positive and dt > 0")
    if abs(eta0 - c) == eta_star:
        info = {"n_exit": n_paths, "n_censored": 0}
        return (1.0, 0.0, info) if return_info else (1.0, 0.0)
    if t_cap is None:
        # P(tau > t) decays like exp(-rate t)
        t_cap = 40.0 / spec.rate
    chunk = 256
    blocks = [(i, min(block_size, n_paths - i * block_size)) for i in range(-(-n_paths // block_size))]
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seqs = root.spawn(len(blocks))

    def run(i):
        return _mc_block(a, c, eta0, spec, eta_star, blocks[i][1], dt, t_cap, seqs[i], chunk)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(len(blocks))))
    else:
        results = [run(i) for i in range(len(blocks))]
    tau = np.concatenate([r[0] for r in results])
    t_end = np.concatenate([r[1] for r in results])
    censored = np.isnan(tau)
    n_exit = int(np.count_nonzero(~censored))
    if n_exit < min(100, n_paths):
        raise BudgetError(f"only {n_exit} of {n_paths} paths exited before t = {t_cap}")
    tau = np.where(censored, t_end, tau)
    w = np.exp(a * tau)
    est = float(w.mean())
    se = float(w.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else float("nan")
    if return_info:
        return est, se, {"n_exit": n_exit, "n_censored": int(censored.sum())}
    return est, se


def weber_beta(n: int, sigma: float) -> float:
    return (3 * n + 2) / sigma**2


def weber_residual(table: ExitMomentTable) -> float:
    """Pointwise relative residual of the parabolic-cylinder form of the table.

    H(v) = exp(beta eta^2 / 4) G(eta) with v = sqrt(beta) (eta - c) must solve
    H'' = (v^2/4 + 1/2 - 2a/(sigma^2 beta)) H.  H'' is formed with the
    five-point fourth-order stencil on the central half of the grid, so what
    remains is the second-order error of the table itself.  Each residual is
    divided by the larger of the two balanced terms at that point, which
    removes the exp(v^2/4) growth of H.
    """
    beta = weber_beta(table.n, table.sigma)
    x = table.grid - table.c
    v = math.sqrt(beta) * x
    hv = v[1] - v[0]
    # log-space keeps exp(v^2/4) from overflowing
    logH = v * v / 4.0 + np.log(table.values)
    centre = np.flatnonzero(np.abs(x) <= 0.5 * table.eta_star)
    i = centre[(centre > 1) & (centre < x.size - 2)]
    H = np.exp(logH - np.max(logH[i]))
    d2 = (-H[i + 2] + 16 * H[i + 1] - 30 * H[i] + 16 * H[i - 1] - H[i - 2]) / (12 * hv**2)
    coef = v[i] ** 2 / 4.0 + 0.5 - 2.0 * table.a / (table.sigma**2 * beta)
    scale = np.maximum(np.abs(d2), np.abs(coef * H[i]))
    return float(np.max(np.abs(d2 - coef * H[i]) / scale))


def _killed_ou_operator(eta_star, sigma, n, N):
    k = ou_rate(n)
    eta = np.linspace(-eta_star, eta_star, N)
    h = eta[1] - eta[0]
    e = eta[1:-1]
    d2 = 0.5 * sigma**2 / h**2
    main = np.full(e.size, 2 * d2)
    # (eta f)' by centred differences: (eta_{i+1} f_{i+1} - eta_{i-1} f_{i-1}) / 2h
    up = -d2 + k * e[1:] / (2 * h)
    lo = -d2 - k * e[:-1] / (2 * h)
    return sp.diags([lo, main, up], [-1, 0, 1], format="csc")


def smallest_eigenvalue(
    eta_star: float,
    sigma: float,
    n: int,
    grid_size: int | None = None,
    tol: float = 1e-12,
    max_iter: int = 500,
) -> float:
    """Smallest eigenvalue of -sigma^2/2 f'' + k (eta f)' with zero boundary values.

    Inverse power iteration with a sparse LU factorisation.  The centred
    scheme for this operator is the exact transpose of the centred scheme
    for the killed generator, so the boundary layer of the latter does not
    spoil the eigenvalue.
    """
    if not (eta_star > 0 and sigma > 0):
        raise DomainError("eta_star and sigma must be positive")
    N = default_grid_size(eta_star, sigma, per_sigma=64) if grid_size is None else int(grid_size)
    if N < 128:
        raise DomainError(f"grid_size must be at least 128, got {N}")
    Q = _killed_ou_operator(eta_star, sigma, n, N)
    lu = splu(Q)
    x = np.exp(-0.5 * np.linspace(-3, 3, Q.shape[0]) ** 2)
    x /= np.linalg.norm(x)
    lam = np.inf
    for _ in range(max_iter):
        y = lu.solve(x)
        if not np.all(np.isfinite(y)):
            raise ConvergenceError("inverse iteration produced non-finite values")
        new = float(x @ y) / float(y @ y)
        x = y / np.linalg.norm(y)
        if abs(new - lam) <= tol * abs(new):
            if not new > 0:
                raise ConvergenceError(f"iteration converged to nonpositive value {new}")
            return new
        lam = new
    raise ConvergenceError(f"inverse iteration did not converge in {max_iter} steps")
