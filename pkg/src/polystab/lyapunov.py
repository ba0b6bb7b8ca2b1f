"""Piecewise Lyapunov function for the noise-stabilised polynomial SDE.

The principal wedge |theta| <= pi/n is cut into four angular regions and a
local function is attached to each:

* S0, theta0 <= |theta| <= pi/n:       psi0 = r^p
* S1, theta1 <= |theta| <= theta0:     psi1 = r^p g(|theta|), solving T1 psi1 = -h1 r^p |theta|^-q
* S2, eta* r^-k <= |theta| <= theta1:  psi2 = r^p (C |theta|^(-p/n) + D |theta|^-q), T2 psi2 = -h2 r^p |theta|^-q
* S3, |theta| r^k <= eta*:             psi3 = c1 r^p3 G_p3(eta) + c2 r^p2 G_p2(eta) - c3 r^p3

with k = (n+2)/2 and eta = theta r^k.  The global function is the radial
cutoff Lambda(r) times the local pieces, glued without smoothing; the sign
of the jump of d/dtheta across each interface takes the place of C^2
regularity.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import integrate

from .errors import DomainError, QuadratureError, RegionError, VerificationFailure
from .exitmoments import ExitMomentTable, solve_bvp
from .model import (
    PartitionParams,
    PolarPoint,
    RegionId,
    RegionKind,
    SystemSpec,
    classify_arrays,
    generator_values,
    wedge_rotate,
)

__all__ = [
    "LyapunovParams",
    "PsiValue",
    "ExitTables",
    "Phi",
    "Boundary",
    "GridSpec",
    "Certificate",
    "derive_params",
    "search_params",
    "build_tables",
    "cutoff",
    "psi0",
    "psi1",
    "psi2",
    "psi3",
    "psi",
    "psi_field",
    "check_flux",
    "flux_report",
    "verify_drift",
]

QUAD_RTOL = 1e-10
_LN2 = math.log(2.0)


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class LyapunovParams:
    gamma: float
    p: float
    q: float
    p2: float
    p3: float
    delta: float
    h1: float
    h2: float
    h3: float
    partition: PartitionParams

    def __post_init__(self):
        n = self.n
        tol = 1e-12 * max(1.0, abs(self.p3))
        if not (n < self.gamma < 2 * n):
            raise DomainError(f"gamma must lie in ({n}, {2 * n}), got {self.gamma}")
        if abs(self.p - (self.gamma - n)) > tol:
            raise DomainError("p must equal gamma - n")
        if not (self.p / n < self.q < 1):
            raise DomainError(f"q must lie in (p/n, 1) = ({self.p / n}, 1), got {self.q}")
        if abs(self.p2 - self.p * (3 * n + 2) / (2 * n)) > tol:
            raise DomainError("p2 must equal p(3n+2)/(2n)")
        if abs(self.p3 - (self.p + self.q * (n + 2) / 2)) > tol:
            raise DomainError("p3 must equal p + q(n+2)/2")
        if not (0 < self.delta <= n / self.p3):
            raise DomainError(f"delta must lie in (0, n/p3], got {self.delta}")
        if min(self.h1, self.h2, self.h3) <= 0:
            raise DomainError("h1, h2, h3 must be positive")

    @property
    def n(self) -> int:
        return self.partition.n

    @property
    def k(self) -> float:
        return (self.n + 2) / 2.0

    @property
    def h1_cap(self) -> float:
        th0 = self.partition.theta0
        return self.p * th0**self.q * abs(math.cos(self.n * th0))

    @property
    def D(self) -> float:
        return self.h2 / (self.q * self.n - self.p)

    def constraint_violations(self) -> list[str]:
        """Ordering constraints on h1, h2 that the flux conditions rely on."""
        out = []
        if not self.h1 < self.h1_cap:
            out.append(f"h1={self.h1} must be below p theta0^q |cos(n theta0)| = {self.h1_cap}")
        if not self.h2 < self.h1:
            out.append(f"h2={self.h2} must be below h1={self.h1}")
        return out

    @property
    def admissible(self) -> bool:
        return not self.constraint_violations()

    def as_dict(self) -> dict:
        pp = self.partition
        return {
            "n": self.n,
            "gamma": self.gamma,
            "p": self.p,
            "q": self.q,
            "p2": self.p2,
            "p3": self.p3,
            "delta": self.delta,
            "h1": self.h1,
            "h2": self.h2,
            "h3": self.h3,
            "theta0": pp.theta0,
            "theta1": pp.theta1,
            "eta_star": pp.eta_star,
            "r_star": pp.r_star,
        }


def _base_exponents(n: int, gamma: float, q: float | None = None):
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise DomainError(f"n must be a positive integer, got {n}")
    if not (n < gamma < 2 * n):
        raise DomainError(f"gamma must lie in the open interval ({n}, {2 * n}), got {gamma}")
    p = gamma - n
    if q is None:
        q = 0.5 * (p / n + 1.0)
    p2 = p * (3 * n + 2) / (2 * n)
    p3 = p + q * (n + 2) / 2
    return p, q, p2, p3


def _r_star_floor(n: int, theta1: float, eta_star: float) -> float:
    return (eta_star / theta1) ** (2.0 / (n + 2))


class ExitTables(NamedTuple):
    """G tables for a = p2 and a = p3 on [-eta*, eta*]."""

    p2: ExitMomentTable
    p3: ExitMomentTable


def build_tables(params: LyapunovParams, sigma: float, grid_size: int | None = None) -> ExitTables:
    es = params.partition.eta_star
    n = params.n
    return ExitTables(
        solve_bvp(params.p2, 0.0, es, sigma, n, grid_size, richardson=False),
        solve_bvp(params.p3, 0.0, es, sigma, n, grid_size, richardson=False),
    )


def _check_tables(params: LyapunovParams, tables: ExitTables) -> None:
    es = params.partition.eta_star
    for t, a in ((tables.p2, params.p2), (tables.p3, params.p3)):
        if t.n != params.n or abs(t.a - a) > 1e-12 * a or abs(t.eta_star - es) > 1e-12 * es or t.c != 0:
            raise DomainError(
                f"exit table (a={t.a}, eta*={t.eta_star}, n={t.n}) does not match the parameters"
            )


# ---------------------------------------------------------------------------
# local pieces


@dataclass(frozen=True)
class PsiValue:
    value: float
    region: RegionId
    gradient: tuple[float, float] | None = None
    second: tuple[float, float, float] | None = None


def _rotate(params, p: PolarPoint):
    tp, k = wedge_rotate(p.theta, params.n)
    return tp, k


def _region_slack(x):
    return 1e-12 * max(1.0, abs(x))


def _require(cond: bool, what: str, p: PolarPoint):
    if not cond:
        raise RegionError(f"point (r={p.r}, theta={p.theta}) is not in closed {what}")


def _quad(lo: float, hi: float, params: LyapunovParams) -> float:
    n, p, q = params.n, params.p, params.q
    if lo == hi:
        return 0.0
    val, err = integrate.quad(
        lambda a: math.sin(n * a) ** (p / n - 1.0) * a ** (-q),
        lo,
        hi,
        epsabs=0.0,
        epsrel=QUAD_RTOL,
        limit=200,
    )
    if not err <= max(QUAD_RTOL * abs(val), 1e-300) * 10:
        raise QuadratureError(f"quadrature on [{lo}, {hi}] reached only {err:.2e}")
    return val


def _g_profile(params: LyapunovParams, absth: np.ndarray):
    """g, g', g'' of the S1 angular profile at |theta| values in [theta1, theta0]."""
    n, p, q, h1 = params.n, params.p, params.q, params.h1
    th0 = params.partition.theta0
    absth = np.asarray(absth, dtype=float)
    flat = absth.ravel()
    u, inv = np.unique(flat, return_inverse=True)
    # I(u) = int_u^theta0, accumulated from the top so each piece is short
    pieces = np.empty(u.size)
    upper = np.append(u[1:], th0)
    for j in range(u.size):
        pieces[j] = _quad(u[j], upper[j], params)
    I = np.cumsum(pieces[::-1])[::-1]
    S = np.sin(n * u)
    cs = np.cos(n * u)
    g = S ** (-p / n) * (math.sin(n * th0) ** (p / n) + h1 * I)
    N = p * cs * g + h1 * u ** (-q)
    gp = -N / S
    Np = -p * n * S * g + p * cs * gp - q * h1 * u ** (-q - 1.0)
    gpp = -(Np * S - N * n * cs) / S**2
    shape = absth.shape
    return g[inv].reshape(shape), gp[inv].reshape(shape), gpp[inv].reshape(shape)


def _C(params: LyapunovParams) -> float:
    n, p, q = params.n, params.p, params.q
    th1 = params.partition.theta1
    g1 = _g_profile(params, np.array([th1]))[0][0]
    return th1 ** (p / n) * g1 - params.D * th1 ** (p / n - q)


@dataclass
class _Pieces:
    """Value and polar partials of the local functions, without cutoff."""

    val: np.ndarray
    dr: np.ndarray
    dth: np.ndarray
    drr: np.ndarray
    dthth: np.ndarray
    drth: np.ndarray


def _empty(shape):
    return _Pieces(*(np.zeros(shape) for _ in range(6)))


def _eval_s0(params, r, a, s):
    p = params.p
    z = np.zeros_like(r)
    return _Pieces(r**p, p * r ** (p - 1), z, p * (p - 1) * r ** (p - 2), z.copy(), z.copy())


def _eval_s1(params, r, a, s):
    p = params.p
    g, gp, gpp = _g_profile(params, a)
    rp = r**p
    return _Pieces(
        rp * g,
        p * r ** (p - 1) * g,
        s * rp * gp,
        p * (p - 1) * r ** (p - 2) * g,
        rp * gpp,
        s * p * r ** (p - 1) * gp,
    )


def _eval_s2(params, r, a, s, C=None):
    n, p, q, D = params.n, params.p, params.q, params.D
    C = _C(params) if C is None else C
    e = p / n
    phi = C * a ** (-e) + D * a ** (-q)
    phip = -e * C * a ** (-e - 1) - q * D * a ** (-q - 1)
    phipp = e * (e + 1) * C * a ** (-e - 2) + q * (q + 1) * D * a ** (-q - 2)
    rp = r**p
    return _Pieces(
        rp * phi,
        p * r ** (p - 1) * phi,
        s * rp * phip,
        p * (p - 1) * r ** (p - 2) * phi,
        rp * phipp,
        s * p * r ** (p - 1) * phip,
    )


def _term(r, eta, a_exp, k, G, Gp, Gpp):
    """Partials of r^a G(eta) with eta = theta r^k (theta signed)."""
    M = a_exp * G + k * eta * Gp
    val = r**a_exp * G
    dr = r ** (a_exp - 1) * M
    drr = r ** (a_exp - 2) * ((a_exp - 1) * M + k * eta * (a_exp + k) * Gp + k * k * eta * eta * Gpp)
    dth = r ** (a_exp + k) * Gp
    dthth = r ** (a_exp + 2 * k) * Gpp
    drth = r ** (a_exp + k - 1) * ((a_exp + k) * Gp + k * eta * Gpp)
    return val, dr, dth, drr, dthth, drth


def _coeffs3(params, C=None):
    n, p, q = params.n, params.p, params.q
    es = params.partition.eta_star
    C = _C(params) if C is None else C
    c3 = params.h3 / params.p3
    c1 = c3 + params.D * es ** (-q)
    c2 = C * es ** (-p / n)
    return c1, c2, c3


def _eval_s3(params, tables, r, theta_signed, C=None):
    k = params.k
    eta = theta_signed * r**k
    c1, c2, c3 = _coeffs3(params, C)
    G3 = tables.p3.evaluate(eta)
    G2 = tables.p2.evaluate(eta)
    t3 = _term(r, eta, params.p3, k, *G3)
    t2 = _term(r, eta, params.p2, k, *G2)
    p3 = params.p3
    val = c1 * t3[0] + c2 * t2[0] - c3 * r**p3
    dr = c1 * t3[1] + c2 * t2[1] - c3 * p3 * r ** (p3 - 1)
    dth = c1 * t3[2] + c2 * t2[2]
    drr = c1 * t3[3] + c2 * t2[3] - c3 * p3 * (p3 - 1) * r ** (p3 - 2)
    dthth = c1 * t3[4] + c2 * t2[4]
    drth = c1 * t3[5] + c2 * t2[5]
    return _Pieces(val, dr, dth, drr, dthth, drth)


def _scalar_value(pieces: _Pieces, region: RegionId) -> PsiValue:
    f = lambda x: float(np.asarray(x).ravel()[0])  # noqa: E731
    return PsiValue(
        f(pieces.val),
        region,
        (f(pieces.dr), f(pieces.dth)),
        (f(pieces.drr), f(pieces.dthth), f(pieces.drth)),
    )


def psi0(params: LyapunovParams, p: PolarPoint) -> PsiValue:
    tp, k = _rotate(params, p)
    pp = params.partition
    _require(p.r >= pp.r_star and abs(tp) >= pp.theta0 - _region_slack(pp.theta0), "S0", p)
    pc = _eval_s0(params, np.array([p.r]), np.array([abs(tp)]), np.array([np.sign(tp)]))
    return _scalar_value(pc, RegionId(RegionKind.S0, k))


def psi1(params: LyapunovParams, p: PolarPoint) -> PsiValue:
    tp, k = _rotate(params, p)
    pp = params.partition
    a = abs(tp)
    _require(
        p.r >= pp.r_star
        and pp.theta1 - _region_slack(pp.theta1) <= a <= pp.theta0 + _region_slack(pp.theta0),
        "S1",
        p,
    )
    a = min(max(a, pp.theta1), pp.theta0)
    pc = _eval_s1(params, np.array([p.r]), np.array([a]), np.array([np.sign(tp)]))
    return _scalar_value(pc, RegionId(RegionKind.S1, k))


def psi2(params: LyapunovParams, p: PolarPoint) -> PsiValue:
    tp, k = _rotate(params, p)
    pp = params.partition
    a = abs(tp)
    if a == 0:
        raise DomainError("psi2 is singular at theta = 0")
    lo = pp.eta_star * p.r ** (-params.k)
    _require(
        p.r >= pp.r_star and lo - _region_slack(lo) <= a <= pp.theta1 + _region_slack(pp.theta1),
        "S2",
        p,
    )
    pc = _eval_s2(params, np.array([p.r]), np.array([a]), np.array([np.sign(tp)]))
    return _scalar_value(pc, RegionId(RegionKind.S2, k))


def psi3(params: LyapunovParams, exit_tables: ExitTables, p: PolarPoint) -> PsiValue:
    _check_tables(params, exit_tables)
    tp, k = _rotate(params, p)
    pp = params.partition
    _require(p.r >= pp.r_star, "S3", p)
    eta = abs(tp) * p.r**params.k
    if eta > pp.eta_star * (1 + 1e-12):
        raise RegionError(f"point (r={p.r}, theta={p.theta}) has |eta|={eta} > eta*={pp.eta_star}")
    pc = _eval_s3(params, exit_tables, np.array([p.r]), np.array([tp]))
    return _scalar_value(pc, RegionId(RegionKind.S3, k))


# ---------------------------------------------------------------------------
# cutoff and global function


def cutoff(r, r_star: float):
    """Quintic smoothstep in log2(r / r*): (Lambda, Lambda_r, Lambda_rr)."""
    r = np.asarray(r, dtype=float)
    s = np.clip(np.log(r / r_star) / _LN2, 0.0, 1.0)
    lam = s**3 * (10 - 15 * s + 6 * s * s)
    d1 = 30 * s * s * (1 - s) ** 2
    d2 = 60 * s * (1 - s) * (1 - 2 * s)
    rl = r * _LN2
    lam_r = d1 / rl
    lam_rr = d2 / rl**2 - d1 / (r * rl)
    return lam, lam_r, lam_rr


def _local_pieces(params, tables, r, theta, kinds=None):
    """Local psi (no cutoff) and partials on arrays, using region labels."""
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    r, theta = np.broadcast_arrays(r, theta)
    kind, tp, _ = classify_arrays(params.partition, r, theta)
    if kinds is not None:
        kind = np.broadcast_to(kinds, r.shape)
    out = _empty(r.shape)
    a = np.abs(tp)
    s = np.sign(tp)
    C = _C(params)
    for kk, fn in (
        (RegionKind.S0, lambda m: _eval_s0(params, r[m], a[m], s[m])),
        (RegionKind.S1, lambda m: _eval_s1(params, r[m], a[m], s[m])),
        (RegionKind.S2, lambda m: _eval_s2(params, r[m], a[m], s[m], C)),
        (RegionKind.S3, lambda m: _eval_s3(params, tables, r[m], tp[m], C)),
    ):
        m = kind == int(kk)
        if not np.any(m):
            continue
        pc = fn(m)
        for name in ("val", "dr", "dth", "drr", "dthth", "drth"):
            getattr(out, name)[m] = getattr(pc, name)
    return out, kind


def psi_field(params: LyapunovParams, tables: ExitTables, r, theta):
    """Vectorised Psi = Lambda psi_i with its partials; returns (_Pieces, kinds).

    Points exactly on an interface take the lower-index piece; use
    :func:`psi` for the averaged value there.
    """
    _check_tables(params, tables)
    pc, kind = _local_pieces(params, tables, r, theta)
    r = np.broadcast_to(np.asarray(r, dtype=float), pc.val.shape)
    lam, lr, lrr = cutoff(r, params.partition.r_star)
    lam = np.where(kind == int(RegionKind.BALL), 0.0, lam)
    out = _Pieces(
        lam * pc.val,
        lr * pc.val + lam * pc.dr,
        lam * pc.dth,
        lrr * pc.val + 2 * lr * pc.dr + lam * pc.drr,
        lam * pc.dthth,
        lr * pc.dth + lam * pc.drth,
    )
    return out, kind


def _adjacent(params, r, a):
    """Interface on which |theta'| = a sits, as a pair of region kinds, or None."""
    pp = params.partition
    n = params.n
    if a == math.pi / n:
        return (RegionKind.S0, RegionKind.S0)
    if a == pp.theta0:
        return (RegionKind.S0, RegionKind.S1)
    if a == pp.theta1:
        return (RegionKind.S1, RegionKind.S2)
    if a * r**params.k == pp.eta_star:
        return (RegionKind.S2, RegionKind.S3)
    return None


def psi(params: LyapunovParams, tables: ExitTables, p: PolarPoint) -> PsiValue:
    """Natural extension: cutoff times the local piece, averaged on interfaces."""
    _check_tables(params, tables)
    pp = params.partition
    tp, k = _rotate(params, p)
    if p.r < pp.r_star:
        return PsiValue(0.0, RegionId(RegionKind.BALL, k), (0.0, 0.0), (0.0, 0.0, 0.0))
    lam, lr, lrr = (float(x) for x in cutoff(p.r, pp.r_star))
    pair = _adjacent(params, p.r, abs(tp))
    if pair is not None and pair[0] != pair[1]:
        vals = []
        for kk in pair:
            pc, _ = _local_pieces(params, tables, np.array([p.r]), np.array([p.theta]), kinds=int(kk))
            vals.append(float(pc.val[0]))
        return PsiValue(lam * 0.5 * (vals[0] + vals[1]), RegionId(pair[0], k))
    pc, kind = _local_pieces(params, tables, np.array([p.r]), np.array([p.theta]))
    f = lambda x: float(x[0])  # noqa: E731
    val, dr, dth = f(pc.val), f(pc.dr), f(pc.dth)
    drr, dthth, drth = f(pc.drr), f(pc.dthth), f(pc.drth)
    return PsiValue(
        lam * val,
        RegionId(RegionKind(int(kind[0])), k),
        (lr * val + lam * dr, lam * dth),
        (lrr * val + 2 * lr * dr + lam * drr, lam * dthth, lr * dth + lam * drth),
    )


# ---------------------------------------------------------------------------
# flux


class Boundary(enum.Enum):
    THETA0 = "theta0"
    THETA1 = "theta1"
    ETA = "eta"
    EDGE = "edge"


def _boundary_angle(params, boundary: Boundary, r):
    pp = params.partition
    if boundary is Boundary.THETA0:
        return np.full_like(r, pp.theta0)
    if boundary is Boundary.THETA1:
        return np.full_like(r, pp.theta1)
    if boundary is Boundary.ETA:
        return pp.eta_star * r ** (-params.k)
    return np.full_like(r, math.pi / params.n)


_OUTER_INNER = {
    Boundary.THETA0: (RegionKind.S0, RegionKind.S1),
    Boundary.THETA1: (RegionKind.S1, RegionKind.S2),
    Boundary.ETA: (RegionKind.S2, RegionKind.S3),
    Boundary.EDGE: (RegionKind.S0, RegionKind.S0),
}


def _dtheta_piece(params, tables, kind, r, a):
    """d/dtheta of the local piece of the given kind at theta = +a (one-sided)."""
    s = np.ones_like(r)
    if kind == RegionKind.S0:
        return _eval_s0(params, r, a, s).dth
    if kind == RegionKind.S1:
        return _eval_s1(params, r, a, s).dth
    if kind == RegionKind.S2:
        return _eval_s2(params, r, a, s).dth
    return _eval_s3(params, tables, r, a).dth


def check_flux(params, tables, boundary, r_samples, sign: int = 1) -> np.ndarray:
    """Jump (upper minus lower one-sided d/dtheta) of Psi across a boundary.

    ``sign`` selects the copy at +angle or -angle.  On the positive side the
    upper side is the outer region; on the negative side it is the inner
    one, and the two jumps coincide by evenness.  The cutoff factor
    Lambda(r) is included.
    """
    boundary = Boundary(boundary)
    if sign not in (1, -1):
        raise DomainError("sign must be +1 or -1")
    _check_tables(params, tables)
    r = np.atleast_1d(np.asarray(r_samples, dtype=float))
    if np.any(r < params.partition.r_star):
        raise DomainError("flux samples must satisfy r >= r*")
    if boundary is Boundary.EDGE:
        # theta = pi/n meets the rotated copy of S0; both sides are r^p
        return np.zeros_like(r)
    a = _boundary_angle(params, boundary, r)
    outer, inner = _OUTER_INNER[boundary]
    d_out = _dtheta_piece(params, tables, outer, r, a)
    d_in = _dtheta_piece(params, tables, inner, r, a)
    # at -a the one-sided derivatives flip sign and the sides swap
    jump = d_out - d_in if sign > 0 else (-d_in) - (-d_out)
    lam = cutoff(r, params.partition.r_star)[0]
    return lam * jump


def flux_report(params, tables, r_samples) -> dict:
    """All interface jumps keyed by (boundary, sign)."""
    return {
        (b, s): check_flux(params, tables, b, r_samples, s) for b in Boundary for s in (1, -1)
    }


# ---------------------------------------------------------------------------
# drift verification


class Phi(enum.Enum):
    POWER = "power"  # |z|^gamma
    PSIDELTA = "psidelta"  # Psi^(1+delta)

    @classmethod
    def parse(cls, x) -> "Phi":
        if isinstance(x, Phi):
            return x
        aliases = {"power": cls.POWER, "powergamma": cls.POWER, "psidelta": cls.PSIDELTA,
                   "psioneplusdelta": cls.PSIDELTA}
        try:
            return aliases[str(x).lower()]
        except KeyError:
            raise DomainError(f"unknown phi {x!r}; expected power or psidelta") from None


@dataclass(frozen=True)
class GridSpec:
    """Verification grid: log-spaced radii times angular strata per region."""

    n_radii: int = 200
    per_region: int = 40
    r_max_factor: float = 100.0
    fd_fraction: float = 0.01
    fd_seed: int = 0


@dataclass
class Certificate:
    success: bool
    phi: Phi
    m: float
    b: float
    r_star: float
    r_max: float
    worst_margin: dict
    violations: list
    params: LyapunovParams
    envelope: dict = field(default_factory=dict)
    fd_max_rel: float = float("nan")
    n_points: int = 0

    def to_text(self) -> str:
        lines = ["[params]"]
        lines += [f"{k} = {v!r}" for k, v in self.params.as_dict().items()]
        lines += [
            "[certificate]",
            f"success = {self.success}",
            f"phi = {self.phi.value}",
            f"m = {self.m!r}",
            f"b = {self.b!r}",
            f"r_star = {self.r_star!r}",
            f"r_max = {self.r_max!r}",
            f"n_points = {self.n_points}",
            f"fd_max_rel = {self.fd_max_rel!r}",
        ]
        for k, v in self.envelope.items():
            lines.append(f"envelope_{k} = {v!r}")
        lines.append("[worst_margin]")
        lines += [f"{k} = {v!r}" for k, v in sorted(self.worst_margin.items())]
        lines.append("[violations]")
        lines.append("r,theta,lhs,rhs")
        lines += [f"{r!r},{t!r},{lhs!r},{rhs!r}" for r, t, lhs, rhs in self.violations]
        return "\n".join(lines) + "\n"


def _centres(lo, hi, m, log=False):
    """m cell-centred points in [lo, hi]; never on the ends."""
    u = (np.arange(m) + 0.5) / m
    if log:
        return np.exp(np.log(lo) + u * (np.log(hi) - np.log(lo)))
    return lo + u * (hi - lo)


def verification_grid(params: LyapunovParams, grid: GridSpec, wedges: int = 1):
    """Radii times interior angles for each region family, both signs."""
    pp = params.partition
    n, k = params.n, params.k
    r = np.exp(np.linspace(math.log(pp.r_star), math.log(grid.r_max_factor * pp.r_star), grid.n_radii))
    # the first radius sits on the cutoff where Psi = 0; nudge inside
    r[0] *= 1 + 1e-9
    m = grid.per_region
    th_s0 = _centres(pp.theta0, math.pi / n, m)
    th_s1 = _centres(pp.theta1, pp.theta0, m)
    eta_s3 = _centres(0.0, pp.eta_star, m)
    R, T = [], []
    for ri in r:
        lo2 = pp.eta_star * ri ** (-k)
        th = np.concatenate([th_s0, th_s1, _centres(lo2, pp.theta1, m, log=True), eta_s3 * ri ** (-k)])
        th = np.concatenate([th, -th])
        R.append(np.full(th.size, ri))
        T.append(th)
    R = np.concatenate(R)
    T = np.concatenate(T)
    if wedges > 1:
        R = np.tile(R, wedges)
        T = np.concatenate([T + 2 * math.pi * j / n for j in range(wedges)])
        T = np.mod(T + math.pi, 2 * math.pi) - math.pi
    return R, T


def _fd_check(spec, params, tables, R, T, L_closed, grid):
    """Relative gap between closed-form and finite-difference generator values."""
    rng = np.random.default_rng(grid.fd_seed)
    # keep the stencils off the two radii where the cutoff is only C^2
    s = np.log2(R / params.partition.r_star)
    ok = np.flatnonzero((np.abs(s) > 0.01) & (np.abs(s - 1) > 0.01))
    n_pick = min(ok.size, max(1, int(round(grid.fd_fraction * R.size))))
    idx = np.sort(rng.choice(ok, size=n_pick, replace=False))
    r, t = R[idx], T[idx]
    # steps of a few tenths of a percent: fine enough for the smooth pieces,
    # coarse enough to average the cubic table interpolant in S3
    hr = 3e-3 * r
    ht = 3e-3 * _angular_room(params, r, t)

    def val(rr, tt):
        return psi_field(params, tables, rr, tt)[0].val

    f0 = val(r, t)
    fr = [val(r + j * hr, t) for j in (-2, -1, 1, 2)]
    ft = [val(r, t + j * ht) for j in (-2, -1, 1, 2)]
    d1 = lambda f, h: (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h)  # noqa: E731
    d2 = lambda f, h: (-f[0] + 16 * f[1] - 30 * f0 + 16 * f[2] - f[3]) / (12 * h * h)  # noqa: E731
    L_fd = generator_values(spec, r, t, d1(fr, hr), d1(ft, ht), d2(fr, hr), d2(ft, ht))
    pc, _ = psi_field(params, tables, r, t)
    # compare on the scale of the individual generator terms to avoid
    # dividing by a cancelling sum
    drr_, dth_ = _polar_drift_abs(spec, r, t)
    s2 = 0.5 * spec.sigma**2
    scale = (
        drr_ * np.abs(pc.dr)
        + dth_ * np.abs(pc.dth)
        + s2 * (np.abs(pc.drr) + np.abs(pc.dr) / r + np.abs(pc.dthth) / r**2)
    )
    return float(np.max(np.abs(L_fd - L_closed[idx]) / scale))


def _polar_drift_abs(spec, r, t):
    from .model import _polar_drift_arrays

    a, b = _polar_drift_arrays(spec, r, t)
    return np.abs(a), np.abs(b)


def _angular_room(params, r, t):
    """Distance in theta from each point to the nearest interface."""
    pp = params.partition
    tp, _ = wedge_rotate(t, params.n)
    a = np.abs(tp)
    cuts = np.stack(
        [
            np.full_like(a, math.pi / params.n),
            np.full_like(a, pp.theta0),
            np.full_like(a, pp.theta1),
            pp.eta_star * r ** (-params.k),
        ]
    )
    return np.min(np.abs(cuts - a), axis=0)


def _envelope(params, R, val):
    p, n = params.p, params.n
    pp = params.partition
    outer = R >= 2 * pp.r_star
    if not np.any(outer):
        return {}
    radii = np.unique(R[outer])
    lo = np.array([np.min(val[R == ri] / ri**p) for ri in radii])
    hi = np.array([np.max(val[R == ri] / ri ** (p + n / 2 + 1)) for ri in radii])
    return {
        "c": float(lo.min()),
        "d": float(hi.max()),
        # the lower ratio must not sink and the upper must not climb with r
        "c_trend_ok": bool(lo[-1] >= 0.5 * lo[0]),
        "d_trend_ok": bool(hi[-1] <= 2.0 * hi[0]),
    }


def verify_drift(
    spec: SystemSpec,
    params: LyapunovParams,
    tables: ExitTables,
    grid_spec: GridSpec | None = None,
    phi: Phi | str = Phi.POWER,
    raise_on_failure: bool = False,
    fd_check: bool = True,
) -> Certificate:
    """Check L Psi <= -m Phi + b on a grid over r in [r*, R_max].

    m is the smallest value of -L Psi / Phi where the cutoff is inactive
    (r >= 2 r*), so success means L Psi < 0 there; b is then the least
    constant making the inequality hold on the whole grid.
    """
    if spec.n != params.n:
        raise DomainError(f"system has n={spec.n} but parameters were built for n={params.n}")
    phi = Phi.parse(phi)
    grid = grid_spec or GridSpec()
    wedges = params.n if not spec.is_monomial else 1
    R, T = verification_grid(params, grid, wedges)
    pc, kind = psi_field(params, tables, R, T)
    L = generator_values(spec, R, T, pc.dr, pc.dth, pc.drr, pc.dthth)
    Phi_v = R**params.gamma if phi is Phi.POWER else pc.val ** (1 + params.delta)
    outer = R >= 2 * params.partition.r_star
    ratio = -L[outer] / Phi_v[outer]
    m = float(np.min(ratio))
    b = float(max(0.0, np.max(L + max(m, 0.0) * Phi_v)))
    worst = {}
    for kk in (RegionKind.S0, RegionKind.S1, RegionKind.S2, RegionKind.S3):
        sel = kind[outer] == int(kk)
        if np.any(sel):
            worst[kk.name] = float(np.min(ratio[sel]))
    bad = np.flatnonzero(outer & (L >= 0))
    order = np.lexsort((T[bad], R[bad]))
    violations = [
        (float(R[i]), float(T[i]), float(L[i]), float(-max(m, 0.0) * Phi_v[i] + b)) for i in bad[order]
    ]
    fd = _fd_check(spec, params, tables, R, T, L, grid) if fd_check else float("nan")
    cert = Certificate(
        success=bool(m > 0 and not violations),
        phi=phi,
        m=m,
        b=b,
        r_star=params.partition.r_star,
        r_max=float(R.max()),
        worst_margin=worst,
        violations=violations,
        params=params,
        envelope=_envelope(params, R, pc.val),
        fd_max_rel=fd,
        n_points=int(R.size),
    )
    if raise_on_failure and not cert.success:
        raise VerificationFailure(
            f"drift inequality fails at {len(violations)} grid points (m={m:.3g})", cert
        )
    return cert


# ---------------------------------------------------------------------------
# parameter search


def _make_params(n, gamma, q, delta, h1, h2, h3, theta0, theta1, eta_star, r_star):
    p, q, p2, p3 = _base_exponents(n, gamma, q)
    part = PartitionParams(theta0, theta1, eta_star, r_star, n)
    return LyapunovParams(gamma, p, q, p2, p3, delta, h1, h2, h3, part)


_OVERRIDES = {"q", "theta0", "h1", "h2", "delta", "theta1", "eta_star", "r_star", "h3"}


def _flux_ok(params, tables, r_samples) -> bool:
    return all(np.all(j <= 0) for j in flux_report(params, tables, r_samples).values())


def search_params(
    n: int,
    gamma: float,
    seed_choices: dict | None = None,
    sigma: float = 1.0,
    spec: SystemSpec | None = None,
    grid_spec: GridSpec | None = None,
    max_theta1_halvings: int = 6,
    max_eta_doublings: int = 4,
    max_r_doublings: int = 4,
    max_h3_halvings: int = 40,
):
    """Deterministic search for (theta1, eta*, r*, h3).

    theta1 is halved from pi/(4n); for each, eta* doubles from 8; for each,
    r* doubles from twice (eta*/theta1)^(2/(n+2)); for each, h3 halves from
    h2 until the flux checks pass, and then the drift check decides.  The
    first candidate passing both wins.  Returns (params, certificate, trace).
    """
    seed = dict(seed_choices or {})
    unknown = set(seed) - _OVERRIDES
    if unknown:
        raise DomainError(f"unknown parameter overrides: {sorted(unknown)}")
    p, q, p2, p3 = _base_exponents(n, gamma, seed.get("q"))
    spec = spec or SystemSpec.monomial(n, sigma)
    if spec.n != n:
        raise DomainError("spec.n does not match n")
    theta0 = seed.get("theta0", 3 * math.pi / (4 * n))
    h1 = seed.get("h1", 0.5 * p * theta0**q * abs(math.cos(n * theta0)))
    h2 = seed.get("h2", h1 / 2)
    delta = seed.get("delta", n / (2 * p3))
    grid = grid_spec or GridSpec()
    th1_list = [seed["theta1"]] if "theta1" in seed else [
        math.pi / (4 * n) / 2**i for i in range(max_theta1_halvings + 1)
    ]
    eta_list = [seed["eta_star"]] if "eta_star" in seed else [8.0 * 2**i for i in range(max_eta_doublings + 1)]
    trace = []
    tables_cache: dict[float, ExitTables] = {}
    for th1 in th1_list:
        for es in eta_list:
            base = 2.0 * _r_star_floor(n, th1, es)
            r_list = [seed["r_star"]] if "r_star" in seed else [base * 2**i for i in range(max_r_doublings + 1)]
            h3_list = [seed["h3"]] if "h3" in seed else [h2 / 2**i for i in range(max_h3_halvings + 1)]
            for rs in r_list:
                for h3 in h3_list:
                    params = _make_params(n, gamma, q, delta, h1, h2, h3, theta0, th1, es, rs)
                    if es not in tables_cache:
                        tables_cache[es] = build_tables(params, spec.sigma)
                    tables = tables_cache[es]
                    r_flux = rs * np.geomspace(1.0, grid.r_max_factor, 50)
                    if not _flux_ok(params, tables, r_flux):
                        trace.append((th1, es, rs, h3, "flux"))
                        continue
                    cert = verify_drift(spec, params, tables, grid, Phi.POWER, fd_check=False)
                    cert2 = verify_drift(spec, params, tables, grid, Phi.PSIDELTA, fd_check=False) \
                        if cert.success else None
                    if cert.success and cert2.success:
                        trace.append((th1, es, rs, h3, "ok"))
                        return params, cert, trace
                    trace.append((th1, es, rs, h3, "drift"))
                    # smaller h3 only weakens the S3 decay
                    break
    raise VerificationFailure(
        f"no admissible parameters for n={n}, gamma={gamma} after {len(trace)} candidates",
        trace,
    )


def derive_params(
    n: int,
    gamma: float,
    seed_choices: dict | None = None,
    sigma: float = 1.0,
    search: bool = True,
    spec: SystemSpec | None = None,
    grid_spec: GridSpec | None = None,
) -> LyapunovParams:
    """Parameters for the construction, searching the free ones by default.

    With ``search=False`` the free parameters take their starting values
    (or the overrides) without verification; this also allows building
    deliberately inadmissible parameters, e.g. h2 > h1, for negative tests.
    """
    if search:
        return search_params(n, gamma, seed_choices, sigma, spec, grid_spec)[0]
    seed = dict(seed_choices or {})
    unknown = set(seed) - _OVERRIDES
    if unknown:
        raise DomainError(f"unknown parameter overrides: {sorted(unknown)}")
    p, q, p2, p3 = _base_exponents(n, gamma, seed.get("q"))
    theta0 = seed.get("theta0", 3 * math.pi / (4 * n))
    h1 = seed.get("h1", 0.5 * p * theta0**q * abs(math.cos(n * theta0)))
    h2 = seed.get("h2", h1 / 2)
    delta = seed.get("delta", n / (2 * p3))
    th1 = seed.get("theta1", math.pi / (4 * n))
    es = seed.get("eta_star", 8.0)
    rs = seed.get("r_star", 2.0 * _r_star_floor(n, th1, es))
    h3 = seed.get("h3", 0.5 * h2 * es ** (-q))
    return _make_params(n, gamma, q, delta, h1, h2, h3, theta0, th1, es, rs)


def with_overrides(params: LyapunovParams, **kw) -> LyapunovParams:
    """Copy of params with scalar fields replaced (partition fields by name)."""
    part_keys = {"theta0", "theta1", "eta_star", "r_star"}
    pk = {k: kw.pop(k) for k in list(kw) if k in part_keys}
    part = replace(params.partition, **pk) if pk else params.partition
    return replace(params, partition=part, **kw)
