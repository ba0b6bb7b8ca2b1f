"""The SDE dz = (z^{n+1} + F(z, zbar)) dt + sigma dB and its polar machinery.

Angles are kept in (-pi, pi].  The far field splits into ``n`` wedges of
opening ``2*pi/n`` centred on the explosive rays ``theta = 2*pi*k/n``; all
region logic works in the principal wedge after rotating by the nearest
explosive ray.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, DomainError

__all__ = [
    "SystemSpec",
    "PolarPoint",
    "PartitionParams",
    "RegionKind",
    "RegionId",
    "Partials",
    "Asymptotic",
    "to_polar",
    "to_cartesian",
    "drift",
    "polar_drift",
    "apply_generator",
    "generator_values",
    "apply_asymptotic",
    "wedge_rotate",
    "classify",
    "orbit_K",
    "blowup_time_monomial",
    "dumps_spec",
    "loads_spec",
]


def _wrap_angle(theta):
    """Map angles into (-pi, pi]."""
    w = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class SystemSpec:
    """Drift degree ``n``, lower-order polynomial ``F`` and noise level.

    ``f_coeffs`` maps a monomial ``(j, k)`` to the coefficient of
    ``z**j * conj(z)**k``.  The leading coefficient is normalised to one.
    """

    n: int
    sigma: float = 1.0
    f_coeffs: tuple = field(default=())

    def __init__(self, n: int, sigma: float = 1.0, f_coeffs: Mapping | tuple | None = None):
        if isinstance(n, bool) or int(n) != n or n < 1:
            raise ConfigError(f"n must be a positive integer, got {n!r}")
        sigma = float(sigma)
        if not math.isfinite(sigma) or sigma < 0:
            raise ConfigError(f"sigma must be finite and nonnegative, got {sigma!r}")
        items = f_coeffs.items() if isinstance(f_coeffs, Mapping) else (f_coeffs or ())
        merged: dict[tuple[int, int], complex] = {}
        for key, c in items:
            j, k = (int(key[0]), int(key[1]))
            if j < 0 or k < 0:
                raise ConfigError(f"monomial exponents must be nonnegative: {(j, k)}")
            if j + k > n:
                raise ConfigError(f"monomial z^{j} zbar^{k} has degree {j + k} > n = {n}")
            c = complex(c)
            if not (math.isfinite(c.real) and math.isfinite(c.imag)):
                raise ConfigError(f"coefficient of {(j, k)} is not finite")
            merged[(j, k)] = merged.get((j, k), 0j) + c
        coeffs = tuple(sorted((jk, c) for jk, c in merged.items() if c != 0))
        object.__setattr__(self, "n", int(n))
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "f_coeffs", coeffs)

    @classmethod
    def monomial(cls, n: int, sigma: float = 1.0) -> "SystemSpec":
        return cls(n, sigma)

    @property
    def coeff_dict(self) -> dict:
        return dict(self.f_coeffs)

    @property
    def is_monomial(self) -> bool:
        return not self.f_coeffs

    @property
    def assumption_5_1_satisfied(self) -> bool:
        """True iff F is constant or has degree at most floor(n/2) - 1."""
        degrees = [j + k for (j, k), _ in self.f_coeffs]
        if all(d == 0 for d in degrees):
            return True
        return max(degrees) <= self.n // 2 - 1

    def coeff_arrays(self):
        """(j, k, c) arrays for the compiled kernels."""
        j = np.array([jk[0] for jk, _ in self.f_coeffs], dtype=np.int64)
        k = np.array([jk[1] for jk, _ in self.f_coeffs], dtype=np.int64)
        c = np.array([c for _, c in self.f_coeffs], dtype=np.complex128)
        return j, k, c


@dataclass(frozen=True)
class PolarPoint:
    r: float
    theta: float

    def __post_init__(self):
        if self.r < 0 or not math.isfinite(self.r):
            raise DomainError(f"radius must be finite and nonnegative, got {self.r}")


@dataclass(frozen=True)
class PartitionParams:
    """Angles and radii cutting the principal wedge into S0..S3."""

    theta0: float
    theta1: float
    eta_star: float
    r_star: float
    n: int

    def __post_init__(self):
        n = self.n
        if not (math.pi / (2 * n) < self.theta0 < math.pi / n):
            raise DomainError(f"theta0 must lie in (pi/2n, pi/n), got {self.theta0}")
        if not (0 < self.theta1 < self.theta0):
            raise DomainError(f"theta1 must lie in (0, theta0), got {self.theta1}")
        if self.eta_star <= 0 or self.r_star <= 0:
            raise DomainError("eta_star and r_star must be positive")
        if self.eta_star * self.r_star ** (-(n + 2) / 2) >= self.theta1:
            raise DomainError(
                "r_star too small: eta_star * r_star^(-(n+2)/2) must be below theta1"
            )


class RegionKind(enum.IntEnum):
    BALL = 0
    S0 = 1
    S1 = 2
    S2 = 3
    S3 = 4


@dataclass(frozen=True)
class RegionId:
    kind: RegionKind
    wedge_index: int


@dataclass(frozen=True)
class Partials:
    """Value and polar partial derivatives of a scalar field at one point."""

    value: float = 0.0
    dr: float = 0.0
    dtheta: float = 0.0
    drr: float = 0.0
    dthth: float = 0.0
    drth: float = 0.0


class Asymptotic(enum.Enum):
    T1 = "T1"
    T2 = "T2"
    A = "A"


def to_polar(z: complex) -> PolarPoint:
    z = complex(z)
    r = abs(z)
    if r == 0.0:
        return PolarPoint(0.0, 0.0)
    return PolarPoint(r, _wrap_angle(math.atan2(z.imag, z.real)))


def to_cartesian(p: PolarPoint) -> complex:
    return complex(p.r * math.cos(p.theta), p.r * math.sin(p.theta))


def drift(spec: SystemSpec, z):
    """Full drift z^{n+1} + F(z, zbar); accepts scalars or arrays."""
    z = np.asarray(z, dtype=complex)
    out = z ** (spec.n + 1)
    if spec.f_coeffs:
        zb = np.conj(z)
        for (j, k), c in spec.f_coeffs:
            out = out + c * z**j * zb**k
    return complex(out) if out.ndim == 0 else out


def _polar_drift_arrays(spec, r, theta):
    z = r * np.exp(1j * theta)
    rot = drift(spec, z) * np.exp(-1j * theta)
    return np.real(rot), np.imag(rot) / r


def polar_drift(spec: SystemSpec, p: PolarPoint) -> tuple[float, float]:
    """Drift of (r, theta): (Re(b e^{-i theta}), Im(b e^{-i theta}) / r)."""
    if p.r == 0:
        raise DomainError("polar drift is undefined at the origin")
    dr, dth = _polar_drift_arrays(spec, p.r, p.theta)
    return float(dr), float(dth)


def generator_values(spec, r, theta, f_r, f_th, f_rr, f_thth, time_changed=False):
    """Vectorised generator in polar coordinates.

    Includes the Ito term sigma^2/(2r) d_r coming from the polar Laplacian.
    """
    r = np.asarray(r, dtype=float)
    dr, dth = _polar_drift_arrays(spec, r, np.asarray(theta, dtype=float))
    s2 = 0.5 * spec.sigma**2
    out = dr * f_r + dth * f_th + s2 * (f_rr + f_r / r + f_thth / r**2)
    if time_changed:
        out = out / r**spec.n
    return out


def apply_generator(spec: SystemSpec, f: Partials, p: PolarPoint, time_changed: bool = False) -> float:
    """(Lf)(p) for the process generator, or r^{-n} (Lf)(p) on the slow clock."""
    if p.r == 0:
        raise DomainError("generator in polar form is undefined at the origin")
    return float(
        generator_values(spec, p.r, p.theta, f.dr, f.dtheta, f.drr, f.dthth, time_changed)
    )


def apply_asymptotic(op: Asymptotic | str, f: Partials, p: PolarPoint, spec: SystemSpec) -> float:
    if p.r == 0:
        raise DomainError("asymptotic operators are undefined at the origin")
    op = Asymptotic(op)
    n, r, th = spec.n, p.r, p.theta
    if op is Asymptotic.T1:
        return r * math.cos(n * th) * f.dr + math.sin(n * th) * f.dtheta
    val = r * f.dr + n * th * f.dtheta
    if op is Asymptotic.A:
        val += spec.sigma**2 / (2 * r ** (n + 2)) * f.dthth
    return val


def wedge_rotate(theta, n: int):
    """Rotate by the nearest explosive ray; returns (theta', k) with |theta'| <= pi/n."""
    theta = np.asarray(theta, dtype=float)
    k = np.floor(theta * n / (2 * np.pi) + 0.5)
    tp = theta - 2 * np.pi * k / n
    # floating drift can push |theta'| a hair beyond pi/n
    tp = np.clip(tp, -np.pi / n, np.pi / n)
    k = np.mod(k, n).astype(np.int64)
    if tp.ndim == 0:
        return float(tp), int(k)
    return tp, k


def classify_arrays(params: PartitionParams, r, theta):
    """Vectorised region labels (RegionKind values) and wedge indices."""
    n = params.n
    r = np.asarray(r, dtype=float)
    tp, k = wedge_rotate(theta, n)
    a = np.abs(tp)
    eta = a * r ** ((n + 2) / 2)
    kind = np.full(np.broadcast(r, a).shape, int(RegionKind.S3), dtype=np.int64)
    # ties go to the lower index: test from S0 downward
    kind = np.where(eta >= params.eta_star, int(RegionKind.S2), kind)
    kind = np.where(a >= params.theta1, int(RegionKind.S1), kind)
    kind = np.where(a >= params.theta0, int(RegionKind.S0), kind)
    kind = np.where(r < params.r_star, int(RegionKind.BALL), kind)
    return kind, tp, k


def classify(params: PartitionParams, p: PolarPoint, n: int | None = None) -> RegionId:
    if n is not None and n != params.n:
        raise DomainError(f"partition was built for n={params.n}, got n={n}")
    kind, _, k = classify_arrays(params, p.r, p.theta)
    return RegionId(RegionKind(int(kind)), int(k))


def orbit_K(p: PolarPoint, n: int) -> float:
    """Maximal radius of the deterministic orbit r = K |sin(n theta)|^{1/n} through p."""
    if p.theta == 0 or abs(p.theta) >= math.pi / n:
        raise DomainError(f"orbit parameter needs 0 < |theta| < pi/n, got {p.theta}")
    return p.r / abs(math.sin(n * p.theta)) ** (1.0 / n)


def blowup_time_monomial(r0: float, n: int) -> float:
    """Explosion time of r' = r^{n+1} started at r0 > 0."""
    if r0 <= 0:
        raise DomainError("r0 must be positive")
    return 1.0 / (n * r0**n)


def dumps_spec(spec: SystemSpec) -> str:
    lines = [f"n = {spec.n}", f"sigma = {spec.sigma!r}"]
    for (j, k), c in spec.f_coeffs:
        lines.append(f"coeff = {j} {k} {c.real!r} {c.imag!r}")
    return "\n".join(lines) + "\n"


def loads_spec(text: str) -> SystemSpec:
    n = sigma = None
    coeffs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        try:
            if key == "n":
                n = int(value)
            elif key == "sigma":
                sigma = float(value)
            elif key == "coeff":
                j, k, re_, im_ = value.split()
                coeffs.append(((int(j), int(k)), complex(float(re_), float(im_))))
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: cannot parse {raw!r}: {exc}") from None
    if n is None:
        raise ConfigError("missing required key 'n'")
    return SystemSpec(n, 1.0 if sigma is None else sigma, coeffs)
