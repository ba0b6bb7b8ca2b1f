"""Adaptive Euler-Maruyama integration of dz = (z^{n+1} + F) dt + sigma dB.

Randomness comes from Philox streams keyed by SeedSequence, so that each
trajectory of an ensemble owns the substream ``(master_seed, index)`` and
results do not depend on scheduling.  Normals are drawn in blocks in numpy
and consumed in order by the compiled kernels.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

import numpy as np

from . import _kernels as K
from .errors import ConfigError, DomainError, PolystabError
from .model import PolarPoint, SystemSpec

__all__ = [
    "Mode",
    "IntegratorConfig",
    "Event",
    "Trajectory",
    "make_rng",
    "substream",
    "integrate",
    "integrate_timechanged",
    "run_ensemble",
    "terminal_states",
    "SpikeScan",
    "scan_spikes",
    "StationarySamples",
    "sample_stationary",
    "WedgeExits",
    "wedge_exits",
]

BLOCK = 1 << 16


class Mode(enum.Enum):
    CARTESIAN = "cartesian"
    TIME_CHANGED_POLAR = "timechanged"
    DETERMINISTIC_CARTESIAN = "deterministic"


@dataclass(frozen=True)
class IntegratorConfig:
    """Step control and stopping rules.

    ``t_max`` is measured on the slow clock in time-changed mode.  ``thin``
    keeps every thin-th step; stopping events are always kept.  ``r_min``
    is the radius below which the slow clock rate max(r, r_min)^n is frozen.
    """

    dt_base: float = 1e-2
    drift_cap_eps: float = 0.05
    r_cap: float = 1e6
    t_max: float = 1.0
    mode: Mode = Mode.CARTESIAN
    thin: int = 1
    r_min: float = 1e-3

    def __post_init__(self):
        for name in ("dt_base", "drift_cap_eps", "r_cap", "t_max", "r_min"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a finite positive number, got {v!r}")
        if int(self.thin) != self.thin or self.thin < 1:
            raise ConfigError(f"thin must be a positive integer, got {self.thin!r}")
        object.__setattr__(self, "mode", Mode(self.mode))

    def check_partition(self, r_star: float) -> None:
        if not self.r_cap > 10 * r_star:
            raise ConfigError(f"r_cap={self.r_cap} must exceed 10 r* = {10 * r_star}")


@dataclass(frozen=True)
class Event:
    kind: str  # "CapHit", "Blowup" or "Floor"
    t: float


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # complex, or (r, theta) rows in time-changed mode
    events: list = field(default_factory=list)
    physical_time: np.ndarray | None = None
    floor_hits: int = 0
    steps: int = 0

    @property
    def capped(self) -> bool:
        return any(e.kind == "CapHit" for e in self.events)

    def radii(self) -> np.ndarray:
        if np.iscomplexobj(self.states):
            return np.abs(self.states)
        return self.states[:, 0]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            if np.iscomplexobj(self.states):
                fh.write("t,re,im\n")
                data = np.column_stack([self.times, self.states.real, self.states.imag])
            else:
                fh.write("t,r,theta,t_physical\n")
                data = np.column_stack([self.times, self.states[:, 0], self.states[:, 1], self.physical_time])
            np.savetxt(fh, data, delimiter=",", fmt="%.17g")
            for e in self.events:
                fh.write(f"# event,{e.kind},{e.t!r}\n")


def substream(master_seed, index: int) -> np.random.SeedSequence:
    """Counter-style child stream ``(master_seed, index)``."""
    if isinstance(master_seed, np.random.SeedSequence):
        return np.random.SeedSequence(master_seed.entropy, spawn_key=tuple(master_seed.spawn_key) + (int(index),))
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.Philox(seed))


def _check_z0(z0):
    z0 = complex(z0)
    if not (math.isfinite(z0.real) and math.isfinite(z0.imag)):
        raise ConfigError(f"initial condition must be finite, got {z0!r}")
    return z0


def _grow(arrs, n_keep):
    return [np.concatenate([a[:n_keep], np.empty_like(a)]) for a in arrs]


def integrate(spec: SystemSpec, z0, cfg: IntegratorConfig, seed=0) -> Trajectory:
    """Adaptive Euler-Maruyama on the physical clock.

    dt = min(dt_base, eps / |drift|) so the drift displaces z by at most
    eps per step.  The trajectory starts with z0 and ends at t_max or at the
    first step with |z| >= r_cap (a CapHit event).  In deterministic mode a
    Blowup event estimates the explosion time by t + 1/(n |z|^n), the
    remaining time of r' = r^{n+1}.
    """
    z0 = _check_z0(z0)
    if cfg.mode is Mode.TIME_CHANGED_POLAR:
        return integrate_timechanged(spec, PolarPoint(abs(z0), math.atan2(z0.imag, z0.real)), cfg, seed)
    cj, ck, cc = spec.coeff_arrays()
    cap = 4096
    out_t = np.empty(cap)
    out_s = np.empty(cap)
    out_z = np.empty(cap, dtype=complex)
    out_t[0], out_s[0], out_z[0] = 0.0, 0.0, z0
    n_out = 1
    z, t, s, steps, floor_hits = z0, 0.0, 0.0, 0, 0
    events = []
    deterministic = cfg.mode is Mode.DETERMINISTIC_CARTESIAN or spec.sigma == 0.0
    rng = None if deterministic else make_rng(seed)
    while True:
        if deterministic:
            z, t, status, n_out, steps = K.deterministic_path(
                z, t, spec.n, cj, ck, cc, cfg.dt_base, cfg.drift_cap_eps, cfg.r_cap, cfg.t_max,
                cfg.thin, steps, out_t, out_z, n_out,
            )
        else:
            noise = rng.standard_normal((BLOCK, 2))
            z, t, s, _, status, n_out, steps, floor_hits = K.em_path(
                z, t, s, spec.n, cj, ck, cc, spec.sigma, cfg.dt_base, cfg.drift_cap_eps, cfg.r_cap,
                cfg.t_max, False, 1.0, noise, cfg.thin, steps, out_t, out_s, out_z, n_out, floor_hits,
            )
        if status == K.BUFFER_FULL:
            out_t, out_s, out_z = _grow([out_t, out_s, out_z], n_out)
            continue
        if status == K.CAPPED:
            events.append(Event("CapHit", t))
            if deterministic:
                events.append(Event("Blowup", t + 1.0 / (spec.n * abs(z) ** spec.n)))
            break
        if status == K.DONE:
            break
    if out_t[n_out - 1] != t:
        out_t[n_out], out_z[n_out] = t, z
        n_out += 1
    return Trajectory(out_t[:n_out].copy(), out_z[:n_out].copy(), events, steps=steps)


def integrate_timechanged(spec: SystemSpec, p0: PolarPoint, cfg: IntegratorConfig, seed=0) -> Trajectory:
    """Dynamics on the slow clock s with ds = max(r, r_min)^n dt.

    On this clock the drift is b / r^n, so the far field moves at a rate
    linear in r.  The step is chosen on the slow clock
    (ds = min(dt_base, eps r^n / |b|)) and mapped to physical time; the state is advanced in Cartesian form,
    which sidesteps the coordinate singularity at the origin.  Below r_min
    the clock rate is frozen and each such step counts as a floor hit (one
    Floor event is recorded at the first).  States are returned in polar
    form together with the physical time.
    """
    if not p0.r > 0:
        raise DomainError("time-changed integration needs p0.r > 0")
    z0 = _check_z0(complex(p0.r * math.cos(p0.theta), p0.r * math.sin(p0.theta)))
    if spec.sigma == 0.0:
        rng_noise = None
    else:
        rng_noise = make_rng(seed)
    cj, ck, cc = spec.coeff_arrays()
    cap = 4096
    out_t = np.empty(cap)
    out_s = np.empty(cap)
    out_z = np.empty(cap, dtype=complex)
    out_t[0], out_s[0], out_z[0] = 0.0, 0.0, z0
    n_out = 1
    z, t, s, steps, floor_hits = z0, 0.0, 0.0, 0, 0
    events = []
    while True:
        noise = np.zeros((BLOCK, 2)) if rng_noise is None else rng_noise.standard_normal((BLOCK, 2))
        z, t, s, _, status, n_out, steps, floor_hits = K.em_path(
            z, t, s, spec.n, cj, ck, cc, spec.sigma, cfg.dt_base, cfg.drift_cap_eps, cfg.r_cap,
            cfg.t_max, True, cfg.r_min, noise, cfg.thin, steps, out_t, out_s, out_z, n_out, floor_hits,
        )
        if status == K.BUFFER_FULL:
            out_t, out_s, out_z = _grow([out_t, out_s, out_z], n_out)
            continue
        if status == K.CAPPED:
            events.append(Event("CapHit", s))
            break
        if status == K.DONE:
            break
    if out_s[n_out - 1] != s:
        out_t[n_out], out_s[n_out], out_z[n_out] = t, s, z
        n_out += 1
    if floor_hits:
        events.insert(0, Event("Floor", float("nan")))
    zz = out_z[:n_out]
    states = np.column_stack([np.abs(zz), np.angle(zz)])
    return Trajectory(out_s[:n_out].copy(), states, events, out_t[:n_out].copy(), floor_hits, steps)


class Sink(Protocol):
    def add(self, index: int, result: Any) -> None: ...

    def summary(self) -> Any: ...


class CollectSink:
    """Keeps every per-trajectory result in index order."""

    def __init__(self):
        self.results: dict[int, Any] = {}

    def add(self, index, result):
        self.results[index] = result

    def summary(self):
        return [self.results[i] for i in sorted(self.results)]


@dataclass
class TrajectoryError:
    index: int
    error: PolystabError


def run_ensemble(
    spec: SystemSpec,
    cfg: IntegratorConfig,
    n_traj: int,
    master_seed: int,
    sink: Sink | None = None,
    z0=0j,
    workers: int = 1,
    task: Callable | None = None,
):
    """Run ``n_traj`` independent trajectories and feed results to ``sink``.

    Trajectory i uses substream(master_seed, i).  ``task(spec, cfg, z0, seq)``
    computes the per-trajectory result (default: the integrated trajectory).
    Results reach the sink in index order whatever the worker count, and a
    package error in one trajectory is passed on as a TrajectoryError.
    """
    if n_traj < 1:
        raise ConfigError("n_traj must be at least 1")
    if task is None:
        task = lambda sp, c, z, seq: integrate(sp, z, c, seq)  # noqa: E731
    sink = sink or CollectSink()

    def one(i):
        try:
            return task(spec, cfg, z0, substream(master_seed, i))
        except PolystabError as exc:
            return TrajectoryError(i, exc)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(n_traj)))
    else:
        results = [one(i) for i in range(n_traj)]
    for i, res in enumerate(results):
        sink.add(i, res)
    return sink.summary()


def terminal_states(
    spec: SystemSpec, cfg: IntegratorConfig, n_paths: int, master_seed=0, z0=0j, workers: int = 1
) -> np.ndarray:
    """z(t_max) for ``n_paths`` independent plain-clock paths.

    Path i uses substream(master_seed, i) and draws its normals in blocks
    sized to the expected step count.  Paths that reach r_cap are returned
    as complex infinity.
    """
    if n_paths < 1:
        raise ConfigError("n_paths must be at least 1")
    z0 = _check_z0(z0)
    cj, ck, cc = spec.coeff_arrays()
    block = int(cfg.t_max / cfg.dt_base) + 64
    out = np.empty(n_paths, dtype=complex)

    def one(i):
        rng = make_rng(substream(master_seed, i))
        buf_t, buf_s, buf_z = np.empty(1), np.empty(1), np.empty(1, dtype=complex)
        z, t, s, steps = z0, 0.0, 0.0, 0
        thin = 1 << 62
        while True:
            noise = rng.standard_normal((block, 2))
            z, t, s, _, status, _, steps, _ = K.em_path(
                z, t, s, spec.n, cj, ck, cc, spec.sigma, cfg.dt_base, cfg.drift_cap_eps, cfg.r_cap,
                cfg.t_max, False, 1.0, noise, thin, steps, buf_t, buf_s, buf_z, 0, 0,
            )
            if status == K.CAPPED:
                out[i] = complex(math.inf, 0.0)
                return
            if status == K.DONE:
                out[i] = z
                return

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, range(n_paths)))
    else:
        for i in range(n_paths):
            one(i)
    return out


# ---------------------------------------------------------------------------
# streaming drivers for long runs


@dataclass
class SpikeScan:
    levels: np.ndarray
    r_low: float
    gaps_t: list  # one array per level
    gaps_s: list
    t_total: float
    capped: bool


def scan_spikes(
    spec: SystemSpec,
    levels,
    r_low: float,
    t_end: float,
    seed=0,
    dt_base: float = 1e-2,
    eps: float = 0.05,
    r_cap: float = 1e8,
    r_clock: float = 1.0,
    z0=0j,
    max_gaps: int = 1 << 20,
) -> SpikeScan:
    """Gaps between successive up-crossings of each level R on one long path.

    An up-crossing of R counts only after the path has returned below r_low.
    Gaps are recorded on the physical clock and on the slow clock of the same
    path.
    """
    levels = np.sort(np.asarray(levels, dtype=float))
    if np.any(levels <= 2 * r_low):
        raise DomainError("every level must exceed 2 r_low")
    cj, ck, cc = spec.coeff_arrays()
    L = levels.size
    cap = 1024
    phase = np.zeros(L, dtype=np.int64)
    # start as if below r_low so the first up-crossing opens the record
    last_t = -np.ones(L)
    last_s = -np.ones(L)
    gaps_t = np.empty((L, cap))
    gaps_s = np.empty((L, cap))
    counts = np.zeros(L, dtype=np.int64)
    rng = make_rng(seed)
    z, t, s = _check_z0(z0), 0.0, 0.0
    capped = False
    while True:
        noise = rng.standard_normal((BLOCK, 2))
        z, t, s, _, status = K.spike_scan(
            z, t, s, spec.n, cj, ck, cc, spec.sigma, dt_base, eps, r_cap, t_end, r_clock, r_low,
            levels, phase, last_t, last_s, gaps_t, gaps_s, counts, noise,
        )
        if status == K.BUFFER_FULL:
            if cap >= max_gaps:
                break
            gaps_t = np.concatenate([gaps_t, np.empty_like(gaps_t)], axis=1)
            gaps_s = np.concatenate([gaps_s, np.empty_like(gaps_s)], axis=1)
            cap *= 2
            continue
        if status == K.CAPPED:
            capped = True
            break
        if status == K.DONE:
            break
    c = np.minimum(counts, gaps_t.shape[1])
    return SpikeScan(
        levels,
        r_low,
        [gaps_t[j, : c[j]].copy() for j in range(L)],
        [gaps_s[j, : c[j]].copy() for j in range(L)],
        t,
        capped,
    )


@dataclass
class StationarySamples:
    plain: np.ndarray  # |z| on a uniform physical-time grid
    timechanged: np.ndarray  # |z| on a uniform slow-clock grid
    t_total: float
    s_total: float
    capped: bool


def sample_stationary(
    spec: SystemSpec,
    t_end: float,
    seed=0,
    dt_sample: float = 1.0,
    ds_sample: float = 1.0,
    dt_base: float = 1e-2,
    eps: float = 0.05,
    r_cap: float = 1e8,
    r_clock: float = 1.0,
    z0=0j,
) -> StationarySamples:
    """|z| sampled every dt_sample of physical time and every ds_sample of slow time.

    Sampling on a fixed clock grid, not every k-th step, avoids weighting
    states by how small the adaptive step is there.
    """
    cj, ck, cc = spec.coeff_arrays()
    out_t = np.empty(int(t_end / dt_sample) + 2)
    # the slow clock runs ahead of t wherever r > r_clock; grow as needed
    out_s = np.empty(int(1.5 * t_end / ds_sample * max(1.0, r_clock**spec.n)) + 2)
    rng = make_rng(seed)
    z, t, s = _check_z0(z0), 0.0, 0.0
    next_t, next_s = dt_sample, ds_sample
    n_t = n_s = 0
    capped = False
    while True:
        noise = rng.standard_normal((BLOCK, 2))
        z, t, s, next_t, next_s, n_t, n_s, _, status = K.stationary_scan(
            z, t, s, spec.n, cj, ck, cc, spec.sigma, dt_base, eps, r_cap, t_end, r_clock,
            next_t, dt_sample, next_s, ds_sample, out_t, n_t, out_s, n_s, noise,
        )
        if status == K.CAPPED:
            capped = True
            break
        if status == K.BUFFER_FULL:
            if n_t >= out_t.shape[0]:
                out_t = np.concatenate([out_t, np.empty(1024)])
            if n_s >= out_s.shape[0]:
                out_s = np.concatenate([out_s, np.empty_like(out_s)])
            continue
        if status == K.DONE:
            break
    return StationarySamples(out_t[:n_t].copy(), out_s[:n_s].copy(), t, s, capped)


@dataclass
class WedgeExits:
    tau: np.ndarray  # exit time on the slow clock
    t_physical: np.ndarray
    r: np.ndarray
    theta: np.ndarray
    angular: np.ndarray  # True for exits through |eta| = eta*
    n: int = 1

    @property
    def K(self) -> np.ndarray:
        """Orbit parameter r / |sin(n theta)|^(1/n) at angular exits."""
        th = self.theta[self.angular]
        return self.r[self.angular] / np.abs(np.sin(self.n * th)) ** (1.0 / self.n)


def wedge_exits(
    spec: SystemSpec,
    eta_star: float,
    r_in: float,
    n_exits: int,
    seed=0,
    ds: float = 1e-3,
    r0: float | None = None,
    clock: str = "timechanged",
) -> WedgeExits:
    """Exits from {|theta| r^((n+2)/2) <= eta*, r >= r_in} started at (r0, 0).

    Each run starts at theta = 0 and r0 (default 2 r_in) on its own
    substream.  ``clock="plain"`` advances z by Cartesian Euler-Maruyama in
    physical time, ``"timechanged"`` advances (r, theta) on the slow clock.
    """
    if clock not in ("plain", "timechanged"):
        raise ConfigError(f"clock must be plain or timechanged, got {clock!r}")
    r0 = 2.0 * r_in if r0 is None else float(r0)
    if not (r0 >= r_in > 0 and eta_star > 0):
        raise DomainError("need r0 >= r_in > 0 and eta_star > 0")
    cj, ck, cc = spec.coeff_arrays()
    cart = clock == "plain"
    out = np.empty((n_exits, 4))
    flag = np.empty(n_exits, dtype=bool)
    for i in range(n_exits):
        rng = make_rng(substream(seed, i))
        r, th, s, t = r0, 0.0, 0.0, 0.0
        while True:
            noise = rng.standard_normal((4096, 2))
            r, th, s, t, _, status = K.wedge_exit(
                r, th, s, t, spec.n, cj, ck, cc, spec.sigma, ds, eta_star, r_in, cart, noise
            )
            if status:
                break
        out[i] = (s, t, r, th)
        flag[i] = status == 1
    return WedgeExits(out[:, 0], out[:, 1], out[:, 2], out[:, 3], flag, spec.n)
