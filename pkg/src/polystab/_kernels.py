"""Compiled inner loops.  Normals are generated outside and passed in blocks."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

RUNNING = 0
DONE = 1
CAPPED = 2
BUFFER_FULL = 3


@njit(cache=True, nogil=True)
def drift(z, n, cj, ck, cc):
    zn = z
    for _ in range(n):
        zn = zn * z
    if cc.shape[0]:
        zb = z.conjugate()
        for i in range(cc.shape[0]):
            term = cc[i]
            for _ in range(cj[i]):
                term = term * z
            for _ in range(ck[i]):
                term = term * zb
            zn = zn + term
    return zn


@njit(cache=True, nogil=True)
def em_path(
    z, t, s, n, cj, ck, cc, sigma, dt_base, eps, r_cap, horizon, timechanged, r_floor,
    noise, thin, step_count, out_t, out_s, out_z, n_out, floor_hits,
):
    """Euler-Maruyama on the plain or time-changed clock.

    The controlled clock is t (plain) or the slow clock
    s = int max(r, r_floor)^n dt (time-changed); the run stops when it reaches ``horizon`` or |z| hits
    ``r_cap``.  Every ``thin``-th step is written to the output buffers.
    Returns (z, t, s, used, status, n_out, step_count, floor_hits).
    """
    used = 0
    status = RUNNING
    m = noise.shape[0]
    cap_out = out_t.shape[0]
    while used < m:
        clock = s if timechanged else t
        if clock >= horizon:
            status = DONE
            break
        if n_out >= cap_out:
            status = BUFFER_FULL
            break
        b = drift(z, n, cj, ck, cc)
        r = abs(z)
        rho = r if r > r_floor else r_floor
        scale = rho**n
        if timechanged:
            if r < r_floor:
                floor_hits += 1
            # step chosen on the slow clock, then mapped to physical time
            ab = abs(b) / scale
            h = dt_base
            if ab * h > eps:
                h = eps / ab
            if h > horizon - s:
                h = horizon - s
            dt = h / scale
            ds = h
        else:
            ab = abs(b)
            dt = dt_base
            if ab * dt > eps:
                dt = eps / ab
            if dt > horizon - t:
                dt = horizon - t
            ds = dt * scale
        sd = sigma * math.sqrt(dt)
        z = z + b * dt + sd * complex(noise[used, 0], noise[used, 1])
        used += 1
        t += dt
        s += ds
        step_count += 1
        r = abs(z)
        if r >= r_cap or not math.isfinite(r):
            out_t[n_out] = t
            out_s[n_out] = s
            out_z[n_out] = z
            n_out += 1
            status = CAPPED
            break
        if step_count % thin == 0:
            out_t[n_out] = t
            out_s[n_out] = s
            out_z[n_out] = z
            n_out += 1
    return z, t, s, used, status, n_out, step_count, floor_hits


@njit(cache=True, nogil=True)
def deterministic_path(z, t, n, cj, ck, cc, dt_base, eps, r_cap, horizon, thin, step_count, out_t, out_z, n_out):
    """Noise-free adaptive Euler.  Returns (z, t, status, n_out, step_count)."""
    status = RUNNING
    cap_out = out_t.shape[0]
    while True:
        if t >= horizon:
            status = DONE
            break
        if n_out >= cap_out:
            status = BUFFER_FULL
            break
        b = drift(z, n, cj, ck, cc)
        ab = abs(b)
        dt = dt_base
        if ab * dt > eps:
            dt = eps / ab
        if dt > horizon - t:
            dt = horizon - t
        z = z + b * dt
        t += dt
        step_count += 1
        r = abs(z)
        if r >= r_cap or not math.isfinite(r):
            out_t[n_out] = t
            out_z[n_out] = z
            n_out += 1
            status = CAPPED
            break
        if step_count % thin == 0:
            out_t[n_out] = t
            out_z[n_out] = z
            n_out += 1
    return z, t, status, n_out, step_count


@njit(cache=True, nogil=True)
def spike_scan(
    z, t, s, n, cj, ck, cc, sigma, dt_base, eps, r_cap, t_end, r_clock, r_low, levels,
    phase, last_t, last_s, gaps_t, gaps_s, counts, noise,
):
    """Advance the plain-clock path and record gaps between successive up-crossings.

    For each level R an up-crossing T_i is the first time r >= R after the
    path has been back below r_low.  Gaps are kept on the physical clock and
    on the slow clock s = int max(r, r_clock)^n dt of the same path.
    Returns (z, t, s, used, status).
    """
    used = 0
    status = RUNNING
    m = noise.shape[0]
    cap = gaps_t.shape[1]
    for i in range(m):
        if t >= t_end:
            status = DONE
            break
        b = drift(z, n, cj, ck, cc)
        ab = abs(b)
        dt = dt_base
        if ab * dt > eps:
            dt = eps / ab
        r0 = abs(z)
        rho = r0 if r0 > r_clock else r_clock
        ds = dt * rho**n
        sd = sigma * math.sqrt(dt)
        z = z + b * dt + sd * complex(noise[i, 0], noise[i, 1])
        used += 1
        t += dt
        s += ds
        r = abs(z)
        if r >= r_cap or not math.isfinite(r):
            status = CAPPED
            break
        full = False
        for j in range(levels.shape[0]):
            if phase[j] == 0:
                if r >= levels[j]:
                    if last_t[j] >= 0.0:
                        c = counts[j]
                        if c < cap:
                            gaps_t[j, c] = t - last_t[j]
                            gaps_s[j, c] = s - last_s[j]
                        counts[j] = c + 1
                        if c + 1 >= cap:
                            full = True
                    last_t[j] = t
                    last_s[j] = s
                    phase[j] = 1
            elif r <= r_low:
                phase[j] = 0
        if full:
            status = BUFFER_FULL
            break
    return z, t, s, used, status


@njit(cache=True, nogil=True)
def stationary_scan(
    z, t, s, n, cj, ck, cc, sigma, dt_base, eps, r_cap, t_end, r_clock,
    next_t, dt_sample, next_s, ds_sample, out_t, n_t, out_s, n_s, noise,
):
    """Record |z| each time t passes a multiple of dt_sample, and likewise for s.

    Returns (z, t, s, next_t, next_s, n_t, n_s, used, status).
    """
    used = 0
    status = RUNNING
    m = noise.shape[0]
    for i in range(m):
        if t >= t_end:
            status = DONE
            break
        if n_t >= out_t.shape[0] or n_s >= out_s.shape[0]:
            status = BUFFER_FULL
            break
        b = drift(z, n, cj, ck, cc)
        ab = abs(b)
        dt = dt_base
        if ab * dt > eps:
            dt = eps / ab
        r0 = abs(z)
        rho = r0 if r0 > r_clock else r_clock
        ds = dt * rho**n
        sd = sigma * math.sqrt(dt)
        z = z + b * dt + sd * complex(noise[i, 0], noise[i, 1])
        used += 1
        t += dt
        s += ds
        r = abs(z)
        if r >= r_cap or not math.isfinite(r):
            status = CAPPED
            break
        while t >= next_t and n_t < out_t.shape[0]:
            out_t[n_t] = r
            n_t += 1
            next_t += dt_sample
        while s >= next_s and n_s < out_s.shape[0]:
            out_s[n_s] = r
            n_s += 1
            next_s += ds_sample
    return z, t, s, next_t, next_s, n_t, n_s, used, status


@njit(cache=True, nogil=True)
def wedge_exit(r, th, s, t, n, cj, ck, cc, sigma, ds, eta_star, r_in, cartesian, noise):
    """Run until |theta| r^((n+2)/2) >= eta* or r < r_in.

    The step is ``ds`` on the slow clock (shrunk so the radius moves by at
    most 5% per step) and ``ds / r^n`` on the physical clock.  With
    ``cartesian`` the update is Euler-Maruyama for z on the physical clock;
    otherwise it is Euler-Maruyama for (r, theta) on the slow clock, with
    the Ito correction sigma^2/(2 r^(n+1)) in the radial drift.  The exit
    point is linearly interpolated inside the crossing step.
    Returns (r, th, s, t, used, status) with status 1 for an angular exit,
    2 for a radial exit and 0 if the noise block ran out.
    """
    k = 0.5 * (n + 2)
    used = 0
    m = noise.shape[0]
    for i in range(m):
        c = math.cos(th)
        sn = math.sin(th)
        z = r * complex(c, sn)
        b = drift(z, n, cj, ck, cc)
        rot = b * complex(c, -sn)
        rn = r**n
        dr_ = rot.real / rn + 0.5 * sigma * sigma / (r * rn)
        dth = rot.imag / (r * rn)
        h = ds
        if abs(dr_) * h > 0.05 * r:
            h = 0.05 * r / abs(dr_)
        if cartesian:
            dt = h / rn
            z1 = z + b * dt + sigma * math.sqrt(dt) * complex(noise[i, 0], noise[i, 1])
            r1 = abs(z1)
            th1 = th + math.atan2((z1 * complex(c, -sn)).imag, (z1 * complex(c, -sn)).real)
        else:
            sq = math.sqrt(h)
            r1 = r + dr_ * h + sigma * r ** (-0.5 * n) * sq * noise[i, 0]
            th1 = th + dth * h + sigma * r ** (-k) * sq * noise[i, 1]
            if r1 <= 0.0:
                r1 = 0.5 * r
        used += 1
        e0 = abs(th) * r**k
        e1 = abs(th1) * r1**k
        if e1 >= eta_star:
            f = (eta_star - e0) / (e1 - e0) if e1 > e0 else 1.0
            return r + f * (r1 - r), th + f * (th1 - th), s + f * h, t + f * h / rn, used, 1
        if r1 < r_in:
            f = (r - r_in) / (r - r1)
            return r_in, th + f * (th1 - th), s + f * h, t + f * h / rn, used, 2
        r = r1
        th = th1
        s += h
        t += h / rn
    return r, th, s, t, used, 0
