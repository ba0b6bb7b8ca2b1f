"""Command-line front end: ``polystab <command> --config run.ini``.

Configs are INI files with a [system] section, an optional [integrator]
section and one section per command.  Unknown sections or keys are errors.
Every run writes one directory holding the effective config, a key=value
summary and CSV tables.  Exit codes: 0 success, 2 config error, 3 runtime
error or failed check.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import math
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import experiments as ex
from .errors import ConfigError, DomainError, PolystabError, VerificationFailure
from .lyapunov import GridSpec, Phi
from .model import SystemSpec
from .simulate import IntegratorConfig, Mode

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


@dataclass(frozen=True)
class Key:
    type: str  # int, float, bool, str, floats, coeffs
    default: object
    help: str
    required: bool = False


SYSTEM_KEYS = {
    "n": Key("int", None, "degree of the leading term z^(n+1)", required=True),
    "sigma": Key("float", 1.0, "noise amplitude"),
    "coeffs": Key("coeffs", "", "lower-order terms as 'j k re im' groups separated by ';' (c z^j conj(z)^k)"),
}

INTEGRATOR_KEYS = {
    "dt_base": Key("float", 1e-2, "base time step"),
    "drift_cap_eps": Key("float", 0.05, "largest drift displacement per step"),
    "r_cap": Key("float", 1e6, "radius that stops a run"),
    "t_max": Key("float", 1.0, "horizon (slow clock in timechanged mode)"),
    "mode": Key("str", "cartesian", "cartesian | timechanged | deterministic"),
    "thin": Key("int", 1, "keep every thin-th step"),
    "r_min": Key("float", 1e-3, "slow-clock floor radius"),
    "z0_re": Key("float", 0.0, "initial condition, real part"),
    "z0_im": Key("float", 0.0, "initial condition, imaginary part"),
}

COMMAND_KEYS = {
    "simulate": {},
    "lyapunov": {
        "gamma": Key("float", None, "growth exponent, must lie in (n, 2n)", required=True),
        "search": Key("bool", True, "search theta1, eta*, r*, h3 (false: starting values)"),
        "phi": Key("str", "both", "power | psidelta | both"),
        "n_radii": Key("int", 200, "radii on the verification grid"),
        "per_region": Key("int", 40, "angles per region on the verification grid"),
        "r_max_factor": Key("float", 100.0, "grid covers r in [r*, r_max_factor r*]"),
        **{k: Key("float", None, f"override for {k}") for k in
           ("q", "delta", "h1", "h2", "h3", "theta0", "theta1", "eta_star", "r_star")},
    },
    "spikes": {
        "levels": Key("floats", "8,12.6,20,31.7,50.2,80", "levels R (comma separated)"),
        "r_low": Key("float", 2.0, "re-arming radius"),
        "t_end": Key("float", 1e6, "physical time per path"),
        "n_paths": Key("int", 1, "independent paths, gaps pooled"),
        "clock": Key("str", "both", "plain | timechanged | both"),
    },
    "tail": {
        "t_end": Key("float", 1.1e7, "physical run length"),
        "levels": Key("floats", "", "levels R (default geometric 2 r_low .. 200 r_low)"),
        "r_low": Key("float", 1.0, "r*: burn-in return radius and window floor (R >= 4 r_low)"),
        "dt_sample": Key("float", 1.0, "sampling interval on the physical clock"),
        "ds_sample": Key("float", 1.0, "sampling interval on the slow clock"),
    },
    "moments": {
        "gammas": Key("floats", "1,2.5", "moment exponents"),
        "t_end": Key("float", 4.4e6, "physical run length"),
        "r_star": Key("float", 1.0, "burn-in return radius"),
        "dt_sample": Key("float", 1.0, "sampling interval"),
    },
    "exitrate": {
        "eta_star": Key("float", 50.0, "wedge half-width in eta"),
        "n_exits": Key("int", 2000, "exit events for the rate"),
        "r_in": Key("float", 1.0, "inner radius of the wedge"),
        "r0": Key("float", None, "start radius (default: where the wedge is 0.1 wide)"),
        "n_ktau": Key("int", 0, "extra exits from r0 = 2 r_in for the K tail"),
        "ds": Key("float", 1e-3, "slow-clock step"),
        "clock": Key("str", "timechanged", "plain | timechanged"),
    },
    "eigen": {
        "eta_stars": Key("floats", "10,25,50,100", "interval half-widths"),
        "grid_size": Key("int", None, "grid points (default from eta*/sigma)"),
    },
    "exitmoments": {
        "a": Key("float", None, "exponential moment order, in (0, (3n+2)/2)", required=True),
        "c": Key("float", 0.0, "interval centre"),
        "eta_star": Key("float", 10.0, "interval half-width"),
        "grid_size": Key("int", None, "grid points (default from eta*/sigma)"),
        "mc_points": Key("int", 0, "interior Monte Carlo check points"),
        "mc_paths": Key("int", 100_000, "paths per Monte Carlo point"),
        "mc_dt": Key("float", 1e-2, "Monte Carlo bulk step"),
    },
}

CSV_COLUMNS = {
    "simulate": "trajectory.csv: t,re,im,r (or s,r,theta,t in timechanged mode)",
    "lyapunov": "flux.csv: boundary,sign,r,jump; G_p2.csv, G_p3.csv: eta,G,Gprime; certificate_<phi>.txt",
    "spikes": "spikes.csv: R,gaps,mean_gap_t,se_t,mean_gap_s,se_s,in_window",
    "tail": "tail_plain.csv, tail_timechanged.csv: R,survival,count,se,in_window",
    "moments": "moments.csv: gamma,count,mean",
    "exitrate": "tau_survival.csv: tau,survival; ktau.csv: K,survival,count,in_window",
    "eigen": "eigen.csv: eta_star,lambda1,rel_diff_limit",
    "exitmoments": "G.csv: eta,G,Gprime; mc.csv: eta,G_bvp,G_mc,se_mc,rel_diff,n_se",
}


def _sections_for(cmd):
    return {"system": SYSTEM_KEYS, "integrator": INTEGRATOR_KEYS, cmd: COMMAND_KEYS[cmd]}


def _all_sections():
    return {"system": SYSTEM_KEYS, "integrator": INTEGRATOR_KEYS, **COMMAND_KEYS}


def _key_help(cmd) -> str:
    lines = ["config keys:"]
    for sec, keys in _sections_for(cmd).items():
        if not keys:
            continue
        lines.append(f"  [{sec}]")
        for name, k in keys.items():
            d = "required" if k.required else f"default {k.default!r}"
            lines.append(f"    {name} ({k.type}, {d}): {k.help}")
    lines.append(f"outputs: summary.txt (key=value), config.ini, {CSV_COLUMNS[cmd]}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# config parsing

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


class Config:
    """Parsed INI text with the line number of every key."""

    def __init__(self, text: str = "", source: str = "<config>"):
        self.source = source
        self.parser = configparser.ConfigParser(interpolation=None, strict=True)
        try:
            self.parser.read_string(text, source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        self.lines: dict[tuple[str, str], int] = {}
        sec = None
        for i, line in enumerate(text.splitlines(), 1):
            m = _SECTION_RE.match(line)
            if m:
                sec = m.group(1).strip()
                self.lines[(sec, "")] = i
                continue
            m = _KEY_RE.match(line)
            if m and sec is not None and not line[:1].isspace():
                self.lines[(sec, m.group(1).strip().lower())] = i

    def where(self, sec, key="") -> str:
        ln = self.lines.get((sec, key))
        if ln == 0:
            return f"--set {sec}.{key}"
        return f"{self.source}:{ln}" if ln else self.source

    def set(self, sec, key, value):
        if not self.parser.has_section(sec):
            self.parser.add_section(sec)
        self.parser.set(sec, key, str(value))
        self.lines[(sec, key)] = 0

    def validate(self):
        known = _all_sections()
        for sec in self.parser.sections():
            if sec not in known:
                raise ConfigError(f"{self.where(sec)}: unknown section [{sec}]")
            for key in self.parser.options(sec):
                if key not in known[sec]:
                    raise ConfigError(f"{self.where(sec, key)}: unknown key '{key}' in [{sec}]")

    def get(self, sec, key):
        spec = _all_sections()[sec][key]
        if not self.parser.has_option(sec, key):
            if spec.required:
                raise ConfigError(f"{self.source}: missing required key '{key}' in [{sec}]")
            raw = spec.default
            if raw is None or not isinstance(raw, str) or spec.type == "str":
                return raw
        else:
            raw = self.parser.get(sec, key)
        try:
            return _convert(spec.type, raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{self.where(sec, key)}: key '{key}' expects {spec.type}, got {raw!r}") from exc

    def section(self, sec) -> dict:
        return {k: self.get(sec, k) for k in _all_sections()[sec]}

    def snapshot(self, cmd) -> str:
        """Effective values for every key the command reads."""
        out = []
        for sec, keys in _sections_for(cmd).items():
            if not keys:
                continue
            out.append(f"[{sec}]")
            for k in keys:
                v = self.get(sec, k)
                if v is None:
                    continue
                out.append(f"{k} = {_unconvert(v)}")
            out.append("")
        return "\n".join(out)


def _convert(kind, raw):
    if raw is None:
        return None
    s = str(raw).strip()
    if kind == "int":
        return int(s)
    if kind == "float":
        v = float(s)
        if not math.isfinite(v):
            raise ValueError("not finite")
        return v
    if kind == "bool":
        low = s.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(s)
    if kind == "floats":
        return [float(x) for x in s.split(",") if x.strip()]
    if kind == "coeffs":
        out = {}
        for grp in filter(None, (g.strip() for g in s.split(";"))):
            j, k, re_, im = grp.split()
            out[(int(j), int(k))] = complex(float(re_), float(im))
        return out
    return s


def _unconvert(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, dict):
        return "; ".join(f"{j} {k} {c.real!r} {c.imag!r}" for (j, k), c in sorted(v.items()))
    return str(v)


def _spec(cfg: Config) -> SystemSpec:
    s = cfg.section("system")
    try:
        return SystemSpec(s["n"], s["sigma"], s["coeffs"] or None)
    except DomainError as exc:
        raise ConfigError(f"{cfg.where('system')}: {exc}") from exc


def _integrator(cfg: Config, clock: str | None) -> tuple[IntegratorConfig, complex]:
    s = cfg.section("integrator")
    mode = clock or s["mode"]
    try:
        mode = Mode(mode)
    except ValueError as exc:
        raise ConfigError(f"{cfg.where('integrator', 'mode')}: unknown mode {mode!r}") from exc
    try:
        ic = IntegratorConfig(s["dt_base"], s["drift_cap_eps"], s["r_cap"], s["t_max"], mode, s["thin"], s["r_min"])
    except ConfigError as exc:
        key = str(exc).split()[0]
        raise ConfigError(f"{cfg.where('integrator', key)}: {exc}") from exc
    z0 = complex(s["z0_re"], s["z0_im"])
    if ic.mode is Mode.TIME_CHANGED_POLAR and z0 == 0:
        raise ConfigError(f"{cfg.where('integrator')}: timechanged mode needs a nonzero z0 (z0_re, z0_im)")
    return ic, z0


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg, args):
    spec = _spec(cfg)
    clock = {"plain": "cartesian", "timechanged": "timechanged"}.get(args.clock, args.clock)
    ic, z0 = _integrator(cfg, clock)
    return ex.run_simulate(spec, ic, args.seed, z0)


def cmd_lyapunov(cfg, args):
    spec = _spec(cfg)
    s = cfg.section("lyapunov")
    n, gamma = spec.n, s["gamma"]
    if not spec.is_monomial:
        raise ConfigError(f"{cfg.where('system', 'coeffs')}: the certificate is built for the monomial drift")
    if not (n < gamma < 2 * n):
        raise ConfigError(f"{cfg.where('lyapunov', 'gamma')}: gamma must lie in the open interval ({n}, {2 * n}), got {gamma}")
    phi = args.phi or s["phi"]
    if phi == "both":
        phis = (Phi.POWER, Phi.PSIDELTA)
    else:
        try:
            phis = (Phi.parse(phi),)
        except (ValueError, DomainError) as exc:
            raise ConfigError(f"{cfg.where('lyapunov', 'phi')}: unknown phi {phi!r}") from exc
    overrides = {k: s[k] for k in ("q", "delta", "h1", "h2", "h3", "theta0", "theta1", "eta_star", "r_star")
                 if s[k] is not None}
    grid = GridSpec(n_radii=s["n_radii"], per_region=s["per_region"], r_max_factor=s["r_max_factor"])
    return ex.run_lyapunov(n, gamma, spec.sigma, s["search"], overrides, grid, phis)


def cmd_spikes(cfg, args):
    spec = _spec(cfg)
    s = cfg.section("spikes")
    clock = args.clock or s["clock"]
    if clock not in ("plain", "timechanged", "both"):
        raise ConfigError(f"{cfg.where('spikes', 'clock')}: clock must be plain, timechanged or both")
    ic = cfg.section("integrator")
    return ex.run_spikes(spec, s["levels"], s["r_low"], s["t_end"], args.seed, s["n_paths"], args.workers,
                         ic["dt_base"], ic["drift_cap_eps"], clock)


def cmd_tail(cfg, args):
    spec = _spec(cfg)
    s = cfg.section("tail")
    ic = cfg.section("integrator")
    return ex.run_tail(spec, s["t_end"], args.seed, s["levels"] or None, s["r_low"], s["dt_sample"],
                       s["ds_sample"], ic["dt_base"], ic["drift_cap_eps"])


def cmd_moments(cfg, args):
    spec = _spec(cfg)
    s = cfg.section("moments")
    ic = cfg.section("integrator")
    return ex.run_moments(spec, s["gammas"], s["t_end"], args.seed, s["r_star"], s["dt_sample"],
                          ic["dt_base"], ic["drift_cap_eps"])


def cmd_exitrate(cfg, args):
    spec = _spec(cfg)
    s = cfg.section("exitrate")
    clock = args.clock or s["clock"]
    if clock not in ("plain", "timechanged"):
        raise ConfigError(f"{cfg.where('exitrate', 'clock')}: clock must be plain or timechanged")
    return ex.run_exitrate(spec, s["eta_star"], s["n_exits"], args.seed, s["r_in"], s["r0"], s["n_ktau"],
                           s["ds"], clock)


def cmd_eigen(cfg, args):
    spec = _spec(cfg)
    s = cfg.section("eigen")
    return ex.run_eigen(spec.n, spec.sigma, s["eta_stars"], s["grid_size"])


def cmd_exitmoments(cfg, args):
    spec = _spec(cfg)
    s = cfg.section("exitmoments")
    return ex.run_exitmoments(s["a"], s["c"], s["eta_star"], spec.sigma, spec.n, s["grid_size"],
                              s["mc_points"], s["mc_paths"], s["mc_dt"], args.seed, args.workers)


COMMANDS = {
    "simulate": (cmd_simulate, "integrate one trajectory"),
    "lyapunov": (cmd_lyapunov, "build and verify the piecewise Lyapunov function"),
    "spikes": (cmd_spikes, "mean spacing of large excursions against their height"),
    "tail": (cmd_tail, "stationary survival tail of |z| on both clocks"),
    "moments": (cmd_moments, "stationary moments of |z| with convergence verdicts"),
    "exitrate": (cmd_exitrate, "exit-time tail rate from the thin wedge"),
    "eigen": (cmd_eigen, "smallest Dirichlet eigenvalue of the angular operator"),
    "exitmoments": (cmd_exitmoments, "exponential exit moments by finite differences"),
}


# ---------------------------------------------------------------------------
# output


def _write_csv(path: Path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_outputs(out: Path, cmd: str, cfg: Config, args, result: ex.ExperimentResult):
    out.mkdir(parents=True, exist_ok=True)
    snap = cfg.snapshot(cmd) + f"[run]\ncommand = {cmd}\nseed = {args.seed}\n"
    (out / "config.ini").write_text(snap)
    (out / "summary.txt").write_text(result.summary_text())
    for name, (cols, rows) in result.tables.items():
        _write_csv(out / f"{name}.csv", cols, rows)
    for name, body in result.text.items():
        (out / name).write_text(body)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="polystab",
        description="Experiments for polynomial SDEs stabilised by additive noise.",
        epilog="Run 'polystab <command> --help' for the config keys of a command.",
    )
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext, epilog=_key_help(name),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", metavar="PATH", help="INI config file")
        p.add_argument("--seed", type=int, default=0, metavar="U64", help="master seed (default 0)")
        p.add_argument("--workers", type=int, default=1, metavar="N", help="worker threads (default 1)")
        p.add_argument("--out", metavar="DIR", help="output directory (default runs/<command>-seed<seed>)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config key (repeatable)")
        if name in ("simulate", "spikes", "exitrate"):
            p.add_argument("--clock", choices=["plain", "timechanged", "both", "deterministic"], default=None,
                           help="clock for the run (overrides the config)")
        else:
            p.set_defaults(clock=None)
        if name == "lyapunov":
            p.add_argument("--phi", choices=["power", "psidelta", "both"], default=None,
                           help="right-hand side of the drift condition")
        else:
            p.set_defaults(phi=None)
    return ap


def _load_config(args) -> Config:
    if args.config:
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        cfg = Config(text, str(path))
    else:
        cfg = Config()
    for item in args.set:
        m = re.fullmatch(r"\s*([\w]+)\.([\w]+)\s*=(.*)", item)
        if not m:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        cfg.set(m.group(1), m.group(2).lower(), m.group(3).strip())
    cfg.validate()
    if args.seed < 0 or args.seed >= 2**64:
        raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
    if args.workers < 1:
        raise ConfigError(f"--workers must be at least 1, got {args.workers}")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    func = COMMANDS[args.command][0]
    try:
        cfg = _load_config(args)
        result = func(cfg, args)
    except (ConfigError, DomainError) as exc:
        print(f"polystab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationFailure as exc:
        print(f"polystab: {exc}", file=sys.stderr)
        detail = exc.certificate
        if isinstance(detail, list):
            for row in detail:
                print("  trace:", *row, file=sys.stderr)
        elif detail is not None:
            print(detail.to_text(), file=sys.stderr)
        return EXIT_RUNTIME
    except PolystabError as exc:
        print(f"polystab: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out) if args.out else Path("runs") / f"{args.command}-seed{args.seed}"
    write_outputs(out, args.command, cfg, args, result)
    for line in result.summary_text().splitlines():
        print(line)
    print(f"outputs: {out}")
    return EXIT_OK if result.ok else EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
