import subprocess
import sys

import pytest

from polystab.cli import COMMAND_KEYS, INTEGRATOR_KEYS, SYSTEM_KEYS, main


def _ini(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _summary(out):
    lines = (out / "summary.txt").read_text().splitlines()
    return dict(line.split("=", 1) for line in lines)


def test_missing_required_key(tmp_path, capsys):
    cfg = _ini(tmp_path, "[system]\nsigma = 1\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "'n'" in err and "[system]" in err


def test_unknown_key_is_line_anchored(tmp_path, capsys):
    cfg = _ini(tmp_path, "[system]\nn = 1\nsgima = 1\n")
    assert main(["simulate", "--config", cfg]) == 2
    err = capsys.readouterr().err
    assert f"{cfg}:3" in err and "sgima" in err


def test_unknown_section_and_bad_value(tmp_path, capsys):
    assert main(["simulate", "--config", _ini(tmp_path, "[system]\nn = 1\n[extra]\nx = 1\n")]) == 2
    assert "unknown section" in capsys.readouterr().err
    cfg = _ini(tmp_path, "[system]\nn = 1\n\n[integrator]\ndt_base = fast\n", "b.ini")
    assert main(["simulate", "--config", cfg]) == 2
    assert f"{cfg}:5" in capsys.readouterr().err
    cfg = _ini(tmp_path, "[system]\nn = 1\n\n[integrator]\ndt_base = -1\n", "c.ini")
    assert main(["simulate", "--config", cfg]) == 2
    assert f"{cfg}:5" in capsys.readouterr().err


def test_set_override_and_missing_file(tmp_path, capsys):
    assert main(["simulate", "--set", "system.n=1", "--set", "integrator.dt_base=oops"]) == 2
    assert "--set integrator.dt_base" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "nope.ini")]) == 2
    assert main(["simulate", "--set", "garbage"]) == 2


def test_timechanged_needs_nonzero_start(tmp_path, capsys):
    cfg = _ini(tmp_path, "[system]\nn = 1\n")
    assert main(["simulate", "--config", cfg, "--clock", "timechanged"]) == 2
    assert "z0" in capsys.readouterr().err


def test_simulate_byte_identical(tmp_path):
    cfg = _ini(tmp_path, "[system]\nn = 1\nsigma = 1\n\n[integrator]\nt_max = 200\nthin = 10\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", cfg, "--seed", "7", "--out", str(a)]) == 0
    assert main(["simulate", "--config", cfg, "--seed", "7", "--out", str(b)]) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    assert "config.ini" in names and "summary.txt" in names and "trajectory.csv" in names
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert "seed = 7" in (a / "config.ini").read_text()


def test_config_snapshot_reruns(tmp_path):
    cfg = _ini(tmp_path, "[system]\nn = 2\nsigma = 0.5\n\n[integrator]\nt_max = 50\n")
    a = tmp_path / "a"
    assert main(["simulate", "--config", cfg, "--seed", "3", "--out", str(a)]) == 0
    # the snapshot carries a [run] section, which is not a config section
    snap = (a / "config.ini").read_text().split("[run]")[0]
    b = tmp_path / "b"
    assert main(["simulate", "--config", _ini(tmp_path, snap, "snap.ini"), "--seed", "3", "--out", str(b)]) == 0
    assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()


def test_lyapunov_n1(tmp_path):
    out = tmp_path / "ly"
    cfg = _ini(tmp_path, "[system]\nn = 1\n\n[lyapunov]\ngamma = 1.5\n")
    assert main(["lyapunov", "--config", cfg, "--out", str(out)]) == 0
    s = _summary(out)
    assert s["success"] == "true" and float(s["power_m"]) > 0 and float(s["psidelta_m"]) > 0
    assert float(s["flux_max_jump"]) <= 0
    for name in ("flux.csv", "G_p2.csv", "G_p3.csv", "certificate_power.txt", "certificate_psidelta.txt"):
        assert (out / name).exists()


def test_lyapunov_n3(tmp_path):
    out = tmp_path / "ly3"
    assert main(["lyapunov", "--set", "system.n=3", "--set", "lyapunov.gamma=4", "--phi", "power",
                 "--out", str(out)]) == 0
    assert _summary(out)["success"] == "true"


@pytest.mark.parametrize("gamma", ["2", "1"])
def test_lyapunov_gamma_endpoints(tmp_path, gamma, capsys):
    cfg = _ini(tmp_path, f"[system]\nn = 1\n\n[lyapunov]\ngamma = {gamma}\n")
    assert main(["lyapunov", "--config", cfg]) == 2
    assert f"{cfg}:5" in capsys.readouterr().err


def test_lyapunov_search_failure_exit3(tmp_path, capsys):
    # a single candidate whose S3 piece has no decay left
    body = "gamma = 1.5\nh3 = 1e-12\ntheta1 = 0.7853981633974483\neta_star = 8\nr_star = 9.4\n"
    cfg = _ini(tmp_path, "[system]\nn = 1\n\n[lyapunov]\n" + body)
    assert main(["lyapunov", "--config", cfg, "--out", str(tmp_path / "f")]) == 3
    assert "trace:" in capsys.readouterr().err


def test_lyapunov_unverified_params_exit3(tmp_path):
    cfg = _ini(tmp_path, "[system]\nn = 1\n\n[lyapunov]\ngamma = 1.5\nsearch = false\nh2 = 0.5\n")
    out = tmp_path / "bad"
    assert main(["lyapunov", "--config", cfg, "--out", str(out)]) == 3
    s = _summary(out)
    assert s["admissible"] == "false" and float(s["flux_max_jump"]) > 0


def test_eigen(tmp_path):
    out = tmp_path / "eig"
    assert main(["eigen", "--set", "system.n=1", "--set", "eigen.eta_stars=50", "--out", str(out)]) == 0
    lines = (out / "eigen.csv").read_text().splitlines()
    assert lines[0] == "eta_star,lambda1,rel_diff_limit"
    lam = float(lines[1].split(",")[1])
    assert lam == pytest.approx(2.5, rel=0.05)


def test_exitmoments(tmp_path):
    out = tmp_path / "em"
    assert main(["exitmoments", "--set", "system.n=1", "--set", "exitmoments.a=1", "--set",
                 "exitmoments.eta_star=3", "--set", "exitmoments.mc_points=1", "--set",
                 "exitmoments.mc_paths=4000", "--out", str(out)]) == 0
    assert (out / "G.csv").read_text().startswith("eta,G,Gprime\n")
    s = _summary(out)
    assert float(s["mc_worst_rel"]) < 0.03


def test_exitrate_short(tmp_path):
    out = tmp_path / "er"
    assert main(["exitrate", "--set", "system.n=1", "--set", "exitrate.n_exits=1000", "--out", str(out)]) == 0
    s = _summary(out)
    assert float(s["rate"]) == pytest.approx(2.5, rel=0.2)


def test_spikes_short(tmp_path):
    out = tmp_path / "sp"
    args = ["spikes", "--set", "system.n=1", "--set", "spikes.t_end=1e5", "--set", "spikes.r_low=1",
            "--set", "spikes.levels=4,6,9,13.5", "--clock", "plain", "--out", str(out)]
    assert main(args) == 0
    s = _summary(out)
    assert 0.5 < float(s["slope_plain"]) < 1.5
    assert (out / "spikes.csv").read_text().startswith("R,gaps,")


@pytest.mark.parametrize("cmd", sorted(COMMAND_KEYS))
def test_help_lists_every_key(cmd, capsys):
    with pytest.raises(SystemExit) as ei:
        main([cmd, "--help"])
    assert ei.value.code == 0
    text = capsys.readouterr().out
    for name in list(SYSTEM_KEYS) + list(INTEGRATOR_KEYS) + list(COMMAND_KEYS[cmd]):
        assert f"    {name} (" in text
    assert "outputs:" in text and ".csv" in text


def test_console_script_entry(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "polystab.cli", "eigen", "--set", "system.n=2", "--set", "eigen.eta_stars=10",
         "--out", str(tmp_path / "e")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "outputs:" in proc.stdout


def test_tail_and_moments_short(tmp_path):
    out = tmp_path / "tail"
    assert main(["tail", "--set", "system.n=1", "--set", "tail.t_end=5e4", "--set", "tail.levels=2,4,6,8,12,16",
                 "--out", str(out)]) == 0
    s = _summary(out)
    assert -3.0 < float(s["slope_plain"]) < -1.0
    assert (out / "tail_plain.csv").read_text().startswith("R,survival,count,se,in_window\n")
    out = tmp_path / "mom"
    assert main(["moments", "--set", "system.n=1", "--set", "moments.t_end=5e4", "--set", "moments.gammas=1",
                 "--out", str(out)]) == 0
    assert _summary(out)["verdict_gamma_1.0"] == "Converged"
