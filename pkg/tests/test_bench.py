"""Benchmark oracles, spec wiring, run modes, CSV artifacts, and the CLI."""

import csv
import math
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner
from scipy.integrate import quad, trapezoid
from scipy.optimize import brentq, fsolve

from whitneyrom.bench import (
    BenchError,
    BenchmarkSpec,
    SodState,
    UnknownBenchmarkError,
    analytic_ad1d,
    benchmark_spec,
    build_dataset,
    build_problem,
    export_csv,
    model_config,
    parse_config,
    regression_mse,
    regression_target,
    run_benchmark,
    sod_exact,
    train_regression,
)
from whitneyrom.cli import main as cli_main
from whitneyrom.solver import build_system
from whitneyrom.complexes import evaluate_shape_matrix
from whitneyrom.trainer import initial_state


# ---------------------------------------------------------------------------
# boundary-layer profile
# ---------------------------------------------------------------------------


def test_ad1d_boundary_values_exact():
    for eps in (0.5, 0.01, 1e-6):
        u = analytic_ad1d(np.array([0.0, 1.0]), eps)
        assert u[0] == 1.0
        assert u[1] == 0.0


def test_ad1d_midpoint_value():
    # expm1(-1) / expm1(-2) evaluated independently
    assert analytic_ad1d(0.5, 0.5) == pytest.approx(0.7310585786300049, abs=1e-15)


def test_ad1d_no_overflow_and_monotone():
    x = np.linspace(0.0, 1.0, 2001)
    for eps in (1e-2, 1e-4, 1e-6):
        u = analytic_ad1d(x, eps)
        assert np.isfinite(u).all()
        assert u.min() >= 0.0 and u.max() <= 1.0
        assert (np.diff(u) <= 1e-15).all()  # boundary layer decays toward x=1


def test_ad1d_rejects_nonpositive_eps():
    with pytest.raises(BenchError, match="positive"):
        analytic_ad1d(0.5, 0.0)


# ---------------------------------------------------------------------------
# conditioned regression target
# ---------------------------------------------------------------------------


def test_regression_target_branches():
    z = (3.45, 0.05)
    # second breakpoint at 0.05 + 0.95/2 = 0.525
    assert regression_target(0.02, z) == pytest.approx(math.sin(3.45 * 0.02))
    assert regression_target(0.05, z) == 1.0  # breakpoints closed on the left
    assert regression_target(0.5, z) == 1.0
    assert regression_target(0.525, z) == -1.0
    assert regression_target(0.9, z) == -1.0


def test_regression_target_vectorized():
    z = (6.0, 0.4)
    x = np.linspace(0, 1, 11)
    vals = regression_target(x, z)
    assert vals.shape == (11,)
    assert set(np.round(vals[x >= 0.7], 12)) == {-1.0}


def test_regression_target_rejects_bad_z2():
    with pytest.raises(BenchError, match="z2"):
        regression_target(0.5, (3.0, 1.5))


# ---------------------------------------------------------------------------
# shock tube: state container
# ---------------------------------------------------------------------------


def test_sod_state_properties():
    s = SodState(rho=3.0, m=0.0, e=3.0, gamma=2.0)
    assert s.pressure == pytest.approx(3.0)
    assert s.velocity == 0.0
    assert np.array_equal(s.as_array(), [3.0, 0.0, 3.0])


def test_sod_state_rejects_nonphysical():
    with pytest.raises(BenchError, match="density"):
        SodState(rho=-1.0, m=0.0, e=1.0, gamma=2.0)
    with pytest.raises(BenchError, match="pressure"):
        SodState(rho=1.0, m=2.0, e=1.0, gamma=2.0)  # E < M^2/(2 rho)


# ---------------------------------------------------------------------------
# shock tube: independent star-pressure oracle
#
# The implementation solves a scalar pressure function built from closed-form
# wave relations.  The oracle below never uses those forms: the rarefaction
# branch integrates dp/(rho a) along the isentrope with adaptive quadrature,
# and the shock branch solves the raw Rankine-Hugoniot jump system for
# (rho2, u2, S) with a generic root finder.  The two u(p) curves are then
# intersected by bisection.
# ---------------------------------------------------------------------------

RHO_L, U_L, P_L = 3.0, 0.0, 3.0
RHO_R, U_R, P_R = 1.0, 0.0, 1.0


def _oracle_u_left(p, g):
    def integrand(pp):
        rho = RHO_L * (pp / P_L) ** (1.0 / g)
        return 1.0 / (rho * math.sqrt(g * pp / rho))

    val, _ = quad(integrand, P_L, p, epsabs=1e-13, epsrel=1e-13)
    return U_L - val


def _oracle_u_right(p, g):
    a_r = math.sqrt(g * P_R / RHO_R)
    dp = p - P_R

    def jump(v):
        rho2, u2, s = v
        e_r = P_R / (g - 1.0) + 0.5 * RHO_R * U_R**2
        e2 = p / (g - 1.0) + 0.5 * rho2 * u2**2
        return [
            RHO_R * (U_R - s) - rho2 * (u2 - s),
            (RHO_R * U_R * (U_R - s) + P_R) - (rho2 * u2 * (u2 - s) + p),
            (e_r * (U_R - s) + P_R * U_R) - (e2 * (u2 - s) + p * u2),
        ]

    guess = [RHO_R + dp / a_r**2, U_R + dp / (RHO_R * a_r), a_r + dp / (RHO_R * a_r)]
    sol, _, ier, msg = fsolve(jump, guess, full_output=True, xtol=1e-13)
    assert ier == 1, msg
    rho2, u2, s = sol
    assert rho2 > RHO_R and s > 0  # compressive right-moving shock
    return u2


def _oracle_star_pressure(g):
    return brentq(
        lambda p: _oracle_u_left(p, g) - _oracle_u_right(p, g),
        P_R + 1e-6, P_L - 1e-6, xtol=1e-13, rtol=8.9e-16,
    )


def test_sod_star_pressure_against_oracle():
    # frozen oracle output for gamma=2 plus a live cross-check
    frozen = 1.6685940925946383
    live = _oracle_star_pressure(2.0)
    assert live == pytest.approx(frozen, abs=1e-11)
    # the star region between contact and shock carries exactly p_star
    state = sod_exact(1.0, 1.0, 2.0)
    assert state.pressure == pytest.approx(frozen, rel=1e-9)
    for g in (4.5, 7.0):
        ps = _oracle_star_pressure(g)
        assert sod_exact(1e-3, 1.0, g).pressure == pytest.approx(ps, rel=1e-9)


def test_sod_initial_condition_and_far_field():
    for x, want in ((-1.0, (3.0, 0.0, 3.0)), (0.0, (1.0, 0.0, 1.0)),
                    (2.0, (1.0, 0.0, 1.0))):
        s = sod_exact(x, 0.0, 3.5)
        assert (s.rho, s.velocity, s.pressure) == pytest.approx(want)
    # waves never reach |x| = 3.4 by t = 1 for gamma in [2, 7]
    for g in (2.0, 7.0):
        left = sod_exact(-3.4, 1.0, g)
        right = sod_exact(3.4, 1.0, g)
        assert (left.rho, left.velocity, left.pressure) == pytest.approx((3, 0, 3))
        assert (right.rho, right.velocity, right.pressure) == pytest.approx((1, 0, 1))


def test_sod_contact_jump_and_continuity():
    g = 2.0
    p_s = 1.6685940925946383
    u_s = 0.38582711081402643
    lo = sod_exact((u_s - 1e-6) * 1.0, 1.0, g)
    hi = sod_exact((u_s + 1e-6) * 1.0, 1.0, g)
    # pressure and velocity are continuous across the contact; density jumps
    assert lo.pressure == pytest.approx(hi.pressure, rel=1e-9)
    assert lo.velocity == pytest.approx(hi.velocity, rel=1e-6)
    assert lo.pressure == pytest.approx(p_s, rel=1e-9)
    assert abs(lo.rho - hi.rho) > 0.1


def test_sod_rarefaction_riemann_invariant():
    # u + 2a/(gamma-1) is constant through the left fan
    g = 2.0
    a_l = math.sqrt(g * P_L / RHO_L)
    invariant = U_L + 2.0 * a_l / (g - 1.0)
    for xi in (-1.3, -1.1, -0.9):
        s = sod_exact(xi, 1.0, g)
        a = math.sqrt(g * s.pressure / s.rho)
        assert s.velocity + 2.0 * a / (g - 1.0) == pytest.approx(invariant, rel=1e-12)


def test_sod_integral_conservation():
    # independent global balances on [-3.5, 3.5]: boundary fluxes are the
    # untouched far-field states, so mass and energy are conserved and
    # momentum grows by (p_left - p_right) * t = 2t
    xs = np.linspace(-3.5, 3.5, 20001)
    for g in (2.0, 7.0):
        states = [sod_exact(x, 1.0, g) for x in xs]
        rho = np.array([s.rho for s in states])
        mom = np.array([s.m for s in states])
        ene = np.array([s.e for s in states])
        mass0 = (3.0 + 1.0) * 3.5
        e0 = (3.0 + 1.0) / (g - 1.0) * 3.5
        assert trapezoid(rho, xs) == pytest.approx(mass0, abs=2e-3)
        assert trapezoid(mom, xs) == pytest.approx(2.0, abs=2e-3)
        assert trapezoid(ene, xs) == pytest.approx(e0, abs=2e-3)


def test_sod_rejects_bad_arguments():
    with pytest.raises(BenchError, match="gamma"):
        sod_exact(0.0, 1.0, 1.0)
    with pytest.raises(BenchError, match="non-negative"):
        sod_exact(0.0, -1.0, 2.0)


# ---------------------------------------------------------------------------
# CSV export and config parsing
# ---------------------------------------------------------------------------


def test_export_csv_roundtrip_and_quoting(tmp_path):
    records = [
        {"a": math.pi, "n": 7, "s": "x,y", "ok": True},
        {"a": 1e-300, "n": -2, "s": 'quote "inside"', "ok": False},
    ]
    path = export_csv(records, tmp_path / "out.csv")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["a", "n", "s", "ok"]
    assert float(rows[1][0]) == math.pi  # 17 significant digits round-trip
    assert float(rows[2][0]) == 1e-300
    assert rows[1][2] == "x,y"
    assert rows[2][2] == 'quote "inside"'
    assert [r[3] for r in rows[1:]] == ["true", "false"]


def test_export_csv_empty_needs_header(tmp_path):
    path = export_csv([], tmp_path / "empty.csv", header=["x", "y"])
    assert path.read_bytes() == b"x,y\r\n"
    with pytest.raises(BenchError, match="header"):
        export_csv([], tmp_path / "bad.csv")


def test_parse_config_types_and_comments(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text(
        "# a comment\n"
        "benchmark = ad1d\n"
        "epochs = 40   # trailing comment\n"
        "lr = 2.5e-3\n"
        "\n"
        "out_dir = runs/a b\n"
    )
    cfg = parse_config(p)
    assert cfg == {"benchmark": "ad1d", "epochs": 40, "lr": 2.5e-3,
                   "out_dir": "runs/a b"}


def test_parse_config_reports_line_number(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("benchmark = ad1d\nnot a pair\n")
    with pytest.raises(BenchError, match=":2:"):
        parse_config(p)


# ---------------------------------------------------------------------------
# benchmark specs
# ---------------------------------------------------------------------------


def test_unknown_benchmark_raises():
    with pytest.raises(UnknownBenchmarkError, match="unknown benchmark"):
        benchmark_spec("nope")


def test_ad1d_spec_structure():
    spec = benchmark_spec("ad1d", {"n_elems": 16})
    assert spec.m_int == 6
    assert spec.bnd_groups == {"left": 1, "right": 1}
    assert len(spec.train_grid) == 8
    assert len(spec.eval_grid) == 7
    eps = np.exp([z[0] for z in spec.train_grid])
    assert eps[0] == pytest.approx(0.01) and eps[-1] == pytest.approx(0.5)
    # eval conditions interleave the training grid
    mids = np.exp([z[0] for z in spec.eval_grid])
    assert ((eps[:-1] < mids) & (mids < eps[1:])).all()
    problem = build_problem(spec)
    assert problem.layout.m_int == 6 and problem.layout.m_bnd == 2


def test_ad2d_spec_arcs_partition_boundary():
    spec = benchmark_spec("ad2d", {"n_rings": 3})
    groups = spec.mesh.boundary_groups
    assert set(groups) == {"arc0", "arc1", "arc2"}
    sizes = [len(v) for v in groups.values()]
    assert sum(sizes) == 18  # ring 3 carries 6*3 nodes
    assert min(sizes) >= 5
    assert spec.m_int == 8


def test_point_charge_rhs_is_unit_charge():
    spec = benchmark_spec("point_charge", {"n_rings": 5})
    problem = build_problem(spec)
    state = initial_state(0, model_config(spec), problem=problem)
    z = spec.train_grid[0]
    comb = evaluate_shape_matrix(state.params, spec.mesh, z, problem.layout)
    rhs, rhs_fn = spec.rhs_of(z, problem.layout, spec.mesh)
    system = build_system(
        spec.mesh, problem.fine, comb, state.params, z, spec.lift_of(z),
        rhs=rhs, rhs_fn=rhs_fn, n_fields=1,
    )
    # the projected delta load keeps its unit mass: interior partitions sum
    # the fine hats, and the charge sits away from the boundary
    assert system.rhs.sum() == pytest.approx(1.0, abs=1e-12)
    assert system.rhs.min() >= 0.0


def test_sod_spec_fields_and_lift():
    spec = benchmark_spec("sod", {"nx": 8, "nt": 4, "n_train": 3})
    assert spec.n_fields == 3
    assert set(spec.mesh.boundary_groups) == {
        "left", "right", "top", "bottom_l", "bottom_r"}
    lift = spec.lift_of((3.0,))
    assert np.allclose(lift["bottom_l"], [3.0, 0.0, 1.5])
    assert np.allclose(lift["bottom_r"], [1.0, 0.0, 0.5])
    problem = build_problem(spec)
    assert problem.layout.m_bnd == 4  # top stays natural
    samples, cases = build_dataset(spec, problem)
    assert len(samples) == 3 and len(cases) == 2
    assert samples[0].targets.shape == (len(spec.mesh.nodes), 3)


def test_spec_validation():
    with pytest.raises(BenchError, match="tolerance"):
        BenchmarkSpec(
            name="x", mesh=None, m_int=1, bnd_groups={}, z_dim=1, n_fields=1,
            train_grid=[], eval_grid=[], lift_of=None, rhs_of=None,
            target_of=None, tolerances={"rel_l2": 0.0},
        )
    with pytest.raises(BenchError, match="outside"):
        BenchmarkSpec(
            name="x", mesh=None, m_int=1, bnd_groups={}, z_dim=1, n_fields=1,
            train_grid=[(2.0,)], eval_grid=[], lift_of=None, rhs_of=None,
            target_of=None, tolerances={"rel_l2": 0.1}, z_range=[(0.0, 1.0)],
        )


# ---------------------------------------------------------------------------
# run_benchmark modes
# ---------------------------------------------------------------------------

TINY_AD1D = {"n_elems": 16, "epochs": 2, "n_train": 2, "seed": 0}


def _with_out(cfg, tmp_path, sub):
    out = dict(cfg)
    out["out_dir"] = str(tmp_path / sub)
    return out


def test_run_benchmark_usage_errors(tmp_path, capsys):
    assert run_benchmark("nope", {}, "diag") == 2
    assert "unknown benchmark" in capsys.readouterr().err
    assert run_benchmark("ad1d", _with_out(TINY_AD1D, tmp_path, "m"), "oops") == 2
    assert "unknown mode" in capsys.readouterr().err


def test_run_benchmark_diag_passes_untrained(tmp_path):
    cfg = _with_out(TINY_AD1D, tmp_path, "diag")
    assert run_benchmark("ad1d", cfg, "diag") == 0
    with open(tmp_path / "diag" / "ad1d_diag.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    names = {r["check"] for r in rows}
    assert {"partition_of_unity", "conservation_antisymmetry",
            "gradient_reconstruction", "parameter_gradient_fd"} <= names
    assert all(r["status"] == "pass" for r in rows)


def test_run_benchmark_diag_regression(tmp_path):
    cfg = {"out_dir": str(tmp_path / "rg"), "embed_dim": 32, "shape_blocks": 1}
    assert run_benchmark("regression1d", cfg, "diag") == 0


def test_run_benchmark_train_eval_roundtrip(tmp_path):
    cfg = _with_out(TINY_AD1D, tmp_path, "run")
    assert run_benchmark("ad1d", cfg, "train") == 0
    out = tmp_path / "run"
    assert (out / "training_log.csv").exists()
    assert (out / "ckpt-final.bin").exists()

    cfg["checkpoint"] = str(out / "ckpt-final.bin")
    code = run_benchmark("ad1d", cfg, "eval")
    assert code in (0, 1)  # two epochs rarely meet the accuracy bar
    with open(out / "ad1d_errors.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1  # one geometric midpoint for a 2-point grid
    assert float(rows[0]["conservation"]) <= 1e-11
    assert float(rows[0]["epsilon"]) > 0
    assert (out / "ad1d_field.csv").exists()


def test_run_benchmark_eval_needs_checkpoint(tmp_path, capsys):
    cfg = _with_out(TINY_AD1D, tmp_path, "ev")
    assert run_benchmark("ad1d", cfg, "eval") == 2
    cfg["checkpoint"] = str(tmp_path / "missing.bin")
    assert run_benchmark("ad1d", cfg, "eval") == 2
    assert "not found" in capsys.readouterr().err


def test_run_benchmark_deterministic_artifacts(tmp_path):
    cfg_a = _with_out(TINY_AD1D, tmp_path, "a")
    cfg_b = _with_out(TINY_AD1D, tmp_path, "b")
    assert run_benchmark("ad1d", cfg_a, "train") == 0
    assert run_benchmark("ad1d", cfg_b, "train") == 0
    bytes_a = (tmp_path / "a" / "ckpt-final.bin").read_bytes()
    bytes_b = (tmp_path / "b" / "ckpt-final.bin").read_bytes()
    assert bytes_a == bytes_b
    assert ((tmp_path / "a" / "training_log.csv").read_text()
            == (tmp_path / "b" / "training_log.csv").read_text())


def test_out_dir_env_override(tmp_path, monkeypatch):
    target = tmp_path / "from_env"
    monkeypatch.setenv("WHITNEYROM_OUT", str(target))
    cfg = dict(TINY_AD1D)
    cfg["out_dir"] = str(tmp_path / "ignored")
    assert run_benchmark("ad1d", cfg, "diag") == 0
    assert (target / "ad1d_diag.csv").exists()
    assert not (tmp_path / "ignored").exists()


# ---------------------------------------------------------------------------
# raw regression loop
# ---------------------------------------------------------------------------


def test_regression_training_reduces_loss():
    cfg = {"steps": 300, "batch": 64, "lr": 3e-3, "seed": 0,
           "embed_dim": 32, "shape_blocks": 1}
    params, losses = train_regression(cfg)
    first = float(np.mean(losses[:50]))
    last = float(np.mean(losses[-50:]))
    assert np.isfinite(losses).all()
    assert last < 0.7 * first
    mse = regression_mse(params, [(4.0, 0.3)], n_points=128)
    assert np.isfinite(mse)


# ---------------------------------------------------------------------------
# command-line interface
# ---------------------------------------------------------------------------


@pytest.fixture()
def runner():
    return CliRunner()


def test_cli_mesh_gen_and_validate(runner, tmp_path):
    out = str(tmp_path / "disk.json")
    res = runner.invoke(cli_main, ["mesh", "gen", "--kind", "disk",
                                   "--n", "3", "--out", out])
    assert res.exit_code == 0, res.output
    assert "37 nodes" in res.output
    res = runner.invoke(cli_main, ["mesh", "validate", out])
    assert res.exit_code == 0
    assert "shell(18)" in res.output


def test_cli_mesh_validate_rejects_garbage(runner, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "something-else"}')
    res = runner.invoke(cli_main, ["mesh", "validate", str(bad)])
    assert res.exit_code == 1
    assert "invalid" in res.output


def test_cli_bench_guards(runner):
    res = runner.invoke(cli_main, ["bench", "sod"])
    assert res.exit_code == 2
    assert "--stretch" in res.output
    res = runner.invoke(cli_main, ["bench", "definitely-not-a-benchmark"])
    assert res.exit_code == 2


def test_cli_train_eval_diag(runner, tmp_path):
    cfg = tmp_path / "cfg.txt"
    out = tmp_path / "run"
    cfg.write_text(
        "benchmark = ad1d\nn_elems = 16\nepochs = 2\nn_train = 2\n"
        f"seed = 0\nout_dir = {out}\n"
    )
    res = runner.invoke(cli_main, ["train", str(cfg)])
    assert res.exit_code == 0, res.output
    ckpt = out / "ckpt-final.bin"
    assert ckpt.exists()
    res = runner.invoke(cli_main, ["eval", str(ckpt), str(cfg)])
    assert res.exit_code in (0, 1)
    assert (out / "ad1d_errors.csv").exists()
    res = runner.invoke(cli_main, ["diag", str(cfg)])
    assert res.exit_code == 0


def test_cli_config_errors(runner, tmp_path):
    missing = runner.invoke(cli_main, ["train", str(tmp_path / "nope.txt")])
    assert missing.exit_code == 2  # click validates the path itself
    cfg = tmp_path / "nobench.txt"
    cfg.write_text("epochs = 1\n")
    res = runner.invoke(cli_main, ["diag", str(cfg)])
    assert res.exit_code == 2
    assert "benchmark" in res.output
