"""Benchmark definitions, analytic oracles, and CSV artifact export.

Each benchmark wires a mesh, a Dirichlet layout, a conditioning grid, and a
target generator into the trainer.  ``diag`` mode checks the structural
guarantees (partition of unity, discrete conservation, gradient consistency)
with untrained parameters — none of them may depend on training.  ``train``
runs the fit loop; ``eval`` solves on a held-out conditioning grid and writes
an error table plus a fine-mesh field dump.

The regression benchmark is different in kind: it exercises the conditioning
trunk directly as a function regressor (no mesh, no solver) and trains by
plain stochastic MSE descent.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from . import autodiff as ad
from . import nets
from .autodiff import Tape
from .complexes import (
    FineOperators,
    evaluate_shape_matrix,
    project_gradient,
    split_dirichlet,
)
from .mesh import (
    AdvectionDiffusion,
    PointCharge,
    SimplicialMesh,
    build_disk_mesh,
    build_interval_mesh,
    build_structured_tri_mesh,
    p1_basis_matrix,
    reference_solve,
)
from .nets import ModelConfig
from .solver import (
    adjoint_solve,
    build_system,
    data_loss,
    newton_solve,
    parameter_gradient,
    wellposedness_diagnostic,
)
from .trainer import (
    ADAM_DEFAULTS,
    SHAMPOO_DEFAULTS,
    EvalCase,
    TrainingProblem,
    TrainingSample,
    apply_gradient,
    evaluate_errors,
    fit,
    initial_state,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

BENCHMARK_NAMES = ("regression1d", "ad1d", "ad2d", "point_charge", "sod")


class BenchError(RuntimeError):
    pass


class UnknownBenchmarkError(BenchError):
    pass


# ---------------------------------------------------------------------------
# analytic oracles
# ---------------------------------------------------------------------------


def analytic_ad1d(x, eps):
    """Steady advection-diffusion boundary-layer profile on [0, 1].

    Written as expm1((x-1)/eps) / expm1(-1/eps): both exponents are
    non-positive on [0, 1], so the evaluation never overflows however small
    eps gets, and u(0) = 1, u(1) = 0 hold exactly.
    """
    if eps <= 0:
        raise BenchError(f"eps must be positive, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    return np.expm1((x - 1.0) / eps) / np.expm1(-1.0 / eps)


def regression_target(x, z):
    """Conditioned piecewise test function: sin(z1*x), then +1, then -1.

    Branch boundaries sit at z2 and z2 + (1-z2)/2; both are closed on the
    left (x equal to a breakpoint takes the right-hand branch's value, i.e.
    x = z2 gives +1).
    """
    z1, z2 = float(z[0]), float(z[1])
    if not 0.0 < z2 < 1.0:
        raise BenchError(f"z2 must lie in (0, 1), got {z2}")
    x = np.asarray(x, dtype=np.float64)
    second = z2 + 0.5 * (1.0 - z2)
    return np.where(x < z2, np.sin(z1 * x), np.where(x < second, 1.0, -1.0))


@dataclass
class SodState:
    """Conserved hydrodynamic state (density, momentum, energy)."""

    rho: float
    m: float
    e: float
    gamma: float

    def __post_init__(self):
        if self.rho <= 0:
            raise BenchError(f"density must be positive, got {self.rho}")
        if self.pressure <= 0:
            raise BenchError(f"pressure must be positive, got {self.pressure}")

    @property
    def pressure(self) -> float:
        return (self.gamma - 1.0) * (self.e - self.m**2 / (2.0 * self.rho))

    @property
    def velocity(self) -> float:
        return self.m / self.rho

    def as_array(self) -> NDArray:
        return np.array([self.rho, self.m, self.e])


SOD_LEFT = (3.0, 0.0, 3.0)  # rho, velocity, pressure
SOD_RIGHT = (1.0, 0.0, 1.0)


def _pressure_fn(p, rho_k, p_k, a_k, g):
    """Velocity change across one wave as a function of star pressure."""
    if p > p_k:  # shock
        a_coef = 2.0 / ((g + 1.0) * rho_k)
        b_coef = (g - 1.0) / (g + 1.0) * p_k
        return (p - p_k) * math.sqrt(a_coef / (p + b_coef))
    # rarefaction
    return 2.0 * a_k / (g - 1.0) * ((p / p_k) ** ((g - 1.0) / (2.0 * g)) - 1.0)


def _star_pressure(g):
    rho_l, u_l, p_l = SOD_LEFT
    rho_r, u_r, p_r = SOD_RIGHT
    a_l = math.sqrt(g * p_l / rho_l)
    a_r = math.sqrt(g * p_r / rho_r)

    def phi(p):
        return (
            _pressure_fn(p, rho_l, p_l, a_l, g)
            + _pressure_fn(p, rho_r, p_r, a_r, g)
            + (u_r - u_l)
        )

    lo, hi = 1e-10, max(p_l, p_r)
    if phi(lo) > 0 or phi(hi) > 0:
        hi_try = hi
        while phi(hi_try) < 0 and hi_try < 1e8:
            hi_try *= 2.0
        hi = hi_try
    if phi(lo) * phi(hi) > 0:
        raise BenchError(
            f"star pressure root not bracketed in [{lo}, {hi}] for gamma={g}"
        )
    # bisection to a safe neighborhood, then Newton to tol 1e-12
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if phi(lo) * phi(mid) <= 0:
            hi = mid
        else:
            lo = mid
    p = 0.5 * (lo + hi)
    for _ in range(50):
        f0 = phi(p)
        h = max(1e-9, 1e-9 * p)
        df = (phi(p + h) - phi(p - h)) / (2.0 * h)
        step = f0 / df
        p -= step
        if abs(step) <= 1e-12 * max(1.0, p) and abs(f0) <= 1e-12:
            break
    u_star = 0.5 * (u_l + u_r) + 0.5 * (
        _pressure_fn(p, rho_r, p_r, a_r, g) - _pressure_fn(p, rho_l, p_l, a_l, g)
    )
    return p, u_star


def _sod_primitive(xi, g):
    """Sample (rho, u, p) of the self-similar solution at xi = x/t."""
    rho_l, u_l, p_l = SOD_LEFT
    rho_r, u_r, p_r = SOD_RIGHT
    a_l = math.sqrt(g * p_l / rho_l)
    a_r = math.sqrt(g * p_r / rho_r)
    p_s, u_s = _star_pressure(g)
    gp = (g + 1.0) / (2.0 * g)
    gm = (g - 1.0) / (2.0 * g)
    beta = (g - 1.0) / (g + 1.0)

    if xi <= u_s:  # left of the contact
        if p_s > p_l:  # left shock
            s_l = u_l - a_l * math.sqrt(gp * p_s / p_l + gm)
            if xi <= s_l:
                return rho_l, u_l, p_l
            rho = rho_l * (p_s / p_l + beta) / (beta * p_s / p_l + 1.0)
            return rho, u_s, p_s
        # left rarefaction
        head = u_l - a_l
        a_sl = a_l * (p_s / p_l) ** gm
        tail = u_s - a_sl
        if xi <= head:
            return rho_l, u_l, p_l
        if xi >= tail:
            return rho_l * (p_s / p_l) ** (1.0 / g), u_s, p_s
        u = 2.0 / (g + 1.0) * (a_l + 0.5 * (g - 1.0) * u_l + xi)
        a = 2.0 / (g + 1.0) * (a_l + 0.5 * (g - 1.0) * (u_l - xi))
        rho = rho_l * (a / a_l) ** (2.0 / (g - 1.0))
        p = p_l * (a / a_l) ** (2.0 * g / (g - 1.0))
        return rho, u, p
    # right of the contact
    if p_s > p_r:  # right shock
        s_r = u_r + a_r * math.sqrt(gp * p_s / p_r + gm)
        if xi >= s_r:
            return rho_r, u_r, p_r
        rho = rho_r * (p_s / p_r + beta) / (beta * p_s / p_r + 1.0)
        return rho, u_s, p_s
    head = u_r + a_r
    a_sr = a_r * (p_s / p_r) ** gm
    tail = u_s + a_sr
    if xi >= head:
        return rho_r, u_r, p_r
    if xi <= tail:
        return rho_r * (p_s / p_r) ** (1.0 / g), u_s, p_s
    u = 2.0 / (g + 1.0) * (-a_r + 0.5 * (g - 1.0) * u_r + xi)
    a = 2.0 / (g + 1.0) * (a_r - 0.5 * (g - 1.0) * (u_r - xi))
    rho = rho_r * (a / a_r) ** (2.0 / (g - 1.0))
    p = p_r * (a / a_r) ** (2.0 * g / (g - 1.0))
    return rho, u, p


def sod_exact(x, t, gamma):
    """Exact Riemann solution of the shock-tube problem at (x, t)."""
    if gamma <= 1.0:
        raise BenchError(f"gamma must exceed 1, got {gamma}")
    if t < 0:
        raise BenchError(f"t must be non-negative, got {t}")
    g = float(gamma)
    if t == 0.0:
        rho, u, p = SOD_LEFT if x < 0 else SOD_RIGHT
    else:
        rho, u, p = _sod_primitive(x / t, g)
    return SodState(rho=rho, m=rho * u, e=p / (g - 1.0) + 0.5 * rho * u * u, gamma=g)


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------


def _format_cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def export_csv(records, path, header=None):
    """Comma-separated export: header row, quoted per RFC 4180 when needed,
    floats at 17 significant digits (bit-exact round trips)."""
    records = list(records)
    if header is None:
        if not records:
            raise BenchError("empty record list needs an explicit header")
        header = list(records[0].keys())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in records:
            writer.writerow([_format_cell(rec[k]) for k in header])
    return path


def parse_config(path) -> dict:
    """Flat ``key = value`` text; # starts a comment; values typed eagerly."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise BenchError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            for cast in (int, float):
                try:
                    out[key] = cast(val)
                    break
                except ValueError:
                    continue
            else:
                out[key] = val
    return out


# ---------------------------------------------------------------------------
# benchmark specifications
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkSpec:
    """Everything run_benchmark needs to wire a benchmark together."""

    name: str
    mesh: SimplicialMesh | None
    m_int: int
    bnd_groups: dict
    z_dim: int
    n_fields: int
    train_grid: list  # list of z tuples
    eval_grid: list
    lift_of: object  # callable z -> lift dict/array
    rhs_of: object  # callable (z, layout, mesh) -> (rhs array, rhs_fn) pair
    target_of: object  # callable z -> (N, F) fine-node target values
    tolerances: dict
    model_kw: dict = field(default_factory=dict)
    z_range: list | None = None  # per-component (lo, hi) conditioning range

    def __post_init__(self):
        for key, tol in self.tolerances.items():
            if tol <= 0:
                raise BenchError(f"{self.name}: tolerance {key} must be positive")
        if self.z_range is not None:
            for z in self.train_grid:
                for comp, (lo, hi) in zip(z, self.z_range):
                    if not lo <= comp <= hi:
                        raise BenchError(
                            f"{self.name}: training point {z} outside "
                            f"conditioning range {self.z_range}"
                        )


def _log_grid(lo, hi, n):
    return np.exp(np.linspace(np.log(lo), np.log(hi), n))


def _ad1d_spec(config) -> BenchmarkSpec:
    n_elems = int(config.get("n_elems", 128))
    mesh = build_interval_mesh(n_elems, 0.0, 1.0)
    eps_lo = float(config.get("eps_lo", 0.01))
    eps_hi = float(config.get("eps_hi", 0.5))
    n_train = int(config.get("n_train", 8))
    train_eps = _log_grid(eps_lo, eps_hi, n_train)
    eval_eps = np.sqrt(train_eps[:-1] * train_eps[1:])  # geometric midpoints

    def target(z):
        return analytic_ad1d(mesh.nodes[:, 0], math.exp(z[0]))[:, None]

    return BenchmarkSpec(
        name="ad1d",
        mesh=mesh,
        m_int=int(config.get("m_int", 6)),
        bnd_groups={"left": 1, "right": 1},
        z_dim=1,
        n_fields=1,
        train_grid=[(math.log(e),) for e in train_eps],
        eval_grid=[(math.log(e),) for e in eval_eps],
        lift_of=lambda z: {"left": 1.0, "right": 0.0},
        rhs_of=lambda z, layout, mesh: (None, None),
        target_of=target,
        tolerances={"rel_l2": 0.05, "conservation": 1e-11},
        model_kw=_model_kw(config, embed_dim=32, shape_blocks=2, flux_blocks=2,
                           fourier_features=8),
        z_range=[(math.log(eps_lo) - 1e-9, math.log(eps_hi) + 1e-9)],
    )


def _ad2d_spec(config) -> BenchmarkSpec:
    n_rings = int(config.get("n_rings", 8))
    third = 2.0 * math.pi / 3.0
    arcs = {"arc0": (0.0, third), "arc1": (third, 2 * third),
            "arc2": (2 * third, 2.0 * math.pi)}
    mesh = build_disk_mesh(n_rings, arcs=arcs)
    eps_lo = float(config.get("eps_lo", 0.05))
    eps_hi = float(config.get("eps_hi", 0.5))
    n_train = int(config.get("n_train", 4))
    train_eps = _log_grid(eps_lo, eps_hi, n_train)
    eval_eps = np.sqrt(train_eps[:-1] * train_eps[1:])
    beta = np.array([1.0, 0.0])
    bc = {"arc0": 1.0, "arc1": 0.0, "arc2": 0.0}

    def target(z):
        fld = reference_solve(mesh, AdvectionDiffusion(math.exp(z[0]), beta), bc)
        return fld.values[:, None]

    return BenchmarkSpec(
        name="ad2d",
        mesh=mesh,
        m_int=int(config.get("m_int", 8)),
        bnd_groups={"arc0": 1, "arc1": 1, "arc2": 1},
        z_dim=1,
        n_fields=1,
        train_grid=[(math.log(e),) for e in train_eps],
        eval_grid=[(math.log(e),) for e in eval_eps],
        lift_of=lambda z: bc,
        rhs_of=lambda z, layout, mesh: (None, None),
        target_of=target,
        tolerances={"rel_l2": 0.2, "conservation": 1e-11},
        model_kw=_model_kw(config, embed_dim=32, shape_blocks=2, flux_blocks=2,
                           fourier_features=8),
        z_range=[(math.log(eps_lo) - 1e-9, math.log(eps_hi) + 1e-9)],
    )


def _point_charge_spec(config) -> BenchmarkSpec:
    n_rings = int(config.get("n_rings", 10))
    mesh = build_disk_mesh(n_rings)
    n_train = int(config.get("n_train", 12))
    n_eval = int(config.get("n_eval", 64))
    rng = np.random.default_rng(int(config.get("grid_seed", 0)))
    # random charge locations, area-uniform on a disk strictly inside the
    # shell (deterministic per grid_seed so reruns are byte-identical)
    r_tr = 0.75 * np.sqrt(rng.random(n_train))
    a_tr = 2.0 * math.pi * rng.random(n_train)
    train_xq = [(r * math.cos(a), r * math.sin(a)) for r, a in zip(r_tr, a_tr)]
    radii = 0.15 + 0.6 * rng.random(n_eval)
    thetas = 2.0 * math.pi * rng.random(n_eval)
    eval_xq = [
        (r * math.cos(t), r * math.sin(t)) for r, t in zip(radii, thetas)
    ]

    def rhs_of(z, layout, mesh):
        col = p1_basis_matrix(mesh, np.array([z]))  # (N, 1)
        m_int = layout.m_int

        def rhs_fn(tape, w_t):
            full = ad.matmul(w_t, tape.constant(col))
            return ad.slice_(full, (slice(0, m_int), slice(None)))

        return None, rhs_fn

    def target(z):
        fld = reference_solve(mesh, PointCharge(np.asarray(z)), {"shell": 0.0})
        return fld.values[:, None]

    return BenchmarkSpec(
        name="point_charge",
        mesh=mesh,
        m_int=int(config.get("m_int", 3)),
        bnd_groups={"shell": 1},
        z_dim=2,
        n_fields=1,
        train_grid=train_xq,
        eval_grid=eval_xq,
        lift_of=lambda z: {"shell": 0.0},
        rhs_of=rhs_of,
        target_of=target,
        tolerances={"rel_l2_median": 0.10, "conservation": 1e-11},
        model_kw=_model_kw(config, embed_dim=32, shape_blocks=2, flux_blocks=2,
                           fourier_features=8),
        z_range=[(-1.0, 1.0), (-1.0, 1.0)],
    )


def _sod_spec(config) -> BenchmarkSpec:
    nx = int(config.get("nx", 32))
    nt = int(config.get("nt", 16))
    half_l = 3.5
    mesh = build_structured_tri_mesh(nx, nt, bbox=((-half_l, half_l), (0.0, 1.0)))
    # split the initial-time boundary at the diaphragm; the final-time group
    # stays but gets no essential condition (free outflow)
    groups = dict(mesh.boundary_groups)
    bottom = groups.pop("bottom")
    x_bottom = mesh.nodes[bottom, 0]
    groups["bottom_l"] = bottom[x_bottom < 0.0]
    groups["bottom_r"] = bottom[x_bottom >= 0.0]
    mesh = SimplicialMesh(2, mesh.nodes, mesh.simplices, groups)

    gammas = np.linspace(2.0, 7.0, int(config.get("n_train", 6)))
    eval_gammas = 0.5 * (gammas[:-1] + gammas[1:])

    def lift_of(z):
        g = z[0]
        left = np.array([3.0, 0.0, 3.0 / (g - 1.0)])
        right = np.array([1.0, 0.0, 1.0 / (g - 1.0)])
        return {"left": left, "right": right, "bottom_l": left, "bottom_r": right}

    def target(z):
        g = z[0]
        vals = np.empty((len(mesh.nodes), 3))
        for i, (x, t) in enumerate(mesh.nodes):
            vals[i] = sod_exact(x, t, g).as_array()
        return vals

    return BenchmarkSpec(
        name="sod",
        mesh=mesh,
        m_int=int(config.get("m_int", 8)),
        bnd_groups={"left": 1, "right": 1, "bottom_l": 1, "bottom_r": 1},
        z_dim=1,
        n_fields=3,
        train_grid=[(g,) for g in gammas],
        eval_grid=[(g,) for g in eval_gammas],
        lift_of=lift_of,
        rhs_of=lambda z, layout, mesh: (None, None),
        target_of=target,
        tolerances={"conservation": 1e-11},
        model_kw=_model_kw(config, embed_dim=32, shape_blocks=2, flux_blocks=2,
                           fourier_features=8),
        z_range=[(2.0, 7.0)],
    )


def _regression_spec(config) -> BenchmarkSpec:
    # raw conditioning trunk, no mesh or solver
    return BenchmarkSpec(
        name="regression1d",
        mesh=None,
        m_int=1,
        bnd_groups={},
        z_dim=2,
        n_fields=1,
        train_grid=[],
        eval_grid=[(3.45, 0.05), (4.41, 0.20), (5.68, 0.40), (8.21, 0.80)],
        lift_of=lambda z: {},
        rhs_of=lambda z, layout, mesh: (None, None),
        target_of=lambda z: None,
        tolerances={"mse": 1e-3},
        model_kw=_model_kw(
            config, embed_dim=64, shape_blocks=2, flux_blocks=1,
            head_mode="linear", with_flux=False,
        ),
        # sampling range inferred from the reported example values
        z_range=[(3.0, 9.0), (0.05, 0.8)],
    )


def _model_kw(config, **defaults):
    kw = dict(defaults)
    for key in ("embed_dim", "n_heads", "ffn_factor", "shape_blocks",
                "flux_blocks", "fourier_features"):
        if key in config:
            kw[key] = int(config[key])
    return kw


def benchmark_spec(name: str, config: dict | None = None) -> BenchmarkSpec:
    config = config or {}
    builders = {
        "ad1d": _ad1d_spec,
        "ad2d": _ad2d_spec,
        "point_charge": _point_charge_spec,
        "sod": _sod_spec,
        "regression1d": _regression_spec,
    }
    if name not in builders:
        raise UnknownBenchmarkError(
            f"unknown benchmark {name!r}; choose from {', '.join(BENCHMARK_NAMES)}"
        )
    return builders[name](config)


# ---------------------------------------------------------------------------
# wiring a spec into the trainer
# ---------------------------------------------------------------------------


def build_problem(spec: BenchmarkSpec) -> TrainingProblem:
    layout = split_dirichlet(spec.mesh, spec.m_int, spec.bnd_groups)
    return TrainingProblem(
        mesh=spec.mesh,
        fine=FineOperators.from_mesh(spec.mesh),
        layout=layout,
        n_fields=spec.n_fields,
    )


def model_config(spec: BenchmarkSpec) -> ModelConfig:
    dim = spec.mesh.dim if spec.mesh is not None else 1
    return ModelConfig(
        in_dim=dim,
        z_dim=spec.z_dim,
        m_int=spec.m_int,
        n_fields=spec.n_fields,
        area_dim=dim,
        m_bnd_head=0,
        **spec.model_kw,
    )


def build_dataset(spec: BenchmarkSpec, problem: TrainingProblem):
    samples, cases = [], []
    for z in spec.train_grid:
        rhs, rhs_fn = spec.rhs_of(z, problem.layout, spec.mesh)
        samples.append(
            TrainingSample(z=z, points=spec.mesh.nodes, targets=spec.target_of(z),
                           lift=spec.lift_of(z), rhs=rhs, rhs_fn=rhs_fn)
        )
    for z in spec.eval_grid:
        rhs, rhs_fn = spec.rhs_of(z, problem.layout, spec.mesh)
        cases.append(
            EvalCase(z=z, u_target=spec.target_of(z),
                     lift=spec.lift_of(z), rhs=rhs, rhs_fn=rhs_fn)
        )
    return samples, cases


# ---------------------------------------------------------------------------
# diag mode: the structural suite with untrained parameters
# ---------------------------------------------------------------------------


def _diag_rows(spec: BenchmarkSpec, config: dict) -> list:
    seed = int(config.get("seed", 0))
    problem = build_problem(spec)
    state = initial_state(seed, model_config(spec), problem=problem)
    rng = np.random.default_rng(seed + 1)
    # randomize the flux head: structure must hold for arbitrary parameters
    arrs = state.params.arrays
    arrs["flux.head.w"] = rng.standard_normal(arrs["flux.head.w"].shape) * 0.1

    z = spec.train_grid[0] if spec.train_grid else spec.eval_grid[0]
    comb = evaluate_shape_matrix(state.params, spec.mesh, z, problem.layout)
    rows = []

    colsum = np.abs(comb.w.sum(axis=0) - 1.0).max()
    rows.append(_check("partition_of_unity", colsum, 1e-12))

    sample = TrainingSample(
        z=z,
        points=spec.mesh.nodes[:1],
        targets=np.zeros((1, spec.n_fields)),
        lift=spec.lift_of(z),
        rhs=spec.rhs_of(z, problem.layout, spec.mesh)[0],
        rhs_fn=spec.rhs_of(z, problem.layout, spec.mesh)[1],
    )
    system = build_system(
        spec.mesh, problem.fine, comb, state.params, z,
        sample.lift if sample.lift is not None else {},
        rhs=sample.rhs, rhs_fn=sample.rhs_fn, n_fields=spec.n_fields,
    )

    ones = np.ones((comb.m, 1))
    rows.append(_check("laplacian_kills_constants",
                       np.abs(system.complex.laplacian @ ones).max(), 1e-10))

    from .complexes import conservation_report
    from .solver import _nn_value, full_state

    u_rand = full_state(system, rng.standard_normal(
        (problem.layout.m_int, spec.n_fields)))
    flux_total = system.epsilon()[None, :] * (
        system.complex.delta0 @ u_rand
    ) + _nn_value(system, u_rand)
    rep = conservation_report(flux_total, system.complex)
    rows.append(_check("conservation_antisymmetry",
                       rep.interior_flux_antisymmetry_error, 1e-11))

    u_test = rng.standard_normal(comb.m)
    grad_err = _projection_error(system, u_test)
    rows.append(_check("gradient_reconstruction", grad_err, 1e-10))

    fd_err = _gradient_probe(problem, state, sample)
    rows.append(_check("parameter_gradient_fd", fd_err, 1e-4))
    return rows


def _projection_error(system, u_hat) -> float:
    """M1-weighted defect of the projected gradient against delta0 u."""
    cpx = system.complex
    proj = project_gradient(u_hat, cpx)
    d0u = cpx.delta0 @ u_hat
    return float(np.abs(cpx.m1 @ (proj - d0u)).max())


def _gradient_probe(problem, state, sample) -> float:
    """FD check of one flux-head gradient coordinate on a tiny data setup."""
    pts = problem.mesh.nodes[:3]
    tg = np.full((3, problem.n_fields), 0.3)
    probe = TrainingSample(z=sample.z, points=pts, targets=tg,
                           lift=sample.lift, rhs=sample.rhs, rhs_fn=sample.rhs_fn)

    def loss_of(params):
        comb = evaluate_shape_matrix(params, problem.mesh, probe.z, problem.layout)
        system = build_system(
            problem.mesh, problem.fine, comb, params, probe.z,
            probe.lift if probe.lift is not None else {},
            rhs=probe.rhs, rhs_fn=probe.rhs_fn, n_fields=problem.n_fields,
        )
        result = newton_solve(system, tol=1e-13)
        return system, result, data_loss(system, result, (pts, tg))

    system, result, _ = loss_of(state.params)
    lam = adjoint_solve(system, result, (pts, tg))
    _, grads = parameter_gradient(system, result, lam, (pts, tg))
    name, idx = "flux.head.w", (0, 0)
    h = 1e-5
    pp, pm = state.params.copy(), state.params.copy()
    pp.arrays[name][idx] += h
    pm.arrays[name][idx] -= h
    fd = (loss_of(pp)[2] - loss_of(pm)[2]) / (2 * h)
    an = grads[name][idx]
    return abs(fd - an) / max(abs(fd), abs(an), 1e-10)


def _check(name, value, tol):
    return {
        "check": name,
        "value": float(value),
        "tolerance": float(tol),
        "status": "pass" if value <= tol else "FAIL",
    }


def _diag_regression(config: dict) -> list:
    spec = _regression_spec(config)
    cfg = ModelConfig(in_dim=1, z_dim=2, m_int=1, **spec.model_kw)
    params = nets.init_params(int(config.get("seed", 0)), cfg)
    xs = np.linspace(0.0, 1.0, 32)[:, None]
    tape = Tape()
    pt = nets.bind_params(tape, params, trainable=True)
    out = nets.shape_function_forward(tape, xs, (3.45, 0.05), params, pt=pt)
    rows = [_check("forward_finite", 0.0 if np.isfinite(out.data).all() else 1.0,
                   0.5)]
    tg = regression_target(xs[:, 0], (3.45, 0.05))[:, None]
    diff = ad.sub(out, tape.constant(tg))
    loss = ad.scale(ad.reduce_sum(ad.mul(diff, diff)), 0.5 / len(xs))
    grads = tape.backward(loss)
    name = "shape.head.w"
    g_an = grads.get(pt[name].tid)
    h = 1e-5

    def loss_at(params2):
        t2 = Tape()
        p2 = nets.bind_params(t2, params2, trainable=False)
        o2 = nets.shape_function_forward(t2, xs, (3.45, 0.05), params2, pt=p2)
        return 0.5 / len(xs) * float(np.sum((o2.data - tg) ** 2))

    pp, pm = params.copy(), params.copy()
    pp.arrays[name][0, 0] += h
    pm.arrays[name][0, 0] -= h
    fd = (loss_at(pp) - loss_at(pm)) / (2 * h)
    rel = abs(fd - g_an[0, 0]) / max(abs(fd), abs(g_an[0, 0]), 1e-10)
    rows.append(_check("mse_gradient_fd", rel, 1e-4))
    return rows


# ---------------------------------------------------------------------------
# regression training loop (no solver in it)
# ---------------------------------------------------------------------------


def train_regression(config: dict, progress=None):
    """Plain stochastic MSE regression with the conditioning trunk."""
    spec = _regression_spec(config)
    cfg = ModelConfig(in_dim=1, z_dim=2, m_int=1, **spec.model_kw)
    seed = int(config.get("seed", 0))
    params = nets.init_params(seed, cfg)
    rng = np.random.default_rng(seed)
    steps = int(config.get("steps", 20_000))
    batch = int(config.get("batch", 256))
    optimizer = str(config.get("optimizer", "adam"))
    defaults = SHAMPOO_DEFAULTS if optimizer == "shampoo" else ADAM_DEFAULTS
    opt_cfg = {"lr": float(config.get("lr", defaults["lr"]))}
    if "precondition_every" in config:
        opt_cfg["precondition_every"] = int(config["precondition_every"])
    (z1_lo, z1_hi), (z2_lo, z2_hi) = spec.z_range
    moments = {"t": np.zeros((), np.int64)}
    losses = []
    for step in range(steps):
        z = (rng.uniform(z1_lo, z1_hi), rng.uniform(z2_lo, z2_hi))
        xs = rng.random((batch, 1))
        tg = regression_target(xs[:, 0], z)[:, None]
        tape = Tape()
        pt = nets.bind_params(tape, params, trainable=True)
        out = nets.shape_function_forward(tape, xs, z, params, pt=pt)
        diff = ad.sub(out, tape.constant(tg))
        loss_t = ad.scale(ad.reduce_sum(ad.mul(diff, diff)), 1.0 / batch)
        grads_t = tape.backward(loss_t)
        grads = {
            k: grads_t[t.tid]
            for k, t in pt.items()
            if t.tid in grads_t and k not in params.constant_names
        }
        arrays, moments = apply_gradient(params.arrays, grads, moments,
                                         optimizer, opt_cfg)
        params = dataclasses.replace(params, arrays=arrays)
        losses.append(np.asarray(loss_t.data).reshape(()).item())
        if progress and (step + 1) % progress == 0:
            log.info("regression step %d: loss %.3e", step + 1,
                     np.mean(losses[-progress:]))
    return params, losses


def regression_mse(params, z_list, n_points=512):
    """Mean squared error on a deterministic grid for the given conditions."""
    xs = np.linspace(0.0, 1.0, n_points)[:, None]
    total = 0.0
    for z in z_list:
        tape = Tape()
        pt = nets.bind_params(tape, params, trainable=False)
        out = nets.shape_function_forward(tape, xs, z, params, pt=pt)
        tg = regression_target(xs[:, 0], z)[:, None]
        total += float(np.mean((out.data - tg) ** 2))
    return total / len(z_list)


# ---------------------------------------------------------------------------
# run_benchmark
# ---------------------------------------------------------------------------


def _out_dir(config: dict) -> Path:
    out = os.environ.get("WHITNEYROM_OUT") or config.get("out_dir", "bench_out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_benchmark(name: str, config: dict | None = None, mode: str = "diag") -> int:
    """Returns a process exit code: 0 pass, 1 tolerance violation, 2 usage."""
    config = dict(config or {})
    try:
        spec = benchmark_spec(name, config)
    except UnknownBenchmarkError as err:
        print(str(err), file=sys.stderr)
        return 2
    if mode not in ("train", "eval", "diag"):
        print(f"unknown mode {mode!r}; choose train, eval, or diag",
              file=sys.stderr)
        return 2
    out = _out_dir(config)

    if mode == "diag":
        rows = (_diag_regression(config) if name == "regression1d"
                else _diag_rows(spec, config))
        export_csv(rows, out / f"{name}_diag.csv")
        failed = [r for r in rows if r["status"] != "pass"]
        for r in rows:
            log.info("diag %s: %s = %.3e (tol %.1e) %s",
                     name, r["check"], r["value"], r["tolerance"], r["status"])
        return 1 if failed else 0

    if name == "regression1d":
        return _run_regression(spec, config, mode, out)

    problem = build_problem(spec)
    samples, cases = build_dataset(spec, problem)

    if mode == "train":
        fit_cfg = {
            "epochs": int(config.get("epochs", 200)),
            "out_dir": out,
            "seed": int(config.get("seed", 0)),
            "decay_begin": int(config.get("decay_begin",
                                          max(1, int(config.get("epochs", 200)) // 2))),
            "decay_len": int(config.get("decay_len",
                                        max(1, int(config.get("epochs", 200)) // 4))),
            "checkpoint_every": int(config.get("checkpoint_every", 0) or
                                    max(1, int(config.get("epochs", 200)) // 5)),
        }
        if "optimizer" in config:
            fit_cfg["optimizer"] = config["optimizer"]
        if "lr" in config:
            fit_cfg["lr"] = config["lr"]
        if "start_rate" in config:
            fit_cfg["start_rate"] = float(config["start_rate"])
        state = initial_state(
            fit_cfg["seed"], model_config(spec),
            optimizer=str(config.get("optimizer", "adam")),
            opt_config={"lr": float(config["lr"])} if "lr" in config else None,
            problem=problem,
        )
        result = fit(fit_cfg, samples, problem, state)
        log.info("training done: %d epochs, %d newton failures, final %s",
                 result.epochs_run, result.newton_failures,
                 result.final_checkpoint)
        return 0

    # eval
    ckpt = config.get("checkpoint")
    if not ckpt:
        print("eval mode needs a checkpoint path", file=sys.stderr)
        return 2
    if not Path(ckpt).exists():
        print(f"checkpoint not found: {ckpt}", file=sys.stderr)
        return 2
    state = load_checkpoint(ckpt)
    rows = evaluate_errors(state, cases, problem)
    table = []
    taus = []
    for case, row in zip(cases, rows):
        rec = {}
        for i, comp in enumerate(row["z"]):
            rec[f"z{i}" if spec.z_dim > 1 else "epsilon"] = (
                math.exp(comp) if name in ("ad1d", "ad2d") else comp
            )
        rec["rel_l2"] = (float("nan") if row["newton_failed"]
                         else max(row["rel_l2"]))
        rec["conservation"] = (float("nan") if row["newton_failed"]
                               else row["conservation_residual"])
        rec["tau"] = _tau_for(spec, problem, state, case)
        rec["newton_failed"] = row["newton_failed"]
        table.append(rec)
        taus.append(rec["tau"])
    export_csv(table, out / f"{name}_errors.csv")
    _dump_field(spec, problem, state, cases[0], out / f"{name}_field.csv")

    ok = True
    finite = [r for r in table if not r["newton_failed"]]
    if not finite:
        ok = False
    if "rel_l2" in spec.tolerances and finite:
        ok &= max(r["rel_l2"] for r in finite) <= spec.tolerances["rel_l2"]
    if "rel_l2_median" in spec.tolerances and finite:
        ok &= (float(np.median([r["rel_l2"] for r in finite]))
               <= spec.tolerances["rel_l2_median"])
    if "conservation" in spec.tolerances and finite:
        ok &= max(r["conservation"] for r in finite) <= spec.tolerances["conservation"]
    return 0 if ok else 1


def _tau_for(spec, problem, state, case) -> float:
    sample = TrainingSample(
        z=case.z, points=spec.mesh.nodes[:1],
        targets=np.zeros((1, spec.n_fields)), lift=case.lift,
        rhs=case.rhs, rhs_fn=case.rhs_fn,
    )
    comb = evaluate_shape_matrix(state.params, spec.mesh, sample.z, problem.layout)
    system = build_system(
        spec.mesh, problem.fine, comb, state.params, sample.z,
        sample.lift if sample.lift is not None else {},
        rhs=sample.rhs, rhs_fn=sample.rhs_fn, n_fields=spec.n_fields,
    )
    try:
        rep = wellposedness_diagnostic(system, n_samples=120, seed=0)
        return rep.tau
    except Exception as err:  # diagnostic failures must not kill the sweep
        log.warning("wellposedness diagnostic failed for z=%s: %s",
                    sample.z, err)
        return float("nan")


def _dump_field(spec, problem, state, case, path):
    comb = evaluate_shape_matrix(state.params, spec.mesh, case.z, problem.layout)
    system = build_system(
        spec.mesh, problem.fine, comb, state.params, case.z,
        case.lift if case.lift is not None else {},
        rhs=case.rhs, rhs_fn=case.rhs_fn, n_fields=spec.n_fields,
    )
    try:
        result = newton_solve(system)
    except Exception:
        return
    u_model = comb.w.T @ result.u_hat
    target = np.asarray(case.u_target, dtype=np.float64)
    if target.ndim == 1:
        target = target[:, None]
    rows = []
    for i, xy in enumerate(spec.mesh.nodes):
        rec = {f"x{j}": xy[j] for j in range(spec.mesh.dim)}
        for f_idx in range(spec.n_fields):
            rec[f"u_model_{f_idx}"] = u_model[i, f_idx]
            rec[f"u_target_{f_idx}"] = target[i, f_idx]
        rows.append(rec)
    export_csv(rows, path)


def _run_regression(spec, config, mode, out: Path) -> int:
    if mode == "train":
        params, losses = train_regression(config, progress=1000)
        state = initial_state(int(config.get("seed", 0)),
                              params.config)
        state = dataclasses.replace(state, params=params)
        save_checkpoint(state, out / "ckpt-final.bin")
        export_csv(
            [{"step": i, "loss": v} for i, v in enumerate(losses)],
            out / "regression1d_loss.csv",
        )
        return 0
    ckpt = config.get("checkpoint")
    if not ckpt or not Path(ckpt).exists():
        print("eval mode needs an existing checkpoint path", file=sys.stderr)
        return 2
    state = load_checkpoint(ckpt)
    mse = regression_mse(state.params, spec.eval_grid)
    export_csv([{"mse": mse}], out / "regression1d_errors.csv")
    return 0 if mse <= spec.tolerances["mse"] else 1
