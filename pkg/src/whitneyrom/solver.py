"""Nonlinear coarse conservation-law solver with adjoint-based gradients.

The unknown is the coarse 0-form state u (interior DOFs; Dirichlet DOFs are
pinned by the lift).  The residual on the interior rows is

    r(u) = eps * L u  +  delta0^T M1 NN(u)  -  f,        eps = softplus(s_eps)

with L the Hodge Laplacian of the coarse complex and NN the pairwise flux
network (or an injected override for stub nonlinearities).  Newton's method
with Armijo backtracking solves r = 0; the Jacobian is eps*L plus the flux
term's derivative, extracted by one reverse pass per interior row over the
flux tape.  The factorization of the final Jacobian is kept for the adjoint
solve J^T lambda = -g, and parameter gradients come from one reverse pass over
a tape that recomputes everything theta touches: the shape matrix W, the
coarsening contractions (M1, L, pair areas), the source projection, the flux
network, and eps.

The well-posedness diagnostic reports tau = C_p * C_L_hat / eps (the residual
above divided through by eps matches the contraction form whose smallness
condition is eps^-1-scaled), with C_L_hat a sampled - hence lower-bound -
Lipschitz estimate of NN between the M0 and M1 norms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import sparse
from scipy.linalg import LinAlgError, lu_factor, lu_solve

from . import autodiff as ad
from . import nets
from .autodiff import AutodiffError, Tape, Tensor
from .complexes import (
    CoarseComplex,
    ComplexError,
    ConvexCombination,
    FineOperators,
    LiftLayout,
    build_coarse_complex,
    coarsen_mass1,
    evaluate_shape_matrix,
    graph_gradient,
    hodge_laplacian,
    poincare_constant,
)
from .mesh import SimplicialMesh, p1_basis_matrix
from .nets import ModelParams

__all__ = [
    "SolverError",
    "ResidualSystem",
    "NewtonTrace",
    "NewtonResult",
    "WellPosednessReport",
    "build_system",
    "full_state",
    "assemble_residual",
    "newton_solve",
    "adjoint_solve",
    "parameter_gradient",
    "data_loss",
    "wellposedness_diagnostic",
]

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class ResidualSystem:
    """Everything needed to evaluate r(u) for one (W, Z, rhs, lift)."""

    mesh: SimplicialMesh
    fine: FineOperators
    comb: ConvexCombination
    complex: CoarseComplex
    params: ModelParams
    z: NDArray
    layout: LiftLayout
    rhs: NDArray  # (m_int, F) source projection onto interior partitions
    lift: NDArray  # (m_bnd, F) fixed boundary DOF values
    flux_override: Callable | None = None  # (tape, u_t, areas_t, pt) -> (P, F)
    rhs_fn: Callable | None = None  # (tape, w_t) -> (m_int, F), for theta-dependent sources
    div_matrix: NDArray = field(default=None)  # (M, P): delta0^T M1, dense

    def __post_init__(self) -> None:
        self.z = np.atleast_1d(np.asarray(self.z, dtype=np.float64))
        self.rhs = np.asarray(self.rhs, dtype=np.float64)
        self.lift = np.asarray(self.lift, dtype=np.float64)
        if self.rhs.ndim == 1:
            self.rhs = self.rhs[:, None]
        if self.lift.ndim == 1:
            self.lift = self.lift[:, None]
        lay = self.layout
        if self.rhs.shape[0] != lay.m_int:
            raise SolverError(f"rhs has {self.rhs.shape[0]} rows, layout has m_int={lay.m_int}")
        if self.lift.shape[0] != lay.m_bnd:
            raise SolverError(f"lift has {self.lift.shape[0]} rows, layout has m_bnd={lay.m_bnd}")
        if not (np.isfinite(self.rhs).all() and np.isfinite(self.lift).all()):
            raise SolverError("rhs/lift must be finite")
        if self.div_matrix is None:
            # dense (M, P): sparse delta0^T against the dense coarse 1-form mass
            self.div_matrix = np.asarray(self.complex.delta0.T @ self.complex.m1)

    @property
    def n_fields(self) -> int:
        return self.rhs.shape[1]

    def epsilon(self) -> NDArray:
        return np.logaddexp(0.0, self.params.arrays["s_eps"])


def build_system(
    mesh: SimplicialMesh,
    fine: FineOperators,
    comb: ConvexCombination,
    params: ModelParams,
    z,
    lift_values,
    rhs: NDArray | None = None,
    flux_override: Callable | None = None,
    rhs_fn: Callable | None = None,
    n_fields: int = 1,
) -> ResidualSystem:
    """Assemble the coarse complex for W and wire up a residual system.

    Args:
        lift_values: mapping group label -> boundary value(s), or an
            (m_bnd, F) array already in layout order.
        rhs: (m_int, F) source projection; default zero.
    """
    lay = comb.layout
    cpx = build_coarse_complex(comb, fine)
    if isinstance(lift_values, dict):
        lift = lay.lift_vector(lift_values, n_fields=n_fields)
    else:
        lift = np.asarray(lift_values, dtype=np.float64)
        if lift.ndim == 1:
            lift = lift[:, None]
    if rhs_fn is not None:
        if rhs is not None:
            raise SolverError("give either rhs or rhs_fn, not both")
        # evaluate the theta-dependent source once at the stored W so the
        # numpy residual agrees with the gradient tape's rebuilt value
        tape = Tape()
        rhs = np.asarray(rhs_fn(tape, tape.constant(comb.w)).data, dtype=np.float64)
    if rhs is None:
        rhs = np.zeros((lay.m_int, lift.shape[1] if lay.m_bnd else n_fields))
    return ResidualSystem(
        mesh=mesh,
        fine=fine,
        comb=comb,
        complex=cpx,
        params=params,
        z=z,
        layout=lay,
        rhs=rhs,
        lift=lift,
        flux_override=flux_override,
        rhs_fn=rhs_fn,
    )


def full_state(system: ResidualSystem, u_int: NDArray) -> NDArray:
    """Stack interior DOFs on top of the fixed lift values: (M, F)."""
    u_int = np.asarray(u_int, dtype=np.float64)
    if u_int.ndim == 1:
        u_int = u_int[:, None]
    return np.vstack([u_int, system.lift])


def _flux_tensor(system: ResidualSystem, tape: Tape, u_t: Tensor, areas, pt) -> Tensor:
    areas_t = areas if isinstance(areas, Tensor) else tape.constant(np.asarray(areas))
    if system.flux_override is not None:
        return system.flux_override(tape, u_t, areas_t, pt)
    return nets.pairwise_flux_forward(tape, u_t, areas_t, system.z, system.params, pt=pt)


def _nn_value(system: ResidualSystem, u_full: NDArray) -> NDArray:
    tape = Tape()
    pt = nets.bind_params(tape, system.params, trainable=False)
    u_t = tape.constant(u_full)
    try:
        return _flux_tensor(system, tape, u_t, system.complex.pair_areas, pt).data
    except AutodiffError as e:
        raise SolverError(f"non-finite flux network output: {e}") from e


def assemble_residual(u_hat: NDArray, system: ResidualSystem) -> NDArray:
    """r = eps*L u + delta0^T M1 NN(u) - f on the interior rows; pure function.

    ``u_hat`` is the full (M, F) state including lifted boundary rows.
    """
    u_hat = np.asarray(u_hat, dtype=np.float64)
    if u_hat.ndim == 1:
        u_hat = u_hat[:, None]
    m_int = system.layout.m_int
    eps = system.epsilon()
    lin = (system.complex.laplacian @ u_hat)[:m_int] * eps[None, :]
    nn = _nn_value(system, u_hat)
    div_nn = (system.div_matrix @ nn)[:m_int]
    return lin + div_nn - system.rhs


@dataclass
class NewtonTrace:
    residual_norms: list
    backtracks: list
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.backtracks)


@dataclass
class NewtonResult:
    u_hat: NDArray  # (M, F) full state
    trace: NewtonTrace
    jacobian: NDArray
    lu: tuple  # LU factorization of the Jacobian at u_hat


def _jacobian(system: ResidualSystem, u_full: NDArray) -> NDArray:
    """eps*L + d(delta0^T M1 NN)/du on interior rows/cols, flattened (i,f)."""
    m_int = system.layout.m_int
    f = system.n_fields
    eps = system.epsilon()
    l_ii = system.complex.laplacian[:m_int, :m_int]
    jac = np.kron(l_ii, np.eye(f)) * np.tile(eps, m_int)[:, None]

    tape = Tape()
    pt = nets.bind_params(tape, system.params, trainable=False)
    u_t = tape.tensor(u_full, requires_grad=True)
    nn = _flux_tensor(system, tape, u_t, system.complex.pair_areas, pt)
    y = ad.matmul(tape.constant(system.div_matrix[:m_int]), nn)  # (m_int, F)
    seed = np.zeros_like(y.data)
    for i in range(m_int):
        for g in range(f):
            seed[...] = 0.0
            seed[i, g] = 1.0
            grads = tape.backward(y, seed=seed.copy())
            du = grads.get(u_t.tid)
            if du is not None:
                jac[i * f + g] += du[:m_int].ravel()
    return jac


def newton_solve(
    system: ResidualSystem,
    u0: NDArray | None = None,
    tol: float = 1e-10,
    max_iter: int = 50,
    armijo: dict | None = None,
) -> NewtonResult:
    """Newton with Armijo backtracking on the merit 1/2 ||r||^2.

    The default start solves the linear part once with the flux frozen at the
    lift state (exact for an identity-start model).  Convergence criterion:
    ||r||_2 <= tol * max(1, ||f||_2).  The returned result carries the LU
    factorization of the Jacobian at the solution for adjoint reuse.

    Raises:
        SolverError: iteration/backtracking budget exceeded (carries the
            trace) or a singular Jacobian (suggests null-space stabilization).
    """
    arm = {"c": 1e-4, "rho": 0.5, "max_backtracks": 30}
    if armijo:
        arm.update(armijo)
    lay = system.layout
    m_int, f = lay.m_int, system.n_fields
    target = tol * max(1.0, float(np.linalg.norm(system.rhs)))

    if u0 is None:
        u_start = np.vstack([np.zeros((m_int, f)), system.lift])
        nn0 = _nn_value(system, u_start)
        eps = system.epsilon()
        l_ii = system.complex.laplacian[:m_int, :m_int]
        l_ib = system.complex.laplacian[:m_int, m_int:]
        rhs_lin = (
            system.rhs
            - (system.div_matrix @ nn0)[:m_int]
            - (l_ib @ system.lift) * eps[None, :]
        )
        try:
            u_int = np.linalg.solve(
                np.kron(l_ii, np.eye(f)) * np.tile(eps, m_int)[:, None],
                rhs_lin.ravel(),
            ).reshape(m_int, f)
        except LinAlgError as e:
            raise SolverError(
                "linear presolve hit a singular Laplacian block; consider null-space "
                "stabilization (pin a partition value or add a mean constraint)"
            ) from e
    else:
        u0 = np.asarray(u0, dtype=np.float64)
        if u0.ndim == 1:
            u0 = u0[:, None]
        u_int = u0[:m_int].copy()  # accept either interior-only or full states

    norms: list[float] = []
    backtracks: list[int] = []
    u = np.vstack([u_int, system.lift])
    r = assemble_residual(u, system)
    norms.append(float(np.linalg.norm(r)))

    for _ in range(max_iter):
        if norms[-1] <= target:
            break
        jac = _jacobian(system, u)
        try:
            step = np.linalg.solve(jac, -r.ravel()).reshape(m_int, f)
        except LinAlgError as e:
            raise SolverError(
                "singular Jacobian in Newton step; consider null-space stabilization "
                "(pin a partition value or add a mean constraint)",
                trace=NewtonTrace(norms, backtracks, False),
            ) from e
        phi0 = 0.5 * norms[-1] ** 2
        alpha = 1.0
        n_back = 0
        while True:
            u_try = u.copy()
            u_try[:m_int] += alpha * step
            r_try = assemble_residual(u_try, system)
            phi = 0.5 * float(np.linalg.norm(r_try)) ** 2
            if phi <= phi0 + arm["c"] * alpha * (-2.0 * phi0):
                break
            n_back += 1
            if n_back > arm["max_backtracks"]:
                raise SolverError(
                    f"Armijo backtracking exhausted after {arm['max_backtracks']} halvings",
                    trace=NewtonTrace(norms, backtracks, False),
                )
            alpha *= arm["rho"]
        u = u_try
        r = r_try
        norms.append(float(np.linalg.norm(r)))
        backtracks.append(n_back)

    if norms[-1] > target:
        raise SolverError(
            f"Newton did not reach ||r|| <= {target:.3e} in {max_iter} iterations "
            f"(final {norms[-1]:.3e})",
            trace=NewtonTrace(norms, backtracks, False),
        )
    jac = _jacobian(system, u)
    try:
        lu = lu_factor(jac)
    except LinAlgError as e:
        raise SolverError(
            "Jacobian at the solution is singular; consider null-space stabilization",
            trace=NewtonTrace(norms, backtracks, True),
        ) from e
    return NewtonResult(
        u_hat=u, trace=NewtonTrace(norms, backtracks, True), jacobian=jac, lu=lu
    )


# ---------------------------------------------------------------------------
# adjoint and parameter gradient
# ---------------------------------------------------------------------------


def _as_points_targets(data, dim: int, n_fields: int):
    if isinstance(data, tuple) and len(data) == 2 and not isinstance(data[0], tuple):
        xs, tg = data
    else:
        xs = [d[0] for d in data]
        tg = [d[1] for d in data]
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if xs.shape[1] != dim:
        xs = xs.reshape(-1, dim)
    tg = np.asarray(tg, dtype=np.float64).reshape(len(xs), n_fields)
    return xs, tg


def _coarse_basis_at(system: ResidualSystem, xs: NDArray) -> NDArray:
    """(M, D) values of the coarse partition functions at the data points."""
    return system.comb.w @ p1_basis_matrix(system.mesh, xs)


def data_loss(system: ResidualSystem, result: NewtonResult, data) -> float:
    xs, tg = _as_points_targets(data, system.mesh.dim, system.n_fields)
    psi = _coarse_basis_at(system, xs)  # (M, D)
    misfit = psi.T @ result.u_hat - tg
    return 0.5 * float(np.sum(misfit**2))


def adjoint_solve(system: ResidualSystem, result: NewtonResult, data) -> NDArray:
    """Solve J^T lambda = -g with the misfit projected onto the coarse basis.

    g_i = sum_d (u(x_d) - u_target_d) * psi_i(x_d) on the interior rows; the
    factorization from the final Newton step is reused.
    """
    m_int, f = system.layout.m_int, system.n_fields
    xs, tg = _as_points_targets(data, system.mesh.dim, f)
    psi = _coarse_basis_at(system, xs)
    misfit = psi.T @ result.u_hat - tg  # (D, F)
    g = psi[:m_int] @ misfit  # (m_int, F)
    lam = lu_solve(result.lu, -g.ravel(), trans=1).reshape(m_int, f)
    if not np.isfinite(lam).all():
        raise SolverError("adjoint solve produced non-finite multipliers")
    return lam


def parameter_gradient(
    system: ResidualSystem, result: NewtonResult, lam: NDArray, data,
    dropout_masks=None,
) -> tuple[float, dict[str, NDArray]]:
    """Total-derivative gradient d/dtheta [ data loss + lambda . r_int ].

    One reverse pass over a tape that rebuilds every theta-dependent quantity
    at the converged state: W(theta, Z) and with it M1, L, the pair areas and
    the source projection, the flux network output, and eps.  u* and lambda
    enter as constants, which is exactly the adjoint identity.

    When the forward evaluation used dropout, the same masks must be passed
    here so the rebuilt shape matrix matches the one the system was built with.

    Returns:
        (data_loss_value, gradient dict keyed like params.arrays).
    """
    lay = system.layout
    m_int, f = lay.m_int, system.n_fields
    xs, tg = _as_points_targets(data, system.mesh.dim, f)

    tape = Tape()
    pt = nets.bind_params(tape, system.params, trainable=True)
    try:
        w_t = evaluate_shape_matrix(
            system.params, system.mesh, system.z, lay, tape=tape, pt=pt,
            dropout_masks=dropout_masks,
        )
        if np.abs(w_t.data - system.comb.w).max() > 1e-8:
            raise SolverError(
                "shape matrix stored in the system does not match the one the "
                "current parameters produce; rebuild the system after any "
                "parameter change before computing gradients"
            )
        m1_t, areas_t = coarsen_mass1(
            w_t, system.fine.mass1, system.fine.edges, system.fine.edge_areas
        )
        lap_t = hodge_laplacian(system.complex.delta0, m1_t)

        u_star = tape.constant(result.u_hat)
        eps_t = nets.epsilon_of(pt)  # (F,)
        lin = ad.mul(ad.matmul(lap_t, u_star), eps_t)  # (M, F) row-broadcast
        nn = _flux_tensor(system, tape, u_star, areas_t, pt)
        m1_nn = ad.matmul(m1_t, nn)  # (P, F)
        div_nn = ad.spmm(sparse.csr_array(system.complex.delta0.T), m1_nn)
        r_full = ad.add(lin, div_nn)
        r_int = ad.slice_(r_full, (slice(0, m_int), slice(None)))
        if system.rhs_fn is not None:
            r_int = ad.sub(r_int, system.rhs_fn(tape, w_t))
        else:
            r_int = ad.sub(r_int, tape.constant(system.rhs))
        constraint = ad.reduce_sum(ad.mul(r_int, tape.constant(lam)))

        lam_mat = p1_basis_matrix(system.mesh, xs)  # (N, D)
        psi_t = ad.matmul(w_t, tape.constant(lam_mat))  # (M, D)
        u_at = ad.matmul(ad.transpose(psi_t), u_star)  # (D, F)
        misfit = ad.sub(u_at, tape.constant(tg))
        loss_t = ad.scale(ad.reduce_sum(ad.mul(misfit, misfit)), 0.5)

        total = ad.add(loss_t, constraint)
        grads = tape.backward(total)
    except AutodiffError as e:
        raise SolverError(f"gradient tape failed: {e}") from e

    out = {}
    for k, t in pt.items():
        if k in system.params.constant_names:
            continue
        g = grads.get(t.tid)
        out[k] = g if g is not None else np.zeros_like(system.params.arrays[k])
    return np.asarray(loss_t.data).reshape(()).item(), out


# ---------------------------------------------------------------------------
# well-posedness diagnostic
# ---------------------------------------------------------------------------


@dataclass
class WellPosednessReport:
    c_p: float
    c_l_hat: float
    epsilon: float
    tau: float
    satisfied: bool

    def __post_init__(self) -> None:
        if min(self.c_p, self.c_l_hat, self.epsilon, self.tau) < 0:
            raise SolverError("well-posedness report fields must be nonnegative")


def wellposedness_diagnostic(
    system: ResidualSystem,
    n_samples: int = 200,
    radius: float = 1.0,
    seed: int = 0,
    center: NDArray | None = None,
) -> WellPosednessReport:
    """Sampled contraction constant tau = C_p * C_L_hat / eps.

    C_p comes from the generalized eigenproblem on the Dirichlet-reduced
    blocks (or the mean-constrained full system when nothing is pinned).
    C_L_hat is the max of ||NN(u) - NN(v)||_M1 / ||u - v||_M0 over sampled
    interior-state pairs in a ball of the given radius around the lift state
    — a lower bound on the true Lipschitz constant, reported as such.
    """
    if n_samples < 100:
        raise SolverError("need at least 100 samples for the Lipschitz estimate")
    if radius <= 0:
        raise SolverError(f"degenerate sampling radius {radius!r}")
    lay = system.layout
    m_int, f = lay.m_int, system.n_fields
    lap, m0 = system.complex.laplacian, system.complex.m0
    if lay.m_bnd > 0:
        c_p = poincare_constant(lap[:m_int, :m_int], m0[:m_int, :m_int], null_space="none")
    else:
        c_p = poincare_constant(lap, m0, null_space="constants")

    rng = np.random.default_rng(seed)
    if center is None:
        center = np.vstack([np.zeros((m_int, f)), system.lift])
    m1 = system.complex.m1

    def sample_state():
        d = rng.standard_normal((m_int, f))
        d *= radius * rng.uniform() ** (1.0 / (m_int * f)) / max(np.linalg.norm(d), 1e-300)
        out = center.copy()
        out[:m_int] += d
        return out

    c_l = 0.0
    for _ in range(n_samples):
        u = sample_state()
        v = sample_state()
        du = u - v
        if np.linalg.norm(du) < 1e-14:
            continue
        dnn = _nn_value(system, u) - _nn_value(system, v)
        num = float(np.sqrt(max(np.einsum("pf,pq,qf->", dnn, m1, dnn), 0.0)))
        den = float(np.sqrt(np.einsum("if,ij,jf->", du, m0, du)))
        if den > 0:
            c_l = max(c_l, num / den)

    eps = float(system.epsilon().min())
    tau = c_p * c_l / eps
    satisfied = tau < 1.0
    if not satisfied:
        log.warning("well-posedness diagnostic: tau = %.3g >= 1 (not contractive)", tau)
    return WellPosednessReport(c_p=c_p, c_l_hat=c_l, epsilon=eps, tau=tau, satisfied=satisfied)
