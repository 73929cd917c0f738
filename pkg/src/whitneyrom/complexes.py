"""Coarse Whitney 0/1-form complexes built from convex-combination matrices.

A convex-combination matrix W (coarse x fine, nonnegative, unit column sums
over the coarse index) maps the fine P1 partition of unity to a coarse one:
``psi_i = sum_a W_ia l_a``.  This module assembles the coarse complex on top
of W: the 0-form mass M0, the 1-form mass M1 over canonical partition pairs,
the graph gradient delta0, and the Hodge Laplacian L = delta0^T M1 delta0 —
together with the structure diagnostics (conservation report, Poincare
constant) and the Dirichlet lift bookkeeping.

Orientation conventions (fixed once, used everywhere):
    * Canonical coarse pairs (p, q) with p < q.  The coarse 1-form basis
      attached to the pair is ``eta_pq = psi_q grad(psi_p) - psi_p grad(psi_q)``
      (oriented q -> p: a positive flux DOF F_pq is flux from partition q into
      partition p).  With the graph gradient row (+1 at p, -1 at q) this makes
      ``delta0 @ u`` the exact 1-form expansion of grad(u): surjectivity holds
      with no sign juggling.
    * ``pair_areas`` stores the directed-area feature
      ``integral(psi_p grad(psi_q) - psi_q grad(psi_p))`` fed to the flux
      network; it equals the contraction of the fine edge areas by T.
    * The transfer matrix T[(pq),(ab)] = W_pa W_qb - W_pb W_qa contracts fine
      edge 1-forms to coarse pair 1-forms; M1 = T M_Ned T^T (the Kronecker map
      is never materialized).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from numpy.typing import NDArray
from scipy import sparse
from scipy.linalg import eigh, lu_factor, lu_solve

from . import autodiff as ad
from .autodiff import Tensor
from .mesh import (
    SimplicialMesh,
    assemble_fine_edge_areas,
    assemble_fine_mass0,
    assemble_fine_whitney1_mass,
)

__all__ = [
    "ComplexError",
    "LiftLayout",
    "ConvexCombination",
    "CoarseComplex",
    "ConservationReport",
    "FineOperators",
    "canonical_pairs",
    "split_dirichlet",
    "evaluate_shape_matrix",
    "coarsen_mass0",
    "coarsen_mass1",
    "graph_gradient",
    "hodge_laplacian",
    "build_coarse_complex",
    "project_gradient",
    "conservation_report",
    "poincare_constant",
]


class ComplexError(ValueError):
    pass


def canonical_pairs(m: int) -> NDArray:
    """All (p, q) with p < q in lexicographic order; shape (M(M-1)/2, 2)."""
    if m < 2:
        raise ComplexError(f"need at least 2 partitions, got {m}")
    p, q = np.triu_indices(m, k=1)
    return np.stack([p, q], axis=1)


# ---------------------------------------------------------------------------
# lift layout
# ---------------------------------------------------------------------------


@dataclass
class LiftLayout:
    """Index bookkeeping for the block-diagonal Dirichlet lift.

    Coarse DOFs are ordered: interior partitions first (rows [0, m_int)), then
    one block per Dirichlet boundary group in the listed order.  Fine nodes of
    boundary groups with zero coarse DOFs are folded into the interior block
    (they carry no essential condition).
    """

    m_int: int
    group_labels: list[str]
    m_per_group: dict[str, int]
    interior_nodes: NDArray
    group_nodes: dict[str, NDArray]
    n_nodes: int

    @property
    def m_total(self) -> int:
        return self.m_int + sum(self.m_per_group[g] for g in self.group_labels)

    @property
    def m_bnd(self) -> int:
        return self.m_total - self.m_int

    def coarse_slice(self, label: str) -> slice:
        off = self.m_int
        for g in self.group_labels:
            if g == label:
                return slice(off, off + self.m_per_group[g])
            off += self.m_per_group[g]
        raise KeyError(label)

    def lift_vector(self, values: Mapping[str, float], n_fields: int = 1) -> NDArray:
        """(m_bnd, n_fields) prescribed coarse boundary coefficients u_D."""
        out = np.zeros((self.m_bnd, n_fields))
        for g in self.group_labels:
            sl = self.coarse_slice(g)
            v = np.atleast_1d(np.asarray(values[g], dtype=np.float64))
            out[sl.start - self.m_int : sl.stop - self.m_int] = v
        return out


def split_dirichlet(
    mesh: SimplicialMesh, m_int: int, m_bnd_per_group: Mapping[str, int]
) -> LiftLayout:
    """Assign fine nodes to the interior block and per-group boundary blocks.

    Args:
        mesh: fine mesh.
        m_int: number of interior (trainable) partitions, >= 1.
        m_bnd_per_group: coarse DOF count per boundary group label; groups
            mapped to 0 (or omitted) are natural-condition groups whose fine
            nodes join the interior block.

    Raises:
        ComplexError: unknown label, or a group with zero fine nodes but a
            positive coarse count.
    """
    if m_int < 1:
        raise ComplexError("m_int must be >= 1")
    unknown = [g for g in m_bnd_per_group if g not in mesh.boundary_groups]
    if unknown:
        raise ComplexError(f"unknown boundary groups {unknown}")
    labels = [g for g in m_bnd_per_group if m_bnd_per_group[g] > 0]
    for g in labels:
        if len(mesh.boundary_groups[g]) == 0:
            raise ComplexError(f"group {g!r} has no fine nodes but {m_bnd_per_group[g]} coarse DOFs")
    dirichlet_nodes = (
        np.concatenate([mesh.boundary_groups[g] for g in labels])
        if labels
        else np.empty(0, dtype=np.int64)
    )
    mask = np.ones(len(mesh.nodes), dtype=bool)
    mask[dirichlet_nodes] = False
    interior = np.nonzero(mask)[0]
    return LiftLayout(
        m_int=m_int,
        group_labels=labels,
        m_per_group={g: int(m_bnd_per_group[g]) for g in labels},
        interior_nodes=interior,
        group_nodes={g: mesh.boundary_groups[g] for g in labels},
        n_nodes=len(mesh.nodes),
    )


# ---------------------------------------------------------------------------
# convex combination
# ---------------------------------------------------------------------------


@dataclass
class ConvexCombination:
    """Validated coarse-from-fine map W (m_total x n_nodes) with lift layout."""

    w: NDArray
    layout: LiftLayout

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=np.float64)
        lay = self.layout
        if self.w.shape != (lay.m_total, lay.n_nodes):
            raise ComplexError(
                f"W has shape {self.w.shape}, layout expects {(lay.m_total, lay.n_nodes)}"
            )
        if self.w.min(initial=0.0) < -1e-12:
            raise ComplexError(f"W has negative entries (min {self.w.min():.3e})")
        colsum = self.w.sum(axis=0)
        bad = np.abs(colsum - 1.0)
        if bad.max(initial=0.0) > 1e-12:
            a = int(np.argmax(bad))
            raise ComplexError(f"column {a} of W sums to {colsum[a]!r}, not 1")
        # block structure: interior columns vanish on boundary rows and the
        # boundary blocks stay within their own group columns
        bnd_rows = np.arange(lay.m_int, lay.m_total)
        if bnd_rows.size and np.abs(self.w[np.ix_(bnd_rows, lay.interior_nodes)]).max(initial=0.0) > 0.0:
            raise ComplexError("boundary rows have weight on interior columns")
        for g in lay.group_labels:
            sl = self.coarse_slice_rows(g)
            own_cols = np.zeros(lay.n_nodes, dtype=bool)
            own_cols[lay.group_nodes[g]] = True
            if np.abs(self.w[sl][:, ~own_cols]).max(initial=0.0) > 0.0:
                raise ComplexError(f"boundary block {g!r} has weight outside its group columns")
            if np.abs(self.w[: lay.m_int][:, own_cols]).max(initial=0.0) > 0.0:
                raise ComplexError(f"interior rows have weight on Dirichlet group {g!r}")

    def coarse_slice_rows(self, label: str) -> slice:
        return self.layout.coarse_slice(label)

    @property
    def m(self) -> int:
        return self.w.shape[0]


# ---------------------------------------------------------------------------
# fine operators bundle
# ---------------------------------------------------------------------------


@dataclass
class FineOperators:
    """The fine-mesh constants the coarsening contracts against."""

    mass0: sparse.csr_array
    mass1: sparse.csr_array
    edges: NDArray
    edge_areas: NDArray

    @classmethod
    def from_mesh(cls, mesh: SimplicialMesh) -> "FineOperators":
        return cls(
            mass0=assemble_fine_mass0(mesh),
            mass1=assemble_fine_whitney1_mass(mesh),
            edges=mesh.edges,
            edge_areas=assemble_fine_edge_areas(mesh),
        )


# ---------------------------------------------------------------------------
# coarsening contractions (numpy and on-tape twins share these entry points)
# ---------------------------------------------------------------------------


def coarsen_mass0(w, m_fine0):
    """M0[i,j] = sum_ab W_ia M_ab W_jb.  Accepts a numpy W or a tape Tensor."""
    if isinstance(w, Tensor):
        return ad.matmul(ad.rspmm(w, sparse.csr_array(m_fine0)), ad.transpose(w))
    w = np.asarray(w)
    return np.asarray(w @ (m_fine0 @ w.T))


def _transfer_selectors(m: int, edges: NDArray, n_nodes: int):
    pairs = canonical_pairs(m)
    sa = sparse.csr_array(
        (np.ones(len(edges)), (edges[:, 0], np.arange(len(edges)))), shape=(n_nodes, len(edges))
    )
    sb = sparse.csr_array(
        (np.ones(len(edges)), (edges[:, 1], np.arange(len(edges)))), shape=(n_nodes, len(edges))
    )
    sp = sparse.csr_array(
        (np.ones(len(pairs)), (np.arange(len(pairs)), pairs[:, 0])), shape=(len(pairs), m)
    )
    sq = sparse.csr_array(
        (np.ones(len(pairs)), (np.arange(len(pairs)), pairs[:, 1])), shape=(len(pairs), m)
    )
    return pairs, sa, sb, sp, sq


def coarsen_mass1(w, m_fine1, fine_edges, fine_edge_areas):
    """Contract the fine 1-form mass to coarse pairs without the Kronecker blowup.

    Returns:
        (M1, pair_areas): M1 is (P, P) over canonical pairs p<q; pair_areas is
        (P, d) holding integral(psi_p grad psi_q - psi_q grad psi_p).
    """
    area_cols = np.asarray(fine_edge_areas, dtype=np.float64)
    if area_cols.ndim == 1:
        area_cols = area_cols[:, None]
    if isinstance(w, Tensor):
        m = w.data.shape[0]
        pairs, sa, sb, sp, sq = _transfer_selectors(m, fine_edges, w.data.shape[1])
        wa = ad.rspmm(w, sa)  # (M, E): W[:, edge_a]
        wb = ad.rspmm(w, sb)
        t = ad.sub(
            ad.mul(ad.spmm(sp, wa), ad.spmm(sq, wb)),
            ad.mul(ad.spmm(sp, wb), ad.spmm(sq, wa)),
        )
        m1 = ad.matmul(ad.rspmm(t, sparse.csr_array(m_fine1)), ad.transpose(t))
        areas = ad.matmul(t, w.tape.constant(area_cols))
        return m1, areas
    w = np.asarray(w)
    ea, eb = fine_edges[:, 0], fine_edges[:, 1]
    wa = w[:, ea]
    wb = w[:, eb]
    pairs = canonical_pairs(w.shape[0])
    pi, qi = pairs[:, 0], pairs[:, 1]
    t = wa[pi] * wb[qi] - wb[pi] * wa[qi]  # (P, E)
    m1 = t @ (m_fine1 @ t.T)
    return np.asarray(m1), t @ area_cols


def graph_gradient(m: int) -> sparse.csr_array:
    """(P x M) incidence: row for pair (p, q) is +1 at p, -1 at q."""
    pairs = canonical_pairs(m)
    p = len(pairs)
    rows = np.repeat(np.arange(p), 2)
    cols = pairs.ravel()
    vals = np.tile([1.0, -1.0], p)
    return sparse.csr_array((vals, (rows, cols)), shape=(p, m))


def hodge_laplacian(delta0: sparse.csr_array, m1):
    """L = delta0^T M1 delta0 (dense); accepts numpy or tape-Tensor M1."""
    if isinstance(m1, Tensor):
        d0t = sparse.csr_array(delta0.T)
        a = ad.spmm(d0t, m1)  # (M, P)
        return ad.transpose(ad.spmm(d0t, ad.transpose(a)))
    return np.asarray(delta0.T @ (np.asarray(m1) @ delta0.toarray()))


@dataclass
class CoarseComplex:
    """The assembled coarse de Rham data for one W."""

    m0: NDArray
    m1: NDArray
    delta0: sparse.csr_array
    laplacian: NDArray
    pair_areas: NDArray
    pairs: NDArray = field(default=None)

    def __post_init__(self) -> None:
        if self.pairs is None:
            self.pairs = canonical_pairs(self.m0.shape[0])


def build_coarse_complex(w, fine: FineOperators) -> CoarseComplex:
    """Assemble M0, M1, delta0, L, pair_areas for a (numpy) W."""
    wm = w.w if isinstance(w, ConvexCombination) else np.asarray(w, dtype=np.float64)
    m = wm.shape[0]
    m0 = coarsen_mass0(wm, fine.mass0)
    m1, areas = coarsen_mass1(wm, fine.mass1, fine.edges, fine.edge_areas)
    d0 = graph_gradient(m)
    lap = hodge_laplacian(d0, m1)
    return CoarseComplex(m0=m0, m1=m1, delta0=d0, laplacian=lap, pair_areas=areas)


# ---------------------------------------------------------------------------
# shape-matrix evaluation
# ---------------------------------------------------------------------------


def evaluate_shape_matrix(
    params,
    mesh: SimplicialMesh,
    z,
    layout: LiftLayout,
    tape=None,
    dropout_masks=None,
    pt=None,
):
    """Evaluate the shape-function network into a convex-combination matrix.

    The interior network is evaluated at the interior fine nodes (softmax over
    the interior partitions); Dirichlet boundary nodes get their group block —
    a fixed indicator row when the group has a single coarse DOF, otherwise a
    group-masked softmax of the boundary head.

    Args:
        params: ModelParams (see nets module).
        z: conditioning vector.
        tape: if given, W is built on this tape with trainable parameters and
            the Tensor is returned; otherwise a validated numpy
            ConvexCombination is returned.
        dropout_masks: optional per-block masks for the interior network.

    Raises:
        ComplexError: NaN in the network output (the message names the fine
            node and Z after a per-node diagnostic pass).
    """
    from . import nets
    from .autodiff import AutodiffError, Tape

    own_tape = tape is None
    tp = Tape() if own_tape else tape
    if pt is None:
        pt = nets.bind_params(tp, params, trainable=not own_tape)
    pts_int = mesh.nodes[layout.interior_nodes]
    try:
        rows_int = nets.shape_function_forward(
            tp, pts_int, z, params, pt, dropout_masks=dropout_masks
        )
    except AutodiffError as e:
        _diagnose_nan(params, mesh, z, layout)
        raise ComplexError(f"NaN in shape network output for Z={np.asarray(z)!r}") from e

    lay = layout
    n = lay.n_nodes
    w_bnd = np.zeros((lay.m_total, n))
    multi = [g for g in lay.group_labels if lay.m_per_group[g] > 1]
    for g in lay.group_labels:
        if lay.m_per_group[g] == 1:
            w_bnd[lay.coarse_slice(g), lay.group_nodes[g]] = 1.0
    # scatter interior block: rows [0, m_int), columns interior_nodes
    n_int = len(lay.interior_nodes)
    r_csr = sparse.csr_array(
        (np.ones(lay.m_int), (np.arange(lay.m_int), np.arange(lay.m_int))),
        shape=(lay.m_total, lay.m_int),
    )
    c_csr = sparse.csr_array(
        (np.ones(n_int), (np.arange(n_int), lay.interior_nodes)), shape=(n_int, n),
    )
    w_t = ad.add(
        ad.spmm(r_csr, ad.rspmm(ad.transpose(rows_int), c_csr)), tp.constant(w_bnd)
    )
    if multi:
        rows_b = nets.boundary_forward(tp, mesh, z, params, pt, lay)
        w_t = ad.add(w_t, rows_b)
    if own_tape:
        return ConvexCombination(w=w_t.data, layout=lay)
    return w_t


def _diagnose_nan(params, mesh, z, layout) -> None:
    from . import nets
    from .autodiff import AutodiffError, Tape

    for a, x in zip(layout.interior_nodes, mesh.nodes[layout.interior_nodes]):
        try:
            tp = Tape()
            pt = nets.bind_params(tp, params, trainable=False)
            nets.shape_function_forward(tp, x[None, :], z, params, pt)
        except AutodiffError as e:
            raise ComplexError(
                f"NaN in shape network output at fine node {int(a)} for Z={np.asarray(z)!r}"
            ) from e


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def project_gradient(u_hat: NDArray, cpx: CoarseComplex) -> NDArray:
    """Coarse 1-form DOFs of grad(u): the minimum-norm solution of
    M1 J = M1 delta0 u, i.e. delta0 u restricted to range(M1)."""
    d = cpx.delta0 @ np.asarray(u_hat, dtype=np.float64)
    sol, *_ = np.linalg.lstsq(cpx.m1, cpx.m1 @ d, rcond=None)
    return sol


@dataclass
class ConservationReport:
    interior_flux_antisymmetry_error: float
    global_balance_residual: float
    per_partition_divergence: NDArray

    def __post_init__(self) -> None:
        if self.interior_flux_antisymmetry_error < 0 or self.global_balance_residual < 0:
            raise ComplexError("report fields must be nonnegative")


def conservation_report(
    f_hat: NDArray,
    cpx: CoarseComplex,
    sources: NDArray | None = None,
    boundary_flux: float = 0.0,
) -> ConservationReport:
    """Discrete conservation bookkeeping for a coarse 1-form flux.

    The divergence per partition is delta0^T M1 F.  Fluxes are antisymmetric
    by the canonical-pair representation itself, so the reported antisymmetry
    error is the float round-off of the telescoping sum 1^T delta0^T M1 F
    (exactly zero in exact arithmetic).  The balance residual is
    |sum_i div_i - boundary_flux - sum_i sources_i|.
    """
    f_hat = np.asarray(f_hat, dtype=np.float64)
    div = cpx.delta0.T @ (cpx.m1 @ f_hat)
    total = float(div.sum())
    src = 0.0 if sources is None else float(np.asarray(sources).sum())
    return ConservationReport(
        interior_flux_antisymmetry_error=abs(total),
        global_balance_residual=abs(total - float(boundary_flux) - src),
        per_partition_divergence=div,
    )


def poincare_constant(
    laplacian: NDArray,
    m0: NDArray,
    null_space: str = "constants",
    method: str = "auto",
    tol: float = 1e-10,
    max_iter: int = 500,
) -> float:
    """C_p = 1/mu_min of L v = mu M0 v on the M0-orthocomplement of the kernel.

    Args:
        null_space: "constants" for a pure-Neumann L (kernel spanned by 1) or
            "none" for a Dirichlet-reduced SPD block.
        method: "dense" (direct generalized eigensolve), "inverse_iteration"
            (deflated shifted inverse iteration), or "auto" (dense for
            M <= 64, iteration above).

    Raises:
        ComplexError: non-converged iteration (message carries the residual).
    """
    lap = np.asarray(laplacian, dtype=np.float64)
    m0 = np.asarray(m0, dtype=np.float64)
    m = lap.shape[0]
    if method == "auto":
        method = "dense" if m <= 64 else "inverse_iteration"
    if method == "dense":
        mu = eigh(lap, m0, eigvals_only=True)
        if null_space == "constants":
            mu = mu[1:]
        mu_min = float(mu[0])
    else:
        mu_min = _deflated_inverse_iteration(lap, m0, null_space, tol, max_iter)
    if mu_min <= 0:
        raise ComplexError(f"smallest nonzero eigenvalue is {mu_min:.3e}; L is not PSD on the complement")
    return 1.0 / mu_min


def _deflated_inverse_iteration(lap, m0, null_space, tol, max_iter):
    m = lap.shape[0]
    if null_space == "constants":
        nv = np.ones(m)
        m0n = m0 @ nv
        aug = lap + np.outer(m0n, m0n) * (np.trace(lap) / max(nv @ m0n, 1e-300))

        def deflate(v):
            return v - nv * (m0n @ v) / (nv @ m0n)

    else:
        aug = lap

        def deflate(v):
            return v

    lu = lu_factor(aug)
    rng = np.random.default_rng(0)
    v = deflate(rng.standard_normal(m))
    v /= np.sqrt(v @ (m0 @ v))
    mu = float(v @ (lap @ v))
    for _ in range(max_iter):
        w = deflate(lu_solve(lu, m0 @ v))
        w /= np.sqrt(w @ (m0 @ w))
        mu = float(w @ (lap @ w))
        res = np.linalg.norm(lap @ w - mu * (m0 @ w))
        v = w
        if res <= tol * max(np.linalg.norm(lap @ w), 1e-300):
            return mu
    raise ComplexError(
        f"inverse iteration did not converge in {max_iter} iterations (residual {res:.3e})"
    )
