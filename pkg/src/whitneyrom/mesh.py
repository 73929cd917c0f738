"""Fine-scale simplicial meshes, P1 bases, and conventional FEM reference solves.

This module owns everything that happens on the *fine* discretization: mesh
construction and validation, the implicit P1 hat functions (barycentric
interpolation, point location), assembly of the fine mass matrices for 0-forms
(P1) and 1-forms (lowest-order edge elements), and plain continuous-Galerkin
reference solves used to generate training targets.

Conventions:
    * Simplices are stored with positive orientation (positive signed volume).
    * Mesh edges are node pairs (a, b) with a < b, deduplicated and sorted
      lexicographically.  In 1D the edges coincide with the elements.
    * The fine 1-form basis attached to edge (a, b), a < b, is
      ``psi1_ab = l_a * grad(l_b) - l_b * grad(l_a)``.
    * Quadrature is an order-2 symmetric rule (2-point Gauss on intervals,
      3-point midpoint rule on triangles), exact for every product of two
      P1/edge-element basis functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import sparse
from scipy.sparse.linalg import spsolve

__all__ = [
    "MeshError",
    "MeshFormatError",
    "PointLocationError",
    "SingularProblemError",
    "SimplicialMesh",
    "NodalField",
    "AdvectionDiffusion",
    "PointCharge",
    "build_interval_mesh",
    "build_structured_tri_mesh",
    "build_disk_mesh",
    "load_mesh",
    "save_mesh",
    "assemble_fine_mass0",
    "assemble_fine_whitney1_mass",
    "assemble_fine_stiffness",
    "assemble_fine_advection",
    "assemble_fine_edge_areas",
    "assemble_load",
    "reference_solve",
    "eval_p1",
    "eval_p1_gradient",
    "p1_basis_matrix",
]

MESH_FORMAT = "whitney-mesh-1"


class MeshError(ValueError):
    """Invalid mesh data (indices, orientation, boundary labels...)."""


class MeshFormatError(MeshError):
    """Malformed mesh file."""


class PointLocationError(ValueError):
    """A query point lies outside every simplex."""


class SingularProblemError(RuntimeError):
    """The assembled linear system has no unique solution."""


# ---------------------------------------------------------------------------
# quadrature (order 2, exact for products of P1 basis functions)
# ---------------------------------------------------------------------------

_GAUSS_1D = (
    np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)]),
    np.array([0.5, 0.5]),
)

# barycentric points of the symmetric 3-point triangle rule (degree 2)
_TRI_BARY = np.array(
    [
        [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
        [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
        [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
    ]
)
_TRI_W = np.array([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])


def quadrature_rule(dim: int) -> tuple[NDArray, NDArray]:
    """Return (barycentric points, weights) of the order-2 rule; weights sum to 1."""
    if dim == 1:
        pts = np.stack([1.0 - _GAUSS_1D[0], _GAUSS_1D[0]], axis=1)
        return pts, _GAUSS_1D[1]
    if dim == 2:
        return _TRI_BARY, _TRI_W
    raise MeshError(f"unsupported dimension {dim}")


# ---------------------------------------------------------------------------
# mesh
# ---------------------------------------------------------------------------


@dataclass
class SimplicialMesh:
    """A validated fine simplicial mesh in 1 or 2 dimensions.

    Attributes:
        dim: Spatial dimension, 1 or 2.
        nodes: (N, dim) node coordinates.
        simplices: (T, dim+1) node indices, positively oriented.
        boundary_groups: label -> sorted array of boundary node indices.
            Groups are disjoint and their union is exactly the boundary.
        edges: (E, 2) deduplicated node pairs (a, b), a < b, lexicographic.
    """

    dim: int
    nodes: NDArray
    simplices: NDArray
    boundary_groups: dict[str, NDArray]
    edges: NDArray = field(init=False)

    def __post_init__(self) -> None:
        self.nodes = np.ascontiguousarray(np.atleast_2d(self.nodes), dtype=np.float64)
        if self.nodes.shape[1] != self.dim:
            raise MeshError(
                f"node coordinates have {self.nodes.shape[1]} components, expected {self.dim}"
            )
        self.simplices = np.ascontiguousarray(self.simplices, dtype=np.int64)
        if self.simplices.ndim != 2 or self.simplices.shape[1] != self.dim + 1:
            raise MeshError("simplices must be (T, dim+1)")
        n = len(self.nodes)
        if self.simplices.min(initial=0) < 0 or self.simplices.max(initial=-1) >= n:
            raise MeshError("simplex refers to a node index out of range")
        vols = self.signed_volumes()
        bad = np.nonzero(vols <= 0)[0]
        if bad.size:
            raise MeshError(
                f"simplex {bad[0]} has non-positive signed volume {vols[bad[0]]:.3e}"
            )
        self.edges = self._derive_edges()
        self.boundary_groups = {
            k: np.asarray(sorted(set(int(i) for i in v)), dtype=np.int64)
            for k, v in self.boundary_groups.items()
        }
        self._check_boundary()
        self._locator: _PointLocator | None = None

    # -- geometry ---------------------------------------------------------

    def signed_volumes(self) -> NDArray:
        """Signed volume (length/area) of every simplex."""
        v = self.nodes[self.simplices]
        if self.dim == 1:
            return v[:, 1, 0] - v[:, 0, 0]
        e1 = v[:, 1] - v[:, 0]
        e2 = v[:, 2] - v[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def barycentric_gradients(self) -> NDArray:
        """(T, dim+1, dim) gradients of the P1 hats on every simplex."""
        v = self.nodes[self.simplices]
        if self.dim == 1:
            h = (v[:, 1, 0] - v[:, 0, 0])[:, None]
            g = np.empty((len(self.simplices), 2, 1))
            g[:, 0, 0] = -1.0
            g[:, 1, 0] = 1.0
            return g / h[:, None]
        # rows of inv(J)^T applied to reference gradients
        e1 = v[:, 1] - v[:, 0]
        e2 = v[:, 2] - v[:, 0]
        det = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])[:, None]
        g1 = np.stack([e2[:, 1], -e2[:, 0]], axis=1) / det
        g2 = np.stack([-e1[:, 1], e1[:, 0]], axis=1) / det
        g0 = -(g1 + g2)
        return np.stack([g0, g1, g2], axis=1)

    def _derive_edges(self) -> NDArray:
        loc = [(i, j) for i in range(self.dim + 1) for j in range(i + 1, self.dim + 1)]
        pairs = np.concatenate([self.simplices[:, p] for p in loc], axis=0)
        pairs = np.sort(pairs, axis=1)
        return np.unique(pairs, axis=0)

    def boundary_facets(self) -> NDArray:
        """Facets (nodes in 1D, edges in 2D) belonging to exactly one simplex."""
        if self.dim == 1:
            idx, counts = np.unique(self.simplices, return_counts=True)
            return idx[counts == 1][:, None]
        loc = [(0, 1), (1, 2), (0, 2)]
        f = np.sort(np.concatenate([self.simplices[:, p] for p in loc]), axis=1)
        uniq, counts = np.unique(f, axis=0, return_counts=True)
        if counts.max(initial=1) > 2:
            raise MeshError("non-manifold mesh: an edge is shared by more than two triangles")
        return uniq[counts == 1]

    @property
    def boundary_nodes(self) -> NDArray:
        return np.unique(self.boundary_facets())

    @property
    def interior_nodes(self) -> NDArray:
        mask = np.ones(len(self.nodes), dtype=bool)
        mask[self.boundary_nodes] = False
        return np.nonzero(mask)[0]

    def _check_boundary(self) -> None:
        all_lab = np.concatenate([v for v in self.boundary_groups.values()]) if self.boundary_groups else np.empty(0, np.int64)
        if len(np.unique(all_lab)) != len(all_lab):
            raise MeshError("boundary groups overlap")
        expected = self.boundary_nodes
        if not np.array_equal(np.sort(all_lab), expected):
            raise MeshError(
                "boundary groups must cover exactly the boundary nodes "
                f"(labeled {len(all_lab)}, boundary has {len(expected)})"
            )

    def edge_index(self) -> dict[tuple[int, int], int]:
        """Map (a, b) with a < b to its row in ``edges``."""
        return {(int(a), int(b)): k for k, (a, b) in enumerate(self.edges)}

    # -- point location ----------------------------------------------------

    def locate(self, points: NDArray, tol: float = 1e-10) -> tuple[NDArray, NDArray]:
        """Find containing simplices via brute-force barycentric tests.

        Args:
            points: (P, dim) query coordinates.
            tol: barycentric tolerance; values >= -tol count as inside.

        Returns:
            (elements, barycentric): (P,) simplex indices and (P, dim+1)
            barycentric coordinates, clipped to [0, 1] and renormalized.

        Raises:
            PointLocationError: some point is outside every simplex; the
                message carries the worst point and its nearest simplex.
        """
        if self._locator is None:
            self._locator = _PointLocator(self)
        return self._locator.locate(np.atleast_2d(np.asarray(points, dtype=np.float64)), tol)


class _PointLocator:
    """Precomputed affine maps for brute-force barycentric point location."""

    def __init__(self, mesh: SimplicialMesh):
        v = mesh.nodes[mesh.simplices]  # (T, dim+1, dim)
        t = len(mesh.simplices)
        a = np.concatenate([np.ones((t, mesh.dim + 1, 1)), v], axis=2)
        # bary = inv(A)^T @ [1, x]
        self.inv = np.linalg.inv(np.swapaxes(a, 1, 2))  # (T, dim+1, dim+1)
        self.dim = mesh.dim
        self._cache: dict[bytes, tuple[NDArray, NDArray]] = {}

    def locate(self, pts: NDArray, tol: float) -> tuple[NDArray, NDArray]:
        key = pts.tobytes() + np.float64(tol).tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        elems = np.empty(len(pts), dtype=np.int64)
        bary = np.empty((len(pts), self.dim + 1))
        chunk = 256
        for lo in range(0, len(pts), chunk):
            xs = pts[lo : lo + chunk]
            xh = np.concatenate([np.ones((len(xs), 1)), xs], axis=1)
            # (T, P, dim+1)
            b = np.einsum("tij,pj->tpi", self.inv, xh)
            minb = b.min(axis=2)  # (T, P)
            best = minb.argmax(axis=0)
            worst = minb[best, np.arange(len(xs))]
            if (worst < -tol).any():
                k = int(np.argmin(worst))
                raise PointLocationError(
                    f"point {xs[k].tolist()} is outside the mesh; nearest simplex "
                    f"{int(best[k])} has minimum barycentric coordinate {worst[k]:.3e}"
                )
            elems[lo : lo + chunk] = best
            bb = b[best, np.arange(len(xs))]
            bb = np.clip(bb, 0.0, None)
            bary[lo : lo + chunk] = bb / bb.sum(axis=1, keepdims=True)
        self._cache[key] = (elems, bary)
        return elems, bary


@dataclass
class NodalField:
    """Values attached to fine mesh nodes; shape (N,) or (N, n_fields)."""

    values: NDArray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(self.values).all():
            raise ValueError("NodalField values must be finite")

    @property
    def n_fields(self) -> int:
        return 1 if self.values.ndim == 1 else self.values.shape[1]


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------


def build_interval_mesh(n_elems: int, a: float, b: float) -> SimplicialMesh:
    """Uniform 1D mesh on [a, b] with boundary groups ``left``/``right``."""
    if n_elems < 1:
        raise MeshError("n_elems must be >= 1")
    if not a < b:
        raise MeshError(f"need a < b, got a={a}, b={b}")
    x = np.linspace(a, b, n_elems + 1)[:, None]
    simp = np.stack([np.arange(n_elems), np.arange(1, n_elems + 1)], axis=1)
    groups = {"left": np.array([0]), "right": np.array([n_elems])}
    return SimplicialMesh(1, x, simp, groups)


def build_structured_tri_mesh(
    nx: int, ny: int, bbox: Sequence[Sequence[float]] = ((0.0, 1.0), (0.0, 1.0))
) -> SimplicialMesh:
    """Structured triangulation of a rectangle; each cell split into two triangles.

    Boundary groups are ``left``, ``right``, ``bottom``, ``top``; the four
    corner nodes are assigned to ``bottom``/``top`` so the groups stay disjoint.
    """
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be >= 1")
    (x0, x1), (y0, y1) = bbox
    if not (x0 < x1 and y0 < y1):
        raise MeshError(f"degenerate bbox {bbox!r}")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.stack([xx.ravel(), yy.ravel()], axis=1)

    def nid(i: int, j: int) -> int:
        return j * (nx + 1) + i

    tris = []
    for j in range(ny):
        for i in range(nx):
            a, b = nid(i, j), nid(i + 1, j)
            c, d = nid(i + 1, j + 1), nid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    bottom = [nid(i, 0) for i in range(nx + 1)]
    top = [nid(i, ny) for i in range(nx + 1)]
    left = [nid(0, j) for j in range(1, ny)]
    right = [nid(nx, j) for j in range(1, ny)]
    groups = {
        "left": np.array(left, dtype=np.int64),
        "right": np.array(right, dtype=np.int64),
        "bottom": np.array(bottom, dtype=np.int64),
        "top": np.array(top, dtype=np.int64),
    }
    return SimplicialMesh(2, nodes, np.array(tris), groups)


def build_disk_mesh(
    n_rings: int,
    arcs: Mapping[str, tuple[float, float]] | None = None,
    radius: float = 1.0,
) -> SimplicialMesh:
    """Unstructured-style disk mesh from concentric rings + Delaunay.

    Ring k (1-based) carries 6k nodes at radius ``radius * k / n_rings``, so the
    total node count is 1 + 3*K*(K+1).  K=22 gives 1519 nodes.

    Args:
        n_rings: number of rings (>= 1).
        arcs: optional label -> (theta0, theta1) half-open angle intervals in
            [0, 2*pi) partitioning the outer circle; default one group "shell".
        radius: disk radius.
    """
    from scipy.spatial import Delaunay

    if n_rings < 1:
        raise MeshError("n_rings must be >= 1")
    pts = [np.zeros((1, 2))]
    for k in range(1, n_rings + 1):
        th = 2.0 * np.pi * np.arange(6 * k) / (6 * k)
        r = radius * k / n_rings
        pts.append(np.stack([r * np.cos(th), r * np.sin(th)], axis=1))
    nodes = np.concatenate(pts, axis=0)
    tri = Delaunay(nodes)
    simp = tri.simplices.copy()
    v = nodes[simp]
    det = (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1]) - (
        v[:, 1, 1] - v[:, 0, 1]
    ) * (v[:, 2, 0] - v[:, 0, 0])
    flip = det < 0
    simp[flip] = simp[flip][:, [0, 2, 1]]
    # drop degenerate slivers qhull may emit on co-circular points
    keep = np.abs(det) > 1e-12 * radius**2
    simp = simp[keep]

    outer = np.arange(len(nodes) - 6 * n_rings, len(nodes))
    theta = np.mod(np.arctan2(nodes[outer, 1], nodes[outer, 0]), 2.0 * np.pi)
    if arcs is None:
        groups = {"shell": outer}
    else:
        groups = {}
        assigned = np.zeros(len(outer), dtype=bool)
        for label, (t0, t1) in arcs.items():
            inside = (theta >= t0) & (theta < t1) & ~assigned
            groups[label] = outer[inside]
            assigned |= inside
        if not assigned.all():
            raise MeshError("arcs do not cover the outer circle")
    return SimplicialMesh(2, nodes, simp, groups)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def load_mesh(path: str, fix_orientation: bool = False) -> SimplicialMesh:
    """Load a mesh from the JSON container format ``whitney-mesh-1``.

    Args:
        path: file path.
        fix_orientation: if True, inverted simplices are reordered instead of
            rejected.

    Raises:
        MeshFormatError: parse errors (with line number), missing keys,
            inverted/degenerate elements (naming the simplex index), or
            non-manifold connectivity.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise MeshFormatError(f"{path}: parse error at line {e.lineno}: {e.msg}") from e
    for key in ("format", "dim", "nodes", "simplices", "boundary"):
        if key not in doc:
            raise MeshFormatError(f"{path}: missing key {key!r}")
    if doc["format"] != MESH_FORMAT:
        raise MeshFormatError(f"{path}: unsupported format {doc['format']!r}")
    dim = int(doc["dim"])
    if dim not in (1, 2):
        raise MeshFormatError(f"{path}: dim must be 1 or 2, got {dim}")
    nodes = np.asarray(doc["nodes"], dtype=np.float64)
    simp = np.asarray(doc["simplices"], dtype=np.int64)
    if simp.ndim != 2 or simp.shape[1] != dim + 1:
        raise MeshFormatError(f"{path}: simplices must have {dim + 1} vertices")
    v = nodes[simp]
    if dim == 1:
        vol = v[:, 1, 0] - v[:, 0, 0]
    else:
        vol = 0.5 * (
            (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
            - (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0])
        )
    scale = np.abs(vol).max(initial=0.0)
    degenerate = np.nonzero(np.abs(vol) <= 1e-14 * max(scale, 1.0))[0]
    if degenerate.size:
        raise MeshFormatError(f"{path}: simplex {degenerate[0]} is degenerate (zero volume)")
    inverted = np.nonzero(vol < 0)[0]
    if inverted.size:
        if not fix_orientation:
            raise MeshFormatError(
                f"{path}: simplex {inverted[0]} is inverted (negative volume); "
                "pass fix_orientation=True to reorder"
            )
        simp[inverted] = simp[inverted][:, [1, 0] if dim == 1 else [0, 2, 1]]
    groups = {str(k): np.asarray(ix, dtype=np.int64) for k, ix in doc["boundary"].items()}
    try:
        return SimplicialMesh(dim, nodes, simp, groups)
    except MeshError as e:
        raise MeshFormatError(f"{path}: {e}") from e


def save_mesh(mesh: SimplicialMesh, path: str) -> None:
    """Write a mesh in the ``whitney-mesh-1`` JSON container format."""
    doc = {
        "format": MESH_FORMAT,
        "dim": mesh.dim,
        "nodes": mesh.nodes.tolist(),
        "simplices": mesh.simplices.tolist(),
        "boundary": {k: v.tolist() for k, v in mesh.boundary_groups.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


def assemble_fine_mass0(mesh: SimplicialMesh) -> sparse.csr_array:
    """P1 mass matrix (l_a, l_b), assembled with the order-2 quadrature rule."""
    bary, w = quadrature_rule(mesh.dim)
    vols = mesh.signed_volumes()
    # local mass block: sum_q w_q * bary[q,i] * bary[q,j]
    local = np.einsum("q,qi,qj->ij", w, bary, bary)
    n = len(mesh.nodes)
    t = len(mesh.simplices)
    rows = np.repeat(mesh.simplices, mesh.dim + 1, axis=1).ravel()
    cols = np.tile(mesh.simplices, (1, mesh.dim + 1)).ravel()
    vals = (vols[:, None, None] * local[None]).ravel()
    m = sparse.coo_array((vals, (rows, cols)), shape=(n, n)).tocsr()
    m.sum_duplicates()
    return m


def assemble_fine_stiffness(mesh: SimplicialMesh) -> sparse.csr_array:
    """P1 stiffness matrix (grad l_a, grad l_b)."""
    g = mesh.barycentric_gradients()  # (T, dim+1, dim)
    vols = mesh.signed_volumes()
    local = np.einsum("t,tid,tjd->tij", vols, g, g)
    n = len(mesh.nodes)
    rows = np.repeat(mesh.simplices, mesh.dim + 1, axis=1).ravel()
    cols = np.tile(mesh.simplices, (1, mesh.dim + 1)).ravel()
    m = sparse.coo_array((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    m.sum_duplicates()
    return m


def assemble_fine_advection(mesh: SimplicialMesh, beta: NDArray) -> sparse.csr_array:
    """Advection matrix C[a, b] = (beta . grad l_b, l_a) for constant beta."""
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    g = mesh.barycentric_gradients()
    vols = mesh.signed_volumes()
    bg = np.einsum("d,tjd->tj", beta, g)  # beta . grad l_j, constant per element
    # integral of l_a over the element is |tau| / (dim+1), independent of a
    local = np.repeat(bg[:, None, :], mesh.dim + 1, axis=1) * (
        vols / (mesh.dim + 1)
    )[:, None, None]
    n = len(mesh.nodes)
    rows = np.repeat(mesh.simplices, mesh.dim + 1, axis=1).ravel()
    cols = np.tile(mesh.simplices, (1, mesh.dim + 1)).ravel()
    m = sparse.coo_array((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    m.sum_duplicates()
    return m


def _element_edge_table(mesh: SimplicialMesh) -> tuple[NDArray, NDArray]:
    """Per element, the global edge index and orientation-free vertex pair.

    Returns:
        (T, n_loc) edge indices and (T, n_loc, 2) local vertex positions
        ordered so the first position holds the smaller global node.
    """
    loc = [(i, j) for i in range(mesh.dim + 1) for j in range(i + 1, mesh.dim + 1)]
    eidx = mesh.edge_index()
    t = len(mesh.simplices)
    edge_ids = np.empty((t, len(loc)), dtype=np.int64)
    local_ab = np.empty((t, len(loc), 2), dtype=np.int64)
    for k, (i, j) in enumerate(loc):
        gi = mesh.simplices[:, i]
        gj = mesh.simplices[:, j]
        swap = gi > gj
        a = np.where(swap, gj, gi)
        b = np.where(swap, gi, gj)
        edge_ids[:, k] = [eidx[(int(x), int(y))] for x, y in zip(a, b)]
        local_ab[:, k, 0] = np.where(swap, j, i)
        local_ab[:, k, 1] = np.where(swap, i, j)
    return edge_ids, local_ab


def assemble_fine_whitney1_mass(mesh: SimplicialMesh) -> sparse.csr_array:
    """Edge-element mass matrix over mesh edges.

    Entry for edges (a,b), (c,d) (each with a<b, c<d) is the L2 product of
    ``l_a grad(l_b) - l_b grad(l_a)`` and ``l_c grad(l_d) - l_d grad(l_c)``,
    evaluated with the order-2 rule (exact: integrands are degree 2).
    """
    bary, w = quadrature_rule(mesh.dim)
    g = mesh.barycentric_gradients()  # (T, nv, d)
    vols = mesh.signed_volumes()
    edge_ids, local_ab = _element_edge_table(mesh)
    t, ne = edge_ids.shape
    # psi values at quadrature points: (T, ne, Q, d)
    la = bary[:, local_ab[..., 0]]  # (Q, T, ne)
    lb = bary[:, local_ab[..., 1]]
    ga = np.take_along_axis(g, local_ab[..., 0][:, :, None], axis=1)  # (T, ne, d)
    gb = np.take_along_axis(g, local_ab[..., 1][:, :, None], axis=1)
    psi = la.transpose(1, 2, 0)[..., None] * gb[:, :, None, :] - lb.transpose(1, 2, 0)[
        ..., None
    ] * ga[:, :, None, :]
    local = np.einsum("q,teqd,tfqd->tef", w, psi, psi) * vols[:, None, None]
    e = len(mesh.edges)
    rows = np.repeat(edge_ids, ne, axis=1).ravel()
    cols = np.tile(edge_ids, (1, ne)).ravel()
    m = sparse.coo_array((local.ravel(), (rows, cols)), shape=(e, e)).tocsr()
    m.sum_duplicates()
    return m


def assemble_fine_edge_areas(mesh: SimplicialMesh) -> NDArray:
    """(E, dim) directed areas: integral of ``l_a grad(l_b) - l_b grad(l_a)``.

    On each element the hats integrate to |tau|/(dim+1), so the contribution is
    |tau|/(dim+1) * (grad(l_b) - grad(l_a)).  In 1D every edge integrates to
    exactly 1 (the length-normalized orientation).
    """
    g = mesh.barycentric_gradients()
    vols = mesh.signed_volumes()
    edge_ids, local_ab = _element_edge_table(mesh)
    ga = np.take_along_axis(g, local_ab[..., 0][:, :, None], axis=1)
    gb = np.take_along_axis(g, local_ab[..., 1][:, :, None], axis=1)
    contrib = (vols / (mesh.dim + 1))[:, None, None] * (gb - ga)
    areas = np.zeros((len(mesh.edges), mesh.dim))
    np.add.at(areas, edge_ids.ravel(), contrib.reshape(-1, mesh.dim))
    return areas


def assemble_load(mesh: SimplicialMesh, f: Callable[[NDArray], NDArray]) -> NDArray:
    """Load vector (f, l_a) by order-2 quadrature of a callable source."""
    bary, w = quadrature_rule(mesh.dim)
    vols = mesh.signed_volumes()
    v = mesh.nodes[mesh.simplices]  # (T, nv, d)
    xq = np.einsum("qi,tid->tqd", bary, v)  # (T, Q, d)
    fv = np.asarray(f(xq.reshape(-1, mesh.dim))).reshape(len(vols), len(w))
    contrib = np.einsum("t,q,tq,qi->ti", vols, w, fv, bary)
    out = np.zeros(len(mesh.nodes))
    np.add.at(out, mesh.simplices.ravel(), contrib.ravel())
    return out


# ---------------------------------------------------------------------------
# reference solves
# ---------------------------------------------------------------------------


@dataclass
class AdvectionDiffusion:
    """- eps * lap(u) + beta . grad(u) = f with constant beta."""

    eps: float
    beta: NDArray
    source: Callable[[NDArray], NDArray] | None = None

    def __post_init__(self) -> None:
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))


@dataclass
class PointCharge:
    """- lap(u) = delta(x - x_q); the load vector is f_a = l_a(x_q)."""

    x_q: NDArray

    def __post_init__(self) -> None:
        self.x_q = np.atleast_1d(np.asarray(self.x_q, dtype=np.float64))


def reference_solve(
    mesh: SimplicialMesh,
    problem: AdvectionDiffusion | PointCharge,
    bc: Mapping[str, float],
) -> NodalField:
    """Plain continuous-Galerkin P1 solve with Dirichlet rows eliminated.

    Args:
        mesh: fine mesh.
        problem: an :class:`AdvectionDiffusion` or :class:`PointCharge` spec.
        bc: Dirichlet values per boundary group label; groups not listed get
            the natural (zero-flux) condition.

    Raises:
        SingularProblemError: no Dirichlet constraint (pure Neumann).
        PointLocationError: point charge outside the domain.
    """
    n = len(mesh.nodes)
    if isinstance(problem, AdvectionDiffusion):
        a = problem.eps * assemble_fine_stiffness(mesh) + assemble_fine_advection(
            mesh, problem.beta
        )
        rhs = assemble_load(mesh, problem.source) if problem.source else np.zeros(n)
    elif isinstance(problem, PointCharge):
        a = assemble_fine_stiffness(mesh)
        elems, bary = mesh.locate(problem.x_q[None, :])
        rhs = np.zeros(n)
        rhs[mesh.simplices[elems[0]]] = bary[0]
    else:
        raise TypeError(f"unknown problem {problem!r}")

    unknown_groups = [g for g in bc if g not in mesh.boundary_groups]
    if unknown_groups:
        raise MeshError(f"bc names unknown boundary groups {unknown_groups}")
    dir_nodes = []
    dir_vals = []
    for label, value in bc.items():
        idx = mesh.boundary_groups[label]
        dir_nodes.append(idx)
        dir_vals.append(np.full(len(idx), float(value)))
    if not dir_nodes or sum(len(d) for d in dir_nodes) == 0:
        raise SingularProblemError(
            "no Dirichlet constraint: the pure-Neumann system is singular"
        )
    dir_nodes = np.concatenate(dir_nodes)
    dir_vals = np.concatenate(dir_vals)

    free = np.ones(n, dtype=bool)
    free[dir_nodes] = False
    u = np.zeros(n)
    u[dir_nodes] = dir_vals
    a_csr = a.tocsr()
    rhs_free = rhs[free] - a_csr[free][:, dir_nodes] @ dir_vals
    a_ff = a_csr[free][:, free]
    u[free] = spsolve(a_ff.tocsc(), rhs_free)
    if not np.isfinite(u).all():
        raise SingularProblemError("linear solve produced non-finite values")
    return NodalField(u)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def eval_p1(mesh: SimplicialMesh, fld: NodalField, x: NDArray) -> NDArray:
    """Barycentric interpolation of a nodal field at one point or many.

    Args:
        mesh: fine mesh.
        fld: nodal field, (N,) or (N, F).
        x: (dim,) single point or (P, dim) points.

    Returns:
        (F,) for a single point, else (P, F); F=1 column for flat fields.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    elems, bary = mesh.locate(x[None, :] if single else x)
    vals = fld.values if fld.values.ndim == 2 else fld.values[:, None]
    out = np.einsum("pi,pif->pf", bary, vals[mesh.simplices[elems]])
    return out[0] if single else out


def eval_p1_gradient(mesh: SimplicialMesh, fld: NodalField, x: NDArray) -> NDArray:
    """Piecewise-constant gradient of the P1 interpolant at given points."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    elems, _ = mesh.locate(x)
    g = mesh.barycentric_gradients()[elems]  # (P, nv, d)
    vals = fld.values if fld.values.ndim == 2 else fld.values[:, None]
    return np.einsum("pif,pid->pfd", vals[mesh.simplices[elems]], g)


def p1_basis_matrix(mesh: SimplicialMesh, points: NDArray) -> NDArray:
    """(N x D) matrix of fine hat-function values at D points.

    Column d holds l_a(x_d) for every node a; each column has at most dim+1
    nonzeros and sums to one.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    elems, bary = mesh.locate(pts)
    out = np.zeros((len(mesh.nodes), len(pts)))
    verts = mesh.simplices[elems]  # (D, dim+1)
    out[verts, np.arange(len(pts))[:, None]] = bary
    return out
