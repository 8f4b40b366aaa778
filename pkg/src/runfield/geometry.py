"""Spatial discretization: triangular mesh, FEM matrices, catchment grids.

Coordinates are planar kilometers throughout. The mesh is a Delaunay
triangulation of the observation supports plus a regular background
lattice, extended well beyond the data so that boundary effects of the
stochastic field stay away from every observation.

Catchments are represented by regular grid nodes snapped to a global
lattice; nested catchments therefore share nodes exactly, which is what
makes areal averages of a parent decompose exactly into its parts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay, QhullError, cKDTree

COORD_TOL = 1e-9  # km; tolerance for coincident points and barycentric tests

DEFAULT_EXTENSION_FACTOR = 0.3  # fraction of hull diameter added beyond the hull
DEFAULT_GRID_SPACING_KM = 1.0
DEFAULT_GRID_ORIGIN = (0.0, 0.0)


class GeometryError(ValueError):
    """Invalid geometric input (degenerate mesh input, point outside mesh, ...)."""


@dataclass(frozen=True)
class Point2D:
    """A location in planar km coordinates."""

    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise GeometryError(f"non-finite coordinates ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


def _single_point(location) -> np.ndarray:
    """Coerce a Point2D / pair / length-2 array to a (1, 2) array."""
    if isinstance(location, Point2D):
        return location.as_array().reshape(1, 2)
    arr = np.asarray(location, dtype=float).reshape(-1)
    if arr.size != 2:
        raise GeometryError(f"expected a single (x, y) location, got {location!r}")
    return arr.reshape(1, 2)


def as_points_array(points) -> np.ndarray:
    """Coerce a list of Point2D / pairs / an (n, 2) array to an (n, 2) float array."""
    if isinstance(points, np.ndarray):
        arr = np.asarray(points, dtype=float)
    else:
        rows = []
        for p in points:
            if isinstance(p, Point2D):
                rows.append((p.x, p.y))
            else:
                rows.append((float(p[0]), float(p[1])))
        arr = np.asarray(rows, dtype=float).reshape(-1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GeometryError(f"expected (n, 2) coordinates, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError("non-finite coordinates in point set")
    return arr


@dataclass(frozen=True)
class MeshSettings:
    """Controls for build_mesh.

    max_edge_km bounds the triangle edge length (uniform lattice case).
    extension_km is the buffer beyond the data hull; None means
    DEFAULT_EXTENSION_FACTOR times the hull diameter. exterior_coarsen > 1
    coarsens the lattice outside the data bounding box (cheaper meshes for
    simulation work; edge bound then only holds in the interior).
    """

    max_edge_km: float = 5.0
    extension_km: float | None = None
    exterior_coarsen: float = 1.0

    def __post_init__(self):
        if self.max_edge_km <= 0:
            raise GeometryError("max_edge_km must be positive")
        if self.extension_km is not None and self.extension_km < 0:
            raise GeometryError("extension_km must be nonnegative")
        if self.exterior_coarsen < 1.0:
            raise GeometryError("exterior_coarsen must be >= 1")


class TriangleMesh:
    """Triangulation of the extended study region.

    vertices: (m, 2) array; triangles: (t, 3) int array. The first
    n_input vertices are the input points in their given order.
    """

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray,
                 extension_km: float, n_input: int, delaunay: Delaunay):
        self.vertices = vertices
        self.triangles = triangles
        self.extension_km = float(extension_km)
        self.n_input = int(n_input)
        self._delaunay = delaunay
        areas = triangle_areas(vertices, triangles)
        if np.any(areas <= 0):
            raise GeometryError("mesh contains degenerate (zero-area) triangles")
        self._areas = areas

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def triangle_areas(self) -> np.ndarray:
        return self._areas

    def edge_lengths(self) -> np.ndarray:
        """Lengths of every triangle edge (with multiplicity)."""
        v = self.vertices
        t = self.triangles
        out = []
        for a, b in ((0, 1), (1, 2), (2, 0)):
            out.append(np.linalg.norm(v[t[:, a]] - v[t[:, b]], axis=1))
        return np.concatenate(out)

    def find_triangles(self, points: np.ndarray) -> np.ndarray:
        """Index of the containing triangle per point, -1 if outside the hull."""
        pts = as_points_array(points)
        simplex = self._delaunay.find_simplex(pts, tol=COORD_TOL)
        return simplex

    def contains(self, points) -> np.ndarray:
        return self.find_triangles(as_points_array(points)) >= 0

    def barycentric(self, points: np.ndarray):
        """Containing triangle index and barycentric weights for each point."""
        pts = as_points_array(points)
        simplex = self.find_triangles(pts)
        if np.any(simplex < 0):
            bad = pts[simplex < 0][0]
            raise GeometryError(f"point ({bad[0]:.6g}, {bad[1]:.6g}) lies outside the mesh")
        T = self._delaunay.transform[simplex]
        b = np.einsum("nij,nj->ni", T[:, :2, :], pts - T[:, 2, :])
        bary = np.column_stack([b, 1.0 - b.sum(axis=1)])
        return simplex, bary

    def dump_csv(self, vertices_path, triangles_path) -> None:
        """Debug dump of the mesh as two CSV files."""
        np.savetxt(vertices_path, self.vertices, delimiter=",",
                   header="x_km,y_km", comments="", fmt="%.12g")
        np.savetxt(triangles_path, self.triangles, delimiter=",",
                   header="v0,v1,v2", comments="", fmt="%d")


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v1 = vertices[triangles[:, 0]]
    v2 = vertices[triangles[:, 1]]
    v3 = vertices[triangles[:, 2]]
    return 0.5 * np.abs((v2[:, 0] - v1[:, 0]) * (v3[:, 1] - v1[:, 1])
                        - (v3[:, 0] - v1[:, 0]) * (v2[:, 1] - v1[:, 1]))


def _lattice(xmin, xmax, ymin, ymax, spacing) -> np.ndarray:
    nx = max(int(np.ceil((xmax - xmin) / spacing)) + 1, 2)
    ny = max(int(np.ceil((ymax - ymin) / spacing)) + 1, 2)
    xs = xmin + np.arange(nx) * spacing
    ys = ymin + np.arange(ny) * spacing
    X, Y = np.meshgrid(xs, ys)
    return np.column_stack([X.ravel(), Y.ravel()])


def build_mesh(sites, grid_nodes=None, settings: MeshSettings | None = None) -> TriangleMesh:
    """Triangulate the study region around the given supports.

    All site locations and catchment grid nodes become interior to the
    mesh; sites and nodes are inserted as vertices on top of a regular
    background lattice whose spacing enforces the max edge length. The
    hull is the data bounding box padded by the extension distance.
    """
    settings = settings or MeshSettings()
    pts = [as_points_array(sites)]
    if grid_nodes is not None and len(grid_nodes):
        pts.append(as_points_array(grid_nodes))
    inputs = np.vstack(pts)

    # drop duplicated input points, keeping first occurrences
    keep = np.ones(len(inputs), dtype=bool)
    tree = cKDTree(inputs)
    for i, j in sorted(tree.query_pairs(COORD_TOL)):
        if keep[i]:
            keep[j] = False
    inputs = inputs[keep]
    if len(inputs) < 3:
        raise GeometryError("need at least 3 distinct points to build a mesh")

    xmin, ymin = inputs.min(axis=0)
    xmax, ymax = inputs.max(axis=0)
    diameter = float(np.hypot(xmax - xmin, ymax - ymin))
    if diameter <= COORD_TOL:
        raise GeometryError("input points are coincident")
    extension = settings.extension_km
    if extension is None:
        extension = DEFAULT_EXTENSION_FACTOR * diameter

    spacing = settings.max_edge_km / np.sqrt(2.0)
    pad = max(extension, spacing)
    if settings.exterior_coarsen == 1.0:
        lattice = _lattice(xmin - pad, xmax + pad, ymin - pad, ymax + pad, spacing)
    else:
        inner = _lattice(xmin - spacing, xmax + spacing,
                         ymin - spacing, ymax + spacing, spacing)
        coarse = settings.exterior_coarsen * spacing
        outer = _lattice(xmin - pad, xmax + pad, ymin - pad, ymax + pad, coarse)
        in_box = ((outer[:, 0] > xmin - spacing - COORD_TOL)
                  & (outer[:, 0] < xmax + spacing + COORD_TOL)
                  & (outer[:, 1] > ymin - spacing - COORD_TOL)
                  & (outer[:, 1] < ymax + spacing + COORD_TOL))
        lattice = np.vstack([inner, outer[~in_box]])

    # lattice points too close to an input would create sliver triangles
    dist, _ = cKDTree(inputs).query(lattice)
    lattice = lattice[dist > 0.25 * spacing]

    # Edge bound: the background lattice guarantees max_edge almost
    # everywhere; gaps left by dropped lattice points are repaired by
    # splitting any remaining long edge at its midpoint.
    extra: list[np.ndarray] = []
    max_edge = settings.max_edge_km * max(1.0, settings.exterior_coarsen)
    for _ in range(8):
        vertices = np.vstack([inputs, lattice] + extra)
        try:
            delaunay = Delaunay(vertices)
        except QhullError as exc:
            raise GeometryError(f"triangulation failed (collinear input?): {exc}") from exc
        tri = np.asarray(delaunay.simplices, dtype=np.int64)
        long_mids = _long_edge_midpoints(vertices, tri, max_edge * (1 + 1e-12))
        if len(long_mids) == 0:
            break
        extra.append(long_mids)
    else:
        raise GeometryError("edge-length refinement did not converge")

    mesh = TriangleMesh(vertices, tri, extension_km=extension,
                        n_input=len(inputs), delaunay=delaunay)
    inside = mesh.contains(inputs)
    if not np.all(inside):
        raise GeometryError("an input point fell outside the triangulated hull")
    return mesh


def _long_edge_midpoints(vertices: np.ndarray, triangles: np.ndarray,
                         max_edge: float) -> np.ndarray:
    pairs = np.vstack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    lengths = np.linalg.norm(vertices[pairs[:, 0]] - vertices[pairs[:, 1]], axis=1)
    bad = pairs[lengths > max_edge]
    if len(bad) == 0:
        return np.empty((0, 2))
    return 0.5 * (vertices[bad[:, 0]] + vertices[bad[:, 1]])


def interior_vertex_mask(mesh: TriangleMesh, depth_km: float) -> np.ndarray:
    """Vertices farther than depth_km from the mesh hull boundary.

    depth_km is capped at the mesh extension distance, so a very long
    range still leaves the directly data-supported region available.
    """
    depth = min(depth_km, mesh.extension_km)
    hull = mesh._delaunay.convex_hull  # (e, 2) vertex index pairs
    a = mesh.vertices[hull[:, 0]]
    b = mesh.vertices[hull[:, 1]]
    p = mesh.vertices[:, None, :]  # (m, 1, 2)
    ab = (b - a)[None, :, :]
    ap = p - a[None, :, :]
    denom = np.maximum((ab * ab).sum(axis=2), 1e-300)
    t = np.clip((ap * ab).sum(axis=2) / denom, 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * ab
    d = np.linalg.norm(p - closest, axis=2).min(axis=1)
    return d >= depth - COORD_TOL


@dataclass(frozen=True)
class FemMatrices:
    """Lumped mass matrix C (diagonal, km^2) and stiffness matrix G."""

    C: sp.dia_matrix
    G: sp.csc_matrix

    @property
    def n(self) -> int:
        return self.C.shape[0]

    def mass_diagonal(self) -> np.ndarray:
        return np.asarray(self.C.diagonal())


def fem_matrices(mesh: TriangleMesh) -> FemMatrices:
    """Assemble P1 finite-element mass and stiffness matrices.

    The mass matrix is lumped (row sums of the consistent element mass),
    so its inverse stays diagonal in the precision construction.
    """
    v = mesh.vertices
    t = mesh.triangles
    area = mesh.triangle_areas()
    if np.any(area <= 0):
        raise GeometryError("degenerate triangle in FEM assembly")
    m = mesh.n_vertices

    lumped = np.zeros(m)
    for k in range(3):
        np.add.at(lumped, t[:, k], area / 3.0)

    v1, v2, v3 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    b = np.stack([v2[:, 1] - v3[:, 1], v3[:, 1] - v1[:, 1], v1[:, 1] - v2[:, 1]], axis=1)
    c = np.stack([v3[:, 0] - v2[:, 0], v1[:, 0] - v3[:, 0], v2[:, 0] - v1[:, 0]], axis=1)
    rows, cols, vals = [], [], []
    for i in range(3):
        for j in range(3):
            rows.append(t[:, i])
            cols.append(t[:, j])
            vals.append((b[:, i] * b[:, j] + c[:, i] * c[:, j]) / (4.0 * area))
    G = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(m, m)).tocsc()
    G = 0.5 * (G + G.T)  # kill assembly round-off asymmetry
    return FemMatrices(C=sp.diags(lumped).todia(), G=G.tocsc())


class ProjectionRow:
    """Convex-combination weights over mesh vertices (one observation support)."""

    __slots__ = ("indices", "weights")

    def __init__(self, indices: np.ndarray, weights: np.ndarray):
        order = np.argsort(indices)
        self.indices = np.asarray(indices, dtype=np.int64)[order]
        self.weights = np.asarray(weights, dtype=float)[order]
        if np.any(self.weights < 0):
            raise GeometryError("projection weights must be nonnegative")
        s = self.weights.sum()
        if abs(s - 1.0) > 1e-12:
            raise GeometryError(f"projection weights sum to {s!r}, expected 1")

    def as_sparse(self, n: int) -> sp.csr_matrix:
        return sp.csr_matrix((self.weights, (np.zeros_like(self.indices), self.indices)),
                             shape=(1, n))

    def dense(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        out[self.indices] = self.weights
        return out

    def dot(self, values: np.ndarray) -> float:
        return float(np.dot(self.weights, np.asarray(values)[self.indices]))


def point_projector(mesh: TriangleMesh, location) -> ProjectionRow:
    """Barycentric interpolation weights of a single point location."""
    loc = _single_point(location)
    simplex, bary = mesh.barycentric(loc)
    verts = mesh.triangles[simplex[0]]
    w = bary[0]
    if np.any(w < -1e-7):
        raise GeometryError("barycentric weights strongly negative; point outside triangle")
    # snap vertex hits and edge cases to exact convex weights
    w = np.clip(w, 0.0, None)
    if w.max() >= 1.0 - COORD_TOL:
        return ProjectionRow(np.array([verts[int(w.argmax())]]), np.array([1.0]))
    w = w / w.sum()
    nz = w > 0.0
    return ProjectionRow(verts[nz], w[nz])


def _accumulate_rows(mesh: TriangleMesh, points: np.ndarray) -> np.ndarray:
    """Sum of barycentric rows of many points, as a dense length-m vector."""
    simplex, bary = mesh.barycentric(points)
    bary = np.clip(bary, 0.0, None)
    bary /= bary.sum(axis=1, keepdims=True)
    verts = mesh.triangles[simplex]
    acc = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(acc, verts[:, k], bary[:, k])
    return acc


def areal_projector(mesh: TriangleMesh, catchment: "Catchment") -> ProjectionRow:
    """Mean of the point-projector rows over the catchment's grid nodes."""
    if catchment.n_nodes == 0:
        raise GeometryError(f"catchment {catchment.id} has an empty discretization")
    inside = mesh.contains(catchment.nodes)
    if not np.all(inside):
        raise GeometryError(f"catchment {catchment.id} has grid nodes outside the mesh")
    acc = _accumulate_rows(mesh, catchment.nodes) / catchment.n_nodes
    nz = acc.nonzero()[0]
    return ProjectionRow(nz, acc[nz])


@dataclass(frozen=True, eq=False)
class Catchment:
    """An areal observation support: grid nodes on the shared global lattice."""

    id: str
    nodes: np.ndarray
    parent_ids: tuple[str, ...] = ()

    def __post_init__(self):
        nodes = as_points_array(self.nodes)
        if len(nodes) < 1:
            raise GeometryError(f"catchment {self.id} needs at least one grid node")
        object.__setattr__(self, "nodes", nodes)

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    def node_keys(self) -> set[tuple[float, float]]:
        return {(float(x), float(y)) for x, y in self.nodes}

    def contains_nodes_of(self, other: "Catchment") -> bool:
        return other.node_keys() <= self.node_keys()

    def difference(self, other: "Catchment") -> "Catchment":
        """The part of this catchment not covered by `other` (shared-node set difference)."""
        other_keys = other.node_keys()
        keep = np.array([(float(x), float(y)) not in other_keys for x, y in self.nodes])
        if not keep.any():
            raise GeometryError(f"difference {self.id} minus {other.id} is empty")
        return Catchment(id=f"{self.id}-minus-{other.id}", nodes=self.nodes[keep])


def grid_nodes_for_polygon(polygon, spacing: float = DEFAULT_GRID_SPACING_KM,
                           origin: tuple[float, float] = DEFAULT_GRID_ORIGIN) -> np.ndarray:
    """Global-lattice nodes strictly inside a shapely polygon.

    Nodes sit at cell centers (origin + (k + 1/2) * spacing), which keeps
    them off typical integer-km polygon borders; snapping to one shared
    lattice is what guarantees exact node sharing between nested
    catchments.
    """
    import shapely

    if spacing <= 0:
        raise GeometryError("grid spacing must be positive")
    x0, y0, x1, y1 = polygon.bounds
    ox, oy = origin
    i0 = int(np.floor((x0 - ox) / spacing)) - 1
    i1 = int(np.ceil((x1 - ox) / spacing)) + 1
    j0 = int(np.floor((y0 - oy) / spacing)) - 1
    j1 = int(np.ceil((y1 - oy) / spacing)) + 1
    xs = ox + (np.arange(i0, i1 + 1) + 0.5) * spacing
    ys = oy + (np.arange(j0, j1 + 1) + 0.5) * spacing
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    mask = shapely.contains_xy(polygon, pts[:, 0], pts[:, 1])
    nodes = pts[mask]
    if len(nodes) == 0:
        raise GeometryError("polygon contains no lattice nodes; grid spacing too coarse")
    return nodes


def catchment_from_polygon(cid: str, polygon, spacing: float = DEFAULT_GRID_SPACING_KM,
                           origin: tuple[float, float] = DEFAULT_GRID_ORIGIN,
                           parent_ids: tuple[str, ...] = ()) -> Catchment:
    return Catchment(id=cid, nodes=grid_nodes_for_polygon(polygon, spacing, origin),
                     parent_ids=parent_ids)


def detect_nesting(catchments: dict[str, Catchment]) -> dict[str, Catchment]:
    """Fill in parent_ids by node-set containment and validate declared parents."""
    out: dict[str, Catchment] = {}
    for cid, c in catchments.items():
        parents = []
        for oid, other in catchments.items():
            if oid == cid or other.n_nodes <= c.n_nodes:
                continue
            if other.contains_nodes_of(c):
                parents.append(oid)
        declared = set(c.parent_ids)
        found = set(parents)
        if declared - found:
            raise GeometryError(
                f"catchment {cid} declares parents {sorted(declared - found)} "
                "that do not contain all of its grid nodes")
        out[cid] = Catchment(id=c.id, nodes=c.nodes, parent_ids=tuple(sorted(found | declared)))
    return out


class Domain:
    """Shared geometry for one study region: mesh, FEM matrices, projector rows."""

    def __init__(self, sites: dict[str, tuple[float, float]],
                 catchments: dict[str, Catchment],
                 mesh_settings: MeshSettings | None = None):
        self.sites = {sid: (float(x), float(y)) for sid, (x, y) in sites.items()}
        self.catchments = detect_nesting(catchments)
        all_nodes = (np.vstack([c.nodes for c in catchments.values()])
                     if catchments else None)
        site_xy = np.array(list(self.sites.values()), dtype=float).reshape(-1, 2)
        self.mesh = build_mesh(site_xy, all_nodes, mesh_settings)
        self.fem = fem_matrices(self.mesh)
        self.site_rows = {sid: point_projector(self.mesh, xy)
                          for sid, xy in self.sites.items()}
        self.catchment_rows = {cid: areal_projector(self.mesh, c)
                               for cid, c in self.catchments.items()}

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    def row_for_site(self, site_id: str) -> ProjectionRow:
        try:
            return self.site_rows[site_id]
        except KeyError:
            raise GeometryError(f"unregistered site id {site_id!r}") from None

    def row_for_catchment(self, catchment_id: str) -> ProjectionRow:
        try:
            return self.catchment_rows[catchment_id]
        except KeyError:
            raise GeometryError(f"unregistered catchment id {catchment_id!r}") from None

    def row_for_location(self, xy) -> ProjectionRow:
        return point_projector(self.mesh, xy)
