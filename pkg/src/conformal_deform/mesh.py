"""Triangle meshes: construction, geometry queries, quality and validity."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

GAMMA = "GAMMA"
GAMMA_INF = "GAMMA_INF"
NONE = "NONE"


class MeshError(ValueError):
    """Raised for structurally invalid or degenerate meshes."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


def signed_areas(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0, p1, p2 = (nodes[triangles[:, k]] for k in range(3))
    e1 = p1 - p0
    e2 = p2 - p0
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Immutable P1 triangulation.

    ``boundary_edges`` holds node-index pairs and ``edge_tags`` the tag of each
    boundary edge (``GAMMA``, ``GAMMA_INF`` or ``NONE``).
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    edge_tags: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float).reshape(-1, 2)
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        edges = np.asarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
        tags = np.asarray(self.edge_tags, dtype=str).reshape(-1)
        if len(tags) != len(edges):
            raise MeshError("edge_tags must have one entry per boundary edge")
        if tris.size and (tris.min() < 0 or tris.max() >= len(nodes)):
            raise MeshError("triangle references a node index out of range")
        object.__setattr__(self, "nodes", _frozen(nodes))
        object.__setattr__(self, "triangles", _frozen(tris))
        object.__setattr__(self, "boundary_edges", _frozen(edges))
        object.__setattr__(self, "edge_tags", _frozen(tags))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        return signed_areas(self.nodes, self.triangles)

    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def mean_edge_length(self) -> float:
        e = self.edges()
        return float(np.linalg.norm(self.nodes[e[:, 0]] - self.nodes[e[:, 1]], axis=1).mean())

    def nodes_with_tags(self, tags: Iterable[str]) -> np.ndarray:
        tags = set(tags)
        mask = np.isin(self.edge_tags, list(tags)) if tags else np.zeros(len(self.edge_tags), bool)
        return np.unique(self.boundary_edges[mask])

    def node_tags(self) -> np.ndarray:
        """Per-node tag; interior nodes are ``NONE``.

        A node shared by edges with different tags takes ``GAMMA_INF`` first,
        then ``GAMMA``.
        """
        out = np.full(self.n_nodes, NONE, dtype=object)
        for tag in (NONE, GAMMA, GAMMA_INF):
            out[self.nodes_with_tags([tag])] = tag
        for tag in set(self.edge_tags) - {NONE, GAMMA, GAMMA_INF}:
            sel = self.nodes_with_tags([tag])
            out[sel[out[sel] == NONE]] = tag
        return out.astype(str)

    def with_nodes(self, nodes: np.ndarray) -> "TriMesh":
        return TriMesh(nodes, self.triangles, self.boundary_edges, self.edge_tags)

    def same_as(self, other: "TriMesh") -> bool:
        return (
            np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.triangles, other.triangles)
            and np.array_equal(self.boundary_edges, other.boundary_edges)
            and np.array_equal(self.edge_tags, other.edge_tags)
        )


@dataclass(frozen=True, eq=False)
class VectorField:
    """Nodal 2-vectors of a P1 field on ``mesh``."""

    mesh: TriMesh
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.size != 2 * self.mesh.n_nodes:
            raise MeshError(
                f"field has {v.size // 2} nodal values, mesh has {self.mesh.n_nodes} nodes"
            )
        object.__setattr__(self, "values", _frozen(v.reshape(-1, 2)))

    @classmethod
    def zeros(cls, mesh: TriMesh) -> "VectorField":
        return cls(mesh, np.zeros((mesh.n_nodes, 2)))

    @classmethod
    def from_function(cls, mesh: TriMesh, fn) -> "VectorField":
        x, y = mesh.nodes.T
        u1, u2 = fn(x, y)
        return cls(mesh, np.column_stack([np.broadcast_to(u1, x.shape), np.broadcast_to(u2, x.shape)]))

    @property
    def flat(self) -> np.ndarray:
        """Interleaved coefficients ``[u1_0, u2_0, u1_1, ...]``."""
        return self.values.reshape(-1)


def normalize_orientation(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    tris = np.array(triangles, dtype=np.int64)
    neg = signed_areas(nodes, tris) < 0
    tris[neg] = tris[neg][:, [0, 2, 1]]
    return tris


def boundary_edges_of(triangles: np.ndarray) -> np.ndarray:
    """Edges used by exactly one triangle, oriented as in that triangle."""
    t = np.asarray(triangles)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    key = np.sort(e, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return e[counts[inv.reshape(-1)] == 1]


def _zip_rings(inner: np.ndarray, outer: np.ndarray, pts: np.ndarray) -> list[tuple[int, int, int]]:
    """Triangulate the strip between two closed rings of increasing angle.

    At each step the shorter of the two candidate diagonals is taken.
    """
    tris = []
    ni, no = len(inner), len(outer)
    i = j = 0
    while i < ni or j < no:
        a, a_next = inner[i % ni], inner[(i + 1) % ni]
        b, b_next = outer[j % no], outer[(j + 1) % no]
        if i == ni:
            advance_inner = False
        elif j == no:
            advance_inner = True
        else:
            d_in = np.linalg.norm(pts[a_next] - pts[b])
            d_out = np.linalg.norm(pts[b_next] - pts[a])
            advance_inner = d_in <= d_out
        if advance_inner:
            tris.append((a, b, a_next))
            i += 1
        else:
            tris.append((a, b, b_next))
            j += 1
    return tris


def gen_disc(radius: float, n_rings: int) -> TriMesh:
    """Concentric-ring triangulation of a disc centred at the origin.

    Ring ``k`` carries ``6k`` nodes, which gives close to equilateral elements
    (``6 n_rings**2`` triangles in total). The outer boundary is tagged GAMMA.
    """
    if radius <= 0 or n_rings < 1:
        raise ValueError("gen_disc requires radius > 0 and n_rings >= 1")
    pts = [np.zeros(2)]
    rings = [np.array([0])]
    for k in range(1, n_rings + 1):
        m = 6 * k
        theta = 2 * np.pi * np.arange(m) / m
        r = radius * k / n_rings
        start = len(pts)
        pts.extend(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
        rings.append(np.arange(start, start + m))
    pts = np.array(pts)
    # exact boundary radius
    outer = rings[-1]
    pts[outer] *= radius / np.linalg.norm(pts[outer], axis=1, keepdims=True)
    tris = []
    for k in range(1, n_rings + 1):
        if k == 1:
            ring = rings[1]
            tris.extend((0, ring[j], ring[(j + 1) % len(ring)]) for j in range(len(ring)))
        else:
            tris.extend(_zip_rings(rings[k - 1], rings[k], pts))
    tris = normalize_orientation(pts, np.array(tris))
    bnd = np.column_stack([outer, np.roll(outer, -1)])
    return TriMesh(pts, tris, bnd, [GAMMA] * len(bnd))


def gen_annulus(r_inner: float, r_outer: float, n_rings: int) -> TriMesh:
    """Log-polar triangulation of the annulus ``r_inner < |x| < r_outer``.

    Rings are spaced geometrically and staggered by half an angular step, so
    the mesh is the image of an equilateral lattice under ``exp`` and its
    elements are nearly equilateral. Inner boundary GAMMA, outer GAMMA_INF.
    """
    if not (0 < r_inner < r_outer) or n_rings < 1:
        raise ValueError("gen_annulus requires 0 < r_inner < r_outer and n_rings >= 1")
    ds = np.log(r_outer / r_inner) / n_rings
    m = max(6, int(round(np.pi * np.sqrt(3.0) / ds)))
    pts = []
    rings = []
    for k in range(n_rings + 1):
        r = r_inner * np.exp(k * ds)
        if k == n_rings:
            r = r_outer
        theta = 2 * np.pi * (np.arange(m) + 0.5 * (k % 2)) / m
        start = len(pts)
        pts.extend(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
        rings.append(np.arange(start, start + m))
    pts = np.array(pts)
    tris = []
    for k in range(n_rings):
        tris.extend(_zip_rings(rings[k], rings[k + 1], pts))
    tris = normalize_orientation(pts, np.array(tris))
    inner, outer = rings[0], rings[-1]
    bnd = np.concatenate(
        [np.column_stack([inner, np.roll(inner, -1)]), np.column_stack([outer, np.roll(outer, -1)])]
    )
    tags = [GAMMA] * len(inner) + [GAMMA_INF] * len(outer)
    return TriMesh(pts, tris, bnd, tags)


def _triangle_lengths(mesh: TriMesh) -> np.ndarray:
    p = mesh.nodes[mesh.triangles]
    return np.stack(
        [
            np.linalg.norm(p[:, 1] - p[:, 2], axis=1),
            np.linalg.norm(p[:, 2] - p[:, 0], axis=1),
            np.linalg.norm(p[:, 0] - p[:, 1], axis=1),
        ],
        axis=1,
    )


def element_quality(mesh: TriMesh) -> np.ndarray:
    """Per-element ratio ``h(K) / (2 rho(K))``.

    ``h`` is the diameter of the smallest enclosing disc (circumdiameter for
    acute triangles, longest edge otherwise) and ``rho`` the diameter of the
    inscribed disc. Equals 1 for equilateral triangles.
    """
    lengths = _triangle_lengths(mesh)
    area = mesh.areas()
    bad = np.flatnonzero(area <= 0)
    if len(bad):
        raise MeshError(f"degenerate or inverted triangle {int(bad[0])}")
    s = lengths.sum(axis=1) / 2
    inradius = area / s
    ls = np.sort(lengths, axis=1)
    a, b, c = ls[:, 0], ls[:, 1], ls[:, 2]
    acute = a * a + b * b > c * c
    circumdiameter = lengths.prod(axis=1) / (2 * area)
    h = np.where(acute, circumdiameter, c)
    return h / (4 * inradius)


def quality_histogram(quality: np.ndarray, bin_edges: Sequence[float]) -> np.ndarray:
    """Counts per half-open bin ``[lo, hi)``.

    Values below the first edge fall into the first bin and values at or
    above the last edge into the last bin, so counts always sum to ``len(quality)``.
    """
    edges = np.asarray(bin_edges, dtype=float)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be increasing with at least two entries")
    idx = np.searchsorted(edges, np.asarray(quality, dtype=float), side="right") - 1
    idx = np.clip(idx, 0, len(edges) - 2)
    return np.bincount(idx, minlength=len(edges) - 1)


def write_histogram_csv(path, bin_edges: Sequence[float], counts: Sequence[int]) -> None:
    with open(path, "w") as fh:
        fh.write("bin_lo,bin_hi,count\n")
        for lo, hi, c in zip(bin_edges[:-1], bin_edges[1:], counts):
            fh.write(f"{float(lo)!r},{float(hi)!r},{int(c)}\n")


def apply_displacement(mesh: TriMesh, field: VectorField | np.ndarray) -> TriMesh:
    values = field.values if isinstance(field, VectorField) else np.asarray(field).reshape(-1, 2)
    if values.shape != mesh.nodes.shape:
        raise MeshError("displacement does not match mesh nodes")
    return mesh.with_nodes(mesh.nodes + values)


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    bad_triangles: tuple[int, ...] = ()

    def __bool__(self) -> bool:
        return self.ok


def validate(mesh: TriMesh, rel_tol: float = 1e-14) -> ValidationReport:
    """Check every signed area exceeds ``rel_tol`` times the bounding-box area."""
    lo = mesh.nodes.min(axis=0)
    hi = mesh.nodes.max(axis=0)
    box = float(np.prod(hi - lo))
    bad = np.flatnonzero(mesh.areas() <= rel_tol * box)
    return ValidationReport(len(bad) == 0, tuple(int(i) for i in bad))


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance matrix between points (P, 2) and segments [a, b] (S, 2)."""
    d = b - a
    L2 = np.einsum("ij,ij->i", d, d)
    w = points[:, None, :] - a[None, :, :]
    t = np.einsum("psk,sk->ps", w, d) / np.where(L2 > 0, L2, 1.0)
    t = np.clip(t, 0.0, 1.0)
    proj = a[None] + t[..., None] * d[None]
    return np.linalg.norm(points[:, None, :] - proj, axis=2)


def boundary_distance(mesh: TriMesh, query_points: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Exact distance from each query point to the polygonal boundary."""
    pts = np.asarray(query_points, dtype=float).reshape(-1, 2)
    a = mesh.nodes[mesh.boundary_edges[:, 0]]
    b = mesh.nodes[mesh.boundary_edges[:, 1]]
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s : s + chunk] = point_segment_distance(pts[s : s + chunk], a, b).min(axis=1)
    return out


def check_topology(mesh: TriMesh) -> None:
    """Raise if boundary edges disagree with the triangle adjacency."""
    t = mesh.triangles
    e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise MeshError("edge shared by more than two triangles")
    free = {tuple(x) for x in uniq[counts == 1]}
    tagged = {tuple(sorted(map(int, x))) for x in mesh.boundary_edges}
    if free != tagged:
        raise MeshError(
            f"boundary edges mismatch: {len(free - tagged)} untagged, {len(tagged - free)} not on boundary"
        )
