"""P1 assembly of the deformation inner products and the Riesz solve.

Displacement coefficients are interleaved per node: ``[u1_0, u2_0, u1_1, ...]``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import MeshError, TriMesh, VectorField, boundary_distance


class MetricKind(str, enum.Enum):
    H1_RING = "H1_RING"
    HSYM_RING = "HSYM_RING"
    CR_PLUS_H1 = "CR_PLUS_H1"
    CR_PLUS_HSYM = "CR_PLUS_HSYM"
    H1_CLAMPED = "H1_CLAMPED"
    HSYM_CLAMPED = "HSYM_CLAMPED"
    CR_PLUS_H1_CLAMPED = "CR_PLUS_H1_CLAMPED"
    CR_PLUS_HSYM_CLAMPED = "CR_PLUS_HSYM_CLAMPED"

    @property
    def has_cr(self) -> bool:
        return self.value.startswith("CR_")

    @property
    def symmetric(self) -> bool:
        return "HSYM" in self.value

    @property
    def clamped(self) -> bool:
        return self.value.endswith("CLAMPED")


@dataclass(frozen=True)
class InnerProductSpec:
    kind: MetricKind
    alpha: float = 1.0
    weighted: bool = False
    epsilon: float = 0.1
    clamped_tags: frozenset = frozenset({"GAMMA_INF"})

    def __post_init__(self):
        object.__setattr__(self, "kind", MetricKind(self.kind))
        object.__setattr__(self, "clamped_tags", frozenset(self.clamped_tags))
        if self.kind.has_cr and not self.alpha > 0:
            raise ValueError("alpha must be positive for CR metrics")
        if self.weighted and not self.epsilon > 0:
            raise ValueError("epsilon must be positive for weighted metrics")


def p1_gradients(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric gradients (M, 3, 2) and signed areas (M,)."""
    p = mesh.nodes[mesh.triangles]
    area = mesh.areas()
    bad = np.flatnonzero(area <= 0)
    if len(bad):
        raise MeshError(f"degenerate or inverted triangle {int(bad[0])}")
    # grad(lambda_a) = rot90(p_c - p_b) / (2 area)
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    grads = np.stack([-e[..., 1], e[..., 0]], axis=-1) / (2 * area[:, None, None])
    return grads, area


def derivative_operator(grads: np.ndarray) -> np.ndarray:
    """Local (M, 4, 6) map from element dofs to ``[dx u1, dy u1, dx u2, dy u2]``."""
    m = len(grads)
    D = np.zeros((m, 4, 6))
    D[:, 0, 0::2] = grads[..., 0]
    D[:, 1, 0::2] = grads[..., 1]
    D[:, 2, 1::2] = grads[..., 0]
    D[:, 3, 1::2] = grads[..., 1]
    return D


_R2 = 1.0 / np.sqrt(2.0)
# rows acting on [a, b, c, d] = [dx u1, dy u1, dx u2, dy u2]
_SYM = np.array([[1, 0, 0, 0], [0, 0, 0, 1], [0, _R2, _R2, 0]])
_ASYM = np.array([[0, _R2, -_R2, 0]])
_CR = np.array([[-1, 0, 0, 1], [0, 1, 1, 0]], dtype=float)


def _dofs(mesh: TriMesh) -> np.ndarray:
    t = mesh.triangles
    return np.stack([2 * t, 2 * t + 1], axis=-1).reshape(-1, 6)


def _assemble(mesh: TriMesh, rows: np.ndarray | None, weights: np.ndarray | None = None) -> sp.csr_matrix:
    grads, area = p1_gradients(mesh)
    D = derivative_operator(grads)
    if rows is not None:
        D = np.einsum("rk,mkj->mrj", rows, D)
    w = area if weights is None else area * weights
    local = np.einsum("m,mri,mrj->mij", w, D, D)
    dofs = _dofs(mesh)
    n = 2 * mesh.n_nodes
    I = np.repeat(dofs, 6, axis=1).ravel()
    J = np.tile(dofs, (1, 6)).ravel()
    A = sp.coo_matrix((local.ravel(), (I, J)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    return A


def assemble_h1(mesh: TriMesh) -> sp.csr_matrix:
    """Matrix of ``(du, dv)`` over all four gradient entries."""
    return _assemble(mesh, None)


def assemble_hsym(mesh: TriMesh) -> sp.csr_matrix:
    """Matrix of ``(sym du, sym dv)``."""
    return _assemble(mesh, _SYM)


def assemble_asym(mesh: TriMesh) -> sp.csr_matrix:
    """Matrix of ``(asym du, asym dv)``; ``h1 = hsym + asym``."""
    return _assemble(mesh, _ASYM)


_PARTS = {"h1": None, "sym": _SYM, "asym": _ASYM, "cr": _CR}


def element_energies(mesh: TriMesh, u: np.ndarray, part: str = "h1") -> np.ndarray:
    """Per-element ``|K| |R du|^2`` without going through the assembled matrix.

    ``part`` selects ``R``: ``h1`` (all of ``du``), ``sym``, ``asym`` or ``cr``.
    Summing gives the same quadratic form as the matching assembly, but null
    fields come out at the roundoff level of ``du`` squared.
    """
    if part not in _PARTS:
        raise ValueError(f"unknown part {part!r}; choose from {sorted(_PARTS)}")
    grads, area = p1_gradients(mesh)
    D = derivative_operator(grads)
    local = np.einsum("mkj,mj->mk", D, np.asarray(u, dtype=float).reshape(-1)[_dofs(mesh)])
    rows = _PARTS[part]
    if rows is not None:
        local = local @ rows.T
    return area * np.einsum("mk,mk->m", local, local)


def weight_mu(mesh: TriMesh, epsilon: float, points: np.ndarray | None = None) -> np.ndarray:
    """Boundary-distance weight ``sqrt(eps / (d + eps))``, by default at centroids."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    pts = mesh.centroids() if points is None else points
    d = boundary_distance(mesh, pts)
    return np.sqrt(epsilon / (d + epsilon))


def assemble_cr(mesh: TriMesh, weighted: bool = False, epsilon: float = 0.1) -> sp.csr_matrix:
    """Matrix of ``(mu Bu, mu Bv)`` for the Cauchy-Riemann operator ``B``."""
    weights = weight_mu(mesh, epsilon) ** 2 if weighted else None
    return _assemble(mesh, _CR, weights)


def mean_constraint_rows(mesh: TriMesh) -> sp.csr_matrix:
    """Two rows giving ``int u1`` and ``int u2``."""
    area = mesh.areas()
    n = mesh.n_nodes
    lumped = np.bincount(mesh.triangles.ravel(), np.repeat(area / 3, 3), minlength=n)
    C = np.zeros((2, 2 * n))
    C[0, 0::2] = lumped
    C[1, 1::2] = lumped
    return sp.csr_matrix(C)


def rotation_constraint_row(mesh: TriMesh) -> sp.csr_matrix:
    """One row giving ``int (dy u1 - dx u2)``, nonzero on the rigid rotation."""
    grads, area = p1_gradients(mesh)
    D = derivative_operator(grads)
    local = area[:, None] * (D[:, 1, :] - D[:, 2, :])
    row = np.bincount(_dofs(mesh).ravel(), local.ravel(), minlength=2 * mesh.n_nodes)
    return sp.csr_matrix(row[None, :])


def clamped_dofs(mesh: TriMesh, tags) -> np.ndarray:
    nodes = mesh.nodes_with_tags(tags)
    return np.sort(np.concatenate([2 * nodes, 2 * nodes + 1]))


@dataclass(eq=False)
class MetricOperator:
    """Assembled inner product with its null-space handling and factorization.

    ``A`` is the full 2N x 2N matrix. Ring kinds carry Lagrange constraint
    rows ``C``; clamped kinds list the eliminated dofs in ``fixed``.
    """

    A: sp.csr_matrix
    C: sp.csr_matrix
    fixed: np.ndarray
    spec: InnerProductSpec | None = None
    blocks: dict = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return self.A.shape[0]

    @cached_property
    def free(self) -> np.ndarray:
        mask = np.ones(self.size, bool)
        mask[self.fixed] = False
        return np.flatnonzero(mask)

    @cached_property
    def _lu(self):
        if len(self.fixed):
            K = self.A[self.free][:, self.free].tocsc()
        else:
            K = sp.bmat([[self.A, self.C.T], [self.C, None]], format="csc")
        try:
            return spla.splu(K)
        except RuntimeError as exc:
            raise np.linalg.LinAlgError(f"singular metric system: {exc}") from exc

    def solve(self, dual: np.ndarray) -> np.ndarray:
        """Riesz representative of ``dual``: ``v.A g = dual.v`` on admissible ``v``."""
        dual = np.asarray(dual, dtype=float)
        if dual.shape != (self.size,):
            raise ValueError("dual vector has the wrong length")
        g = np.zeros(self.size)
        if len(self.fixed):
            g[self.free] = self._lu.solve(dual[self.free])
        else:
            rhs = np.concatenate([dual, np.zeros(self.C.shape[0])])
            sol = self._lu.solve(rhs)
            if not np.all(np.isfinite(sol)):
                raise np.linalg.LinAlgError("singular saddle-point system")
            g = sol[: self.size]
        return g

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(u @ (self.A @ v))

    def norm(self, u: np.ndarray) -> float:
        return float(np.sqrt(max(self.inner(u, u), 0.0)))

    def project(self, v: np.ndarray) -> np.ndarray:
        """Orthogonal (Euclidean) projection onto the admissible subspace."""
        v = np.array(v, dtype=float)
        if len(self.fixed):
            v[self.fixed] = 0.0
            return v
        C = self.C.toarray()
        return v - C.T @ np.linalg.solve(C @ C.T, C @ v)


def build_metric(mesh: TriMesh, spec: InnerProductSpec) -> MetricOperator:
    """Assemble ``(1/alpha) A_cr + A_base`` with constraints for ``spec.kind``."""
    kind = spec.kind
    base = assemble_hsym(mesh) if kind.symmetric else assemble_h1(mesh)
    blocks = {"base": base}
    A = base
    if kind.has_cr:
        A_cr = assemble_cr(mesh, spec.weighted, spec.epsilon)
        blocks["cr"] = A_cr
        A = (base + A_cr * (1.0 / spec.alpha)).tocsr()
    n = 2 * mesh.n_nodes
    if kind.clamped:
        fixed = clamped_dofs(mesh, spec.clamped_tags)
        if len(fixed) == 0:
            raise ValueError("clamped metric needs at least one clamped boundary node")
        C = sp.csr_matrix((0, n))
    else:
        fixed = np.array([], dtype=np.int64)
        C = mean_constraint_rows(mesh)
        if kind.symmetric:
            C = sp.vstack([C, rotation_constraint_row(mesh)]).tocsr()
    return MetricOperator(A, C, fixed, spec, blocks)


def riesz_gradient(metric: MetricOperator, dual: np.ndarray, mesh: TriMesh) -> VectorField:
    return VectorField(mesh, metric.solve(dual))


def cr_residual(mesh: TriMesh, field: VectorField | np.ndarray, A_cr: sp.spmatrix | None = None) -> float:
    """Unweighted ``||B u||`` in L2."""
    u = field.flat if isinstance(field, VectorField) else np.asarray(field).reshape(-1)
    if A_cr is None:
        A_cr = assemble_cr(mesh)
    return float(np.sqrt(max(u @ (A_cr @ u), 0.0)))


def export_matrix(path, A: sp.spmatrix) -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(A))
