"""Stokes flow with P1 pressure and P1-bubble (mini) velocity.

The bubble ``27 l1 l2 l3`` is orthogonal to P1 velocities in the Dirichlet
form, so it only couples to the pressure and is condensed elementwise into a
pressure-pressure block. Integrals of products involving the bubble are at
most quartic and are computed with a degree-5 rule, which keeps the energy
and its shape derivative exact for the discrete problem.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem_metric import assemble_h1, p1_gradients
from .functionals import ShapeDual, constant, coordinate, levelset_shape_dual, levelset_value
from .mesh import GAMMA_INF, TriMesh

CHANNEL_BOX = (-3.0, 3.0, -2.0, 2.0)


class StokesError(RuntimeError):
    pass


def _dunavant5():
    s = np.sqrt(15.0)
    a, b = (6 - s) / 21, (6 + s) / 21
    wa, wb = (155 - s) / 1200, (155 + s) / 1200
    pts = [(1 / 3, 1 / 3, 1 / 3)]
    w = [9 / 40]
    for c, wc in ((a, wa), (b, wb)):
        for k in range(3):
            bary = [c, c, c]
            bary[k] = 1 - 2 * c
            pts.append(tuple(bary))
            w.append(wc)
    return np.array(pts), np.array(w)


QUAD_BARY, QUAD_WEIGHTS = _dunavant5()


def _bubble_gradients(grads: np.ndarray) -> np.ndarray:
    """Gradient of the cubic bubble at the quadrature points, (M, Q, 2)."""
    L = QUAD_BARY
    prods = np.stack([L[:, 1] * L[:, 2], L[:, 0] * L[:, 2], L[:, 0] * L[:, 1]], axis=1)
    return 27.0 * np.einsum("qa,mad->mqd", prods, grads)


@dataclass(frozen=True, eq=False)
class StokesSolution:
    """Nodal P1 velocity (N, 2), bubble coefficients (M, 2), P1 pressure (N,)."""

    mesh: TriMesh
    velocity: np.ndarray
    bubble: np.ndarray
    pressure: np.ndarray
    u_inf: tuple[float, float]
    reaction: np.ndarray
    dirichlet: np.ndarray


@dataclass(frozen=True, eq=False)
class _Blocks:
    A: sp.csr_matrix
    D: sp.csr_matrix
    Cp: sp.csr_matrix
    mass: np.ndarray
    g: np.ndarray  # (M, 2, 3): bubble-pressure couplings
    a_bb: np.ndarray  # (M,)


def _assemble_blocks(mesh: TriMesh) -> _Blocks:
    grads, area = p1_gradients(mesh)
    N, M = mesh.n_nodes, mesh.n_triangles
    t = mesh.triangles
    A = assemble_h1(mesh)
    # D[c, (a, i)] = -int l_c d_i l_a = -|K|/3 d_i l_a
    dofs = np.stack([2 * t, 2 * t + 1], axis=-1).reshape(M, 6)
    vals = -(area / 3)[:, None, None] * grads  # (M, a, i)
    rows = np.repeat(t, 6, axis=1)
    cols = np.tile(dofs, (1, 3))
    data = np.tile(vals.reshape(M, 6), (1, 3))
    D = sp.coo_matrix((data.ravel(), (rows.ravel(), cols.ravel())), shape=(N, 2 * N)).tocsr()
    gb = _bubble_gradients(grads)
    a_bb = area * np.einsum("q,mqd,mqd->m", QUAD_WEIGHTS, gb, gb)
    # g[i, c] = int b d_i l_c, with int b = 9|K|/20
    g = (9.0 / 20.0) * area[:, None, None] * np.transpose(grads, (0, 2, 1))
    local = np.einsum("mic,mid->mcd", g, g) / a_bb[:, None, None]
    Cp = sp.coo_matrix(
        (local.ravel(), (np.repeat(t, 3, axis=1).ravel(), np.tile(t, (1, 3)).ravel())), shape=(N, N)
    ).tocsr()
    mass = np.bincount(t.ravel(), np.repeat(area / 3, 3), minlength=N)
    return _Blocks(A, D, Cp, mass, g, a_bb)


def dirichlet_data(mesh: TriMesh, u_inf, inflow_tags=(GAMMA_INF,)) -> tuple[np.ndarray, np.ndarray]:
    """Dirichlet dofs (every boundary node) and their values."""
    bnodes = np.unique(mesh.boundary_edges)
    values = np.zeros((mesh.n_nodes, 2))
    inflow = mesh.nodes_with_tags(inflow_tags)
    values[inflow] = np.asarray(u_inf, dtype=float)
    dofs = np.sort(np.concatenate([2 * bnodes, 2 * bnodes + 1]))
    return dofs, values.reshape(-1)


def solve_stokes(mesh: TriMesh, u_inf=(1.0, 0.0), inflow_tags=(GAMMA_INF,)) -> StokesSolution:
    """Solve the discrete weak form with zero-mean pressure via one multiplier."""
    if len(mesh.nodes_with_tags(inflow_tags)) == 0 and np.any(np.asarray(u_inf) != 0):
        raise StokesError("mesh has no GAMMA_INF boundary to carry the far-field velocity")
    blk = _assemble_blocks(mesh)
    N = mesh.n_nodes
    fixed, ud_full = dirichlet_data(mesh, u_inf, inflow_tags)
    free = np.setdiff1d(np.arange(2 * N), fixed)
    A_ff = blk.A[free][:, free]
    D_f = blk.D[:, free]
    m = sp.csr_matrix(blk.mass[:, None])
    K = sp.bmat(
        [[A_ff, D_f.T, None], [D_f, -blk.Cp, m], [None, m.T, None]], format="csc"
    )
    ud = ud_full[fixed]
    rhs = np.concatenate([-(blk.A[free][:, fixed] @ ud), -(blk.D[:, fixed] @ ud), [0.0]])
    try:
        sol = spla.splu(K).solve(rhs)
    except RuntimeError as exc:
        raise StokesError(f"singular Stokes system: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise StokesError("Stokes solve produced non-finite values")
    u = ud_full.copy()
    u[free] = sol[: len(free)]
    p = sol[len(free) : len(free) + N]
    ub = -np.einsum("mic,mc->mi", blk.g, p[mesh.triangles]) / blk.a_bb[:, None]
    reaction = blk.A @ u + blk.D.T @ p
    return StokesSolution(mesh, u.reshape(-1, 2), ub, p, tuple(map(float, u_inf)), reaction, fixed)


def _velocity_gradients(sol: StokesSolution):
    """P1 part (M, 2, 2) and bubble part at quadrature points (M, Q, 2, 2)."""
    grads, area = p1_gradients(sol.mesh)
    uK = sol.velocity[sol.mesh.triangles]  # (M, a, i)
    G1 = np.einsum("mai,maj->mij", uK, grads)
    gb = _bubble_gradients(grads)
    Gb = np.einsum("mi,mqj->mqij", sol.bubble, gb)
    return grads, area, G1, Gb


def dissipated_energy(sol: StokesSolution) -> float:
    """``1/2 int du : du`` including the bubble part."""
    _, area, G1, Gb = _velocity_gradients(sol)
    du = G1[:, None] + Gb
    integrand = np.einsum("mqij,mqij->mq", du, du)
    return float(0.5 * np.sum(area * (integrand @ QUAD_WEIGHTS)))


def pressure_mean(sol: StokesSolution) -> float:
    area = sol.mesh.areas()
    return float(np.sum(area * sol.pressure[sol.mesh.triangles].mean(axis=1)))


def divergence_residual(sol: StokesSolution) -> np.ndarray:
    """``int q div u_h`` for every P1 test function ``q``."""
    blk = _assemble_blocks(sol.mesh)
    t = sol.mesh.triangles
    # -D holds int l_c div(u1)
    res = -(blk.D @ sol.velocity.reshape(-1))
    # int l_c d_i b = -int b d_i l_c = -g[i, c]
    bub = -np.einsum("mic,mi->mc", blk.g, sol.bubble)
    res += np.bincount(t.ravel(), bub.ravel(), minlength=sol.mesh.n_nodes)
    return res


def stokes_shape_dual(sol: StokesSolution, clamp_tags=(GAMMA_INF,)) -> ShapeDual:
    """Volume-form shape derivative with ``S1 = (1/2 du:du - p div u) I + p du^T - du^T du``."""
    mesh = sol.mesh
    grads, area, G1, Gb = _velocity_gradients(sol)
    du = G1[:, None] + Gb  # (M, Q, 2, 2)
    pq = np.einsum("qc,mc->mq", QUAD_BARY, sol.pressure[mesh.triangles])
    energy = 0.5 * np.einsum("mqij,mqij->mq", du, du)
    div = np.einsum("mqii->mq", du)
    eye = np.eye(2)
    S1 = (energy - pq * div)[..., None, None] * eye
    S1 = S1 + pq[..., None, None] * np.swapaxes(du, -1, -2)
    S1 = S1 - np.einsum("mqki,mqkj->mqij", du, du)
    S1int = area[:, None, None] * np.einsum("q,mqij->mij", QUAD_WEIGHTS, S1)
    # X = l_a e_k  =>  S1 : dX = sum_j S1[k, j] d_j l_a
    local = np.einsum("mkj,maj->mak", S1int, grads)
    dofs = np.stack([2 * mesh.triangles, 2 * mesh.triangles + 1], axis=-1)
    out = np.bincount(dofs.ravel(), local.ravel(), minlength=2 * mesh.n_nodes)
    clamped = mesh.nodes_with_tags(clamp_tags)
    out[2 * clamped] = 0.0
    out[2 * clamped + 1] = 0.0
    return ShapeDual(out, "stokes")


@dataclass(frozen=True)
class ObstacleGeometry:
    volume: float
    barycentre: np.ndarray
    volume_dual: np.ndarray
    barycentre_dual: np.ndarray  # (2, 2N)


def obstacle_geometry(mesh: TriMesh, channel_box=CHANNEL_BOX, clamp_tags=(GAMMA_INF,)) -> ObstacleGeometry:
    """Area and barycentre of the hole ``box \\ Omega`` and their shape duals."""
    x0, x1, y0, y1 = channel_box
    box_area = (x1 - x0) * (y1 - y0)
    box_moment = box_area * np.array([(x0 + x1) / 2, (y0 + y1) / 2])
    area = levelset_value(mesh, constant())
    moment = np.array([levelset_value(mesh, coordinate(k)) for k in (0, 1)])
    vol = box_area - area
    if vol <= 0:
        raise ValueError("obstacle area is not positive")
    bc = (box_moment - moment) / vol
    d_area = levelset_shape_dual(mesh, constant()).values
    d_mom = np.stack([levelset_shape_dual(mesh, coordinate(k)).values for k in (0, 1)])
    d_vol = -d_area
    d_bc = (-d_mom - bc[:, None] * d_vol[None, :]) / vol
    clamped = mesh.nodes_with_tags(clamp_tags)
    idx = np.concatenate([2 * clamped, 2 * clamped + 1])
    d_vol[idx] = 0.0
    d_bc[:, idx] = 0.0
    return ObstacleGeometry(vol, bc, d_vol, d_bc)


@dataclass
class ConstraintState:
    """Augmented-Lagrangian data for the hole's area and barycentre."""

    target_volume: float
    target_barycentre: np.ndarray
    multipliers: np.ndarray
    rho: float = 10.0

    def __post_init__(self):
        self.target_barycentre = np.asarray(self.target_barycentre, dtype=float)
        self.multipliers = np.asarray(self.multipliers, dtype=float)
        if not self.rho > 0:
            raise ValueError("penalty rho must be positive")

    def residual(self, geom: ObstacleGeometry) -> np.ndarray:
        return np.array(
            [geom.volume - self.target_volume, *(geom.barycentre - self.target_barycentre)]
        )


def augmented_lagrangian(J: float, J_dual: np.ndarray, c: np.ndarray, c_duals: np.ndarray,
                         state: ConstraintState) -> tuple[float, np.ndarray]:
    """``J + lambda.c + rho/2 |c|^2`` and its dual."""
    c = np.asarray(c, dtype=float)
    value = J + float(state.multipliers @ c) + 0.5 * state.rho * float(c @ c)
    dual = np.asarray(J_dual, dtype=float) + (state.multipliers + state.rho * c) @ np.asarray(c_duals)
    return value, dual


def update_multipliers(state: ConstraintState, c: np.ndarray) -> ConstraintState:
    return ConstraintState(
        state.target_volume,
        state.target_barycentre,
        state.multipliers + state.rho * np.asarray(c, dtype=float),
        state.rho,
    )


def constraint_duals(geom: ObstacleGeometry) -> np.ndarray:
    return np.vstack([geom.volume_dual, geom.barycentre_dual])
