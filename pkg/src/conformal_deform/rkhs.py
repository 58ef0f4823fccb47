"""Wendland-kernel deformation space with a pointwise Cauchy-Riemann penalty.

Kernel coefficients are stored blockwise, ``c = [c1 (N), c2 (N)]``; the
field is ``u_k(x) = sum_j c_k[j] phi(|x - x_j| / sigma)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist

from .mesh import TriMesh, VectorField


def wendland_phi(r):
    """``(1 - r)_+^4 (4 r + 1)``: compact support, C2, positive definite in 2D."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("wendland_phi needs r >= 0")
    t = np.clip(1.0 - r, 0.0, None)
    return t**4 * (4 * r + 1)


def wendland_dphi_over_r(r):
    """``phi'(r) / r = -20 (1 - r)_+^3``, finite at ``r = 0``."""
    t = np.clip(1.0 - np.asarray(r, dtype=float), 0.0, None)
    return -20.0 * t**3


def kernel_matrix(centers: np.ndarray, sigma: float, points: np.ndarray | None = None) -> np.ndarray:
    """``k(points_i, centers_j)``; square and symmetric when ``points`` is omitted."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    pts = centers if points is None else np.asarray(points, dtype=float).reshape(-1, 2)
    return wendland_phi(cdist(pts, centers) / sigma)


def kernel_gradients(centers: np.ndarray, sigma: float, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of ``k(x_j, .)`` evaluated at ``points``: ``(d/dx, d/dy)``, each (n, N)."""
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    diff = pts[:, None, :] - centers[None, :, :]
    r = np.linalg.norm(diff, axis=2) / sigma
    s = wendland_dphi_over_r(r) / sigma**2
    return s * diff[..., 0], s * diff[..., 1]


def cr_point_matrices(centers, sigma, cr_points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``B1``, ``B2`` and the block matrix ``B = [[-B1, B2], [B2, B1]]`` (2n x 2N)."""
    B1, B2 = kernel_gradients(centers, sigma, cr_points)
    B = np.block([[-B1, B2], [B2, B1]])
    return B1, B2, B


def interpolation_matrix(centers, sigma, fem_nodes) -> np.ndarray:
    """Scalar (n_nodes x N) map from kernel coefficients to nodal values."""
    return kernel_matrix(centers, sigma, fem_nodes)


@dataclass(eq=False)
class KernelModel:
    centers: np.ndarray
    sigma: float
    cr_points: np.ndarray
    mu: np.ndarray | None = None
    coefficients: np.ndarray | None = None

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        self.cr_points = np.asarray(self.cr_points, dtype=float).reshape(-1, 2)
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.mu is None:
            self.mu = np.ones(len(self.cr_points))
        if self.coefficients is None:
            self.coefficients = np.zeros(2 * len(self.centers))

    @classmethod
    def on_mesh(cls, mesh: TriMesh, sigma_factor: float = 4.0, mu=None) -> "KernelModel":
        """Centers and CR points at the mesh nodes, ``sigma = factor * mean edge``."""
        sigma = sigma_factor * mesh.mean_edge_length()
        return cls(mesh.nodes.copy(), sigma, mesh.nodes.copy(), mu)

    def evaluate(self, points: np.ndarray, coefficients=None) -> np.ndarray:
        c = self.coefficients if coefficients is None else np.asarray(coefficients)
        N = len(self.centers)
        k = kernel_matrix(self.centers, self.sigma, points)
        return np.column_stack([k @ c[:N], k @ c[N:]])

    def cr_at_points(self, coefficients=None) -> np.ndarray:
        """``B u`` at the CR points, shape (n, 2)."""
        c = self.coefficients if coefficients is None else np.asarray(coefficients)
        Bu = self.system.B @ c
        n = len(self.cr_points)
        return np.column_stack([Bu[:n], Bu[n:]])

    @cached_property
    def system(self) -> "KernelSystem":
        Kt = kernel_matrix(self.centers, self.sigma)
        _, _, B = cr_point_matrices(self.centers, self.sigma, self.cr_points)
        return KernelSystem(Kt, B, np.tile(np.asarray(self.mu, float) ** 2, 2))


@dataclass(eq=False)
class KernelSystem:
    """``K_tilde`` (N x N), ``B`` (2n x 2N) and CR weights ``W = mu^2`` (2n)."""

    K_tilde: np.ndarray
    B: np.ndarray
    W: np.ndarray

    @property
    def n_points(self) -> int:
        return self.B.shape[0] // 2

    @cached_property
    def K(self) -> np.ndarray:
        Z = np.zeros_like(self.K_tilde)
        return np.block([[self.K_tilde, Z], [Z, self.K_tilde]])

    @cached_property
    def BtWB(self) -> np.ndarray:
        n = self.n_points
        if n == 0:
            return np.zeros_like(self.K)
        return (self.B.T * self.W) @ self.B / n


def solve_kernel_gradient(system: KernelSystem, alpha: float, F: np.ndarray) -> np.ndarray:
    """Solve ``((1/n) B^T W B + alpha K) c = F`` by Cholesky."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    M = system.BtWB + alpha * system.K
    return sla.cho_solve(sla.cho_factor(M), np.asarray(F, dtype=float))


def kernel_field_to_vectorfield(model: KernelModel, mesh: TriMesh, coefficients=None) -> VectorField:
    return VectorField(mesh, model.evaluate(mesh.nodes, coefficients))


@dataclass(eq=False)
class KernelMetric:
    """Riesz metric ``K + (1/alpha) (1/n) B^T W B`` (or plain ``K``) on coefficients."""

    system: KernelSystem
    alpha: float | None = None

    @cached_property
    def matrix(self) -> np.ndarray:
        if self.alpha is None:
            return self.system.K
        return self.system.K + self.system.BtWB / self.alpha

    @cached_property
    def _chol(self):
        return sla.cho_factor(self.matrix)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def solve(self, dual: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self._chol, np.asarray(dual, dtype=float))

    def inner(self, u, v) -> float:
        return float(u @ (self.matrix @ v))

    def norm(self, u) -> float:
        return float(np.sqrt(max(self.inner(u, u), 0.0)))

    def project(self, v):
        return np.array(v, dtype=float)


class KernelInterpolation:
    """Kernel coefficients (blockwise) to interleaved FEM nodal values and back."""

    def __init__(self, model: KernelModel, nodes: np.ndarray):
        self.I = interpolation_matrix(model.centers, model.sigma, nodes)
        self.n_centers = len(model.centers)

    def to_nodal(self, c: np.ndarray) -> np.ndarray:
        N = self.n_centers
        return np.column_stack([self.I @ c[:N], self.I @ c[N:]]).reshape(-1)

    def pullback(self, dual: np.ndarray) -> np.ndarray:
        d = np.asarray(dual).reshape(-1, 2)
        return np.concatenate([self.I.T @ d[:, 0], self.I.T @ d[:, 1]])
