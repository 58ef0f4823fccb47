"""Levelset shape functionals ``J(Omega) = int_Omega f`` and their shape duals.

Values and duals use the same edge-midpoint rule, so the dual is the exact
derivative of the discrete value with respect to node positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fem_metric import p1_gradients
from .mesh import TriMesh, apply_displacement, validate, MeshError

ScalarFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
GradFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class LevelsetFunction:
    f: ScalarFn
    grad: GradFn
    name: str = "levelset"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class ShapeDual:
    """Dual vector over the 2N interleaved displacement coefficients."""

    values: np.ndarray
    source: str = ""
    # True when the functional is invariant under rigid motions of the domain.
    rigid_invariant: bool = False

    def __matmul__(self, other):
        return self.values @ np.asarray(other).reshape(-1)


def clover_f(x, y, a=0.8, b=2.0, eps=0.001):
    s1 = np.sqrt((x - a) ** 2 + b * y**2)
    s2 = np.sqrt((x + a) ** 2 + b * y**2)
    s3 = np.sqrt(b * x**2 + (y - a) ** 2)
    s4 = np.sqrt(b * x**2 + (y + a) ** 2)
    return (s1 - 1) * (s2 - 1) * (s3 - 1) * (s4 - 1) - eps


def clover_grad(x, y, a=0.8, b=2.0, eps=0.001):
    s = [
        np.sqrt((x - a) ** 2 + b * y**2),
        np.sqrt((x + a) ** 2 + b * y**2),
        np.sqrt(b * x**2 + (y - a) ** 2),
        np.sqrt(b * x**2 + (y + a) ** 2),
    ]
    ds = [
        ((x - a) / s[0], b * y / s[0]),
        ((x + a) / s[1], b * y / s[1]),
        (b * x / s[2], (y - a) / s[2]),
        (b * x / s[3], (y + a) / s[3]),
    ]
    factors = [si - 1 for si in s]
    gx = np.zeros(np.broadcast(x, y).shape)
    gy = np.zeros_like(gx)
    for k in range(4):
        others = np.prod([factors[j] for j in range(4) if j != k], axis=0)
        gx = gx + ds[k][0] * others
        gy = gy + ds[k][1] * others
    return gx, gy


def clover(a: float = 0.8, b: float = 2.0, eps: float = 0.001) -> LevelsetFunction:
    return LevelsetFunction(
        lambda x, y: clover_f(x, y, a, b, eps),
        lambda x, y: clover_grad(x, y, a, b, eps),
        "clover",
        {"a": a, "b": b, "eps": eps},
    )


def annulus_f(x, y, r_prime):
    r = np.hypot(x, y)
    return (r - 1.0) * (r - r_prime)


def annulus_grad(x, y, r_prime):
    r = np.hypot(x, y)
    s = (2 * r - 1.0 - r_prime) / r
    return s * x, s * y


def annulus(r_prime: float) -> LevelsetFunction:
    """Integrand vanishing on the circles of radius ``r_prime`` and 1."""
    if not 0 < r_prime < 1:
        raise ValueError("r_prime must lie in (0, 1)")
    return LevelsetFunction(
        lambda x, y: annulus_f(x, y, r_prime),
        lambda x, y: annulus_grad(x, y, r_prime),
        "annulus",
        {"r_prime": r_prime},
    )


def constant(c: float = 1.0) -> LevelsetFunction:
    return LevelsetFunction(
        lambda x, y: np.full(np.broadcast(x, y).shape, c),
        lambda x, y: (np.zeros(np.broadcast(x, y).shape),) * 2,
        "constant",
        {"c": c},
    )


def coordinate(axis: int) -> LevelsetFunction:
    """``f = x`` (axis 0) or ``f = y`` (axis 1)."""
    def f(x, y):
        return np.array(x if axis == 0 else y, dtype=float)

    def g(x, y):
        one = np.ones(np.broadcast(x, y).shape)
        zero = np.zeros_like(one)
        return (one, zero) if axis == 0 else (zero, one)

    return LevelsetFunction(f, g, "xy"[axis], {"axis": axis})


# edge midpoints opposite vertex 0, 1, 2 and the barycentric coordinates there
_MID_BARY = np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])


def _midpoints(mesh: TriMesh) -> np.ndarray:
    p = mesh.nodes[mesh.triangles]
    return np.einsum("qa,mad->mqd", _MID_BARY, p)


def levelset_value(mesh: TriMesh, lf: LevelsetFunction) -> float:
    mids = _midpoints(mesh)
    fq = lf.f(mids[..., 0], mids[..., 1])
    return float(np.sum(mesh.areas() * fq.mean(axis=1)))


def levelset_shape_dual(mesh: TriMesh, lf: LevelsetFunction) -> ShapeDual:
    """Volume form ``int f div X + grad f . X`` tested with every nodal basis field."""
    grads, area = p1_gradients(mesh)
    mids = _midpoints(mesh)
    fq = lf.f(mids[..., 0], mids[..., 1])
    gx, gy = lf.grad(mids[..., 0], mids[..., 1])
    w = area / 3.0
    # f div X part: (sum_q f) * grad(lambda_a)_k * |K|/3
    fsum = fq.sum(axis=1)
    local = (w * fsum)[:, None, None] * grads
    # grad f . X part: |K|/3 * sum_q df_k(q) lambda_a(q)
    local[..., 0] += w[:, None] * np.einsum("mq,qa->ma", gx, _MID_BARY)
    local[..., 1] += w[:, None] * np.einsum("mq,qa->ma", gy, _MID_BARY)
    dofs = np.stack([2 * mesh.triangles, 2 * mesh.triangles + 1], axis=-1)
    out = np.bincount(dofs.ravel(), local.ravel(), minlength=2 * mesh.n_nodes)
    return ShapeDual(out, lf.name)


def fd_check(
    value_fn: Callable[[TriMesh], float],
    dual: ShapeDual | np.ndarray,
    mesh: TriMesh,
    directions: Sequence[np.ndarray],
    step: float,
    floor: float = 1e-12,
) -> float:
    """Largest relative mismatch between central differences and ``dual``."""
    d = dual.values if isinstance(dual, ShapeDual) else np.asarray(dual)
    worst = 0.0
    for X in directions:
        X = np.asarray(X, dtype=float).reshape(-1, 2)
        plus = apply_displacement(mesh, step * X)
        minus = apply_displacement(mesh, -step * X)
        for m in (plus, minus):
            if not validate(m):
                raise MeshError("finite-difference step inverts the mesh")
        fd = (value_fn(plus) - value_fn(minus)) / (2 * step)
        exact = float(d @ X.reshape(-1))
        worst = max(worst, abs(fd - exact) / max(abs(exact), floor))
    return worst
