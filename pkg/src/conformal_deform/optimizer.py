"""L-BFGS over displacements of a fixed reference mesh.

Every step lives on the reference domain; the deformed mesh at control
``x`` is ``reference + to_nodal(x)``. Inner products in the two-loop
recursion are those of the Riesz metric, so the method is the Hilbert-space
L-BFGS with the metric as initial inverse Hessian scaling.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .fem_metric import assemble_cr
from .functionals import LevelsetFunction, levelset_shape_dual, levelset_value
from .mesh import MeshError, TriMesh, apply_displacement, element_quality, validate
from .rkhs import KernelInterpolation
from .stokes import (
    CHANNEL_BOX,
    ConstraintState,
    StokesError,
    augmented_lagrangian,
    constraint_duals,
    dissipated_energy,
    obstacle_geometry,
    solve_stokes,
    stokes_shape_dual,
    update_multipliers,
)

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITERS = "max_iters"
LINE_SEARCH_FAILED = "line_search_failed"
MESH_DEGENERATED = "mesh_degenerated"

HISTORY_FIELDS = ("iter", "J", "grad_norm", "cr_residual", "eta_min", "eta_max", "eta_frac_gt2", "step")


class InvalidMeshError(MeshError):
    pass


class LineSearchError(RuntimeError):
    def __init__(self, message, degenerate=False):
        super().__init__(message)
        self.degenerate = degenerate


class Metric(Protocol):
    def solve(self, dual: np.ndarray) -> np.ndarray: ...
    def inner(self, u: np.ndarray, v: np.ndarray) -> float: ...


# ---------------------------------------------------------------- objectives

class LevelsetObjective:
    def __init__(self, lf: LevelsetFunction):
        self.lf = lf

    def __call__(self, mesh: TriMesh):
        return levelset_value(mesh, self.lf), levelset_shape_dual(mesh, self.lf).values


class StokesObjective:
    def __init__(self, u_inf=(1.0, 0.0)):
        self.u_inf = tuple(u_inf)

    def __call__(self, mesh: TriMesh):
        sol = solve_stokes(mesh, self.u_inf)
        return dissipated_energy(sol), stokes_shape_dual(sol).values


class AugmentedLagrangianObjective:
    """Stokes energy with area and barycentre of the hole held by an AL term."""

    def __init__(self, base, state: ConstraintState, channel_box=CHANNEL_BOX):
        self.base = base
        self.state = state
        self.box = channel_box

    def residual(self, mesh: TriMesh) -> np.ndarray:
        return self.state.residual(obstacle_geometry(mesh, self.box))

    def __call__(self, mesh: TriMesh):
        J, dJ = self.base(mesh)
        geom = obstacle_geometry(mesh, self.box)
        return augmented_lagrangian(J, dJ, self.state.residual(geom), constraint_duals(geom), self.state)


# ---------------------------------------------------------------- controls

class NodalControl:
    """Control vector equals the interleaved nodal displacement."""

    def __init__(self, n_nodes: int):
        self.size = 2 * n_nodes

    def to_nodal(self, x):
        return x

    def pullback(self, dual):
        return dual


class KernelControl:
    """Control vector holds kernel coefficients; nodes move by the kernel field."""

    def __init__(self, interp: KernelInterpolation):
        self.interp = interp
        self.size = 2 * interp.n_centers

    def to_nodal(self, x):
        return self.interp.to_nodal(x)

    def pullback(self, dual):
        return self.interp.pullback(dual)


@dataclass(eq=False)
class ShapeProblem:
    reference: TriMesh
    objective: Callable[[TriMesh], tuple[float, np.ndarray]]
    control: NodalControl | KernelControl | None = None

    def __post_init__(self):
        if self.control is None:
            self.control = NodalControl(self.reference.n_nodes)

    @property
    def size(self) -> int:
        return self.control.size

    def displaced(self, x: np.ndarray) -> TriMesh:
        return apply_displacement(self.reference, self.control.to_nodal(x).reshape(-1, 2))

    def evaluate(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        """Objective and its dual on the reference coefficients."""
        mesh = self.displaced(x)
        report = validate(mesh)
        if not report:
            raise InvalidMeshError(f"deformed mesh inverts triangle {report.bad_triangles[0]}")
        J, dual = self.objective(mesh)
        return J, self.control.pullback(dual)


# ---------------------------------------------------------------- L-BFGS

@dataclass
class LbfgsMemory:
    size: int = 5
    pairs: deque = field(default_factory=deque)

    def clear(self):
        self.pairs.clear()

    def push(self, s, y, sy):
        self.pairs.append((s, y, 1.0 / sy))
        while len(self.pairs) > self.size:
            self.pairs.popleft()

    def apply(self, g: np.ndarray, inner) -> np.ndarray:
        """Two-loop recursion ``H g`` with every product taken in ``inner``."""
        q = np.array(g, dtype=float)
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * inner(s, q)
            q -= a * y
            alphas.append(a)
        if self.pairs:
            s, y, rho = self.pairs[-1]
            q *= (1.0 / rho) / inner(y, y)
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * inner(y, q)
            q += (a - b) * s
        return q


@dataclass(eq=False)
class OptimRun:
    reference: TriMesh
    x: np.ndarray
    history: list[dict]
    status: str = MAX_ITERS
    memory: LbfgsMemory | None = None
    config: dict = field(default_factory=dict)
    message: str = ""
    accepted_steps: list[np.ndarray] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.history) - 1

    @property
    def final(self) -> dict:
        return self.history[-1]


def _snapshot(problem: ShapeProblem, x, J, gnorm, step, it, A_cr) -> dict:
    mesh = problem.displaced(x)
    f = problem.control.to_nodal(x)
    eta = element_quality(mesh)
    return {
        "iter": it,
        "J": float(J),
        "grad_norm": float(gnorm),
        "cr_residual": float(math.sqrt(max(f @ (A_cr @ f), 0.0))),
        "eta_min": float(eta.min()),
        "eta_max": float(eta.max()),
        "eta_frac_gt2": float(np.mean(eta > 2.0)),
        "step": float(step),
    }


def line_search(problem: ShapeProblem, x, J, slope, direction, initial_step=1.0,
                c1=1e-4, shrink=0.5, max_backtracks=50):
    """Backtracking Armijo search; trial meshes that invert count as failures.

    Returns ``(step, J_new, dual_new)``.
    """
    if not slope < 0:
        raise LineSearchError("direction is not a descent direction")
    t = initial_step
    invalid = 0
    for _ in range(max_backtracks + 1):
        trial = x + t * direction
        try:
            Jt, dt = problem.evaluate(trial)
        except (InvalidMeshError, StokesError):
            invalid += 1
            t *= shrink
            continue
        if np.isfinite(Jt) and Jt <= J + c1 * t * slope:
            return t, Jt, dt
        t *= shrink
    raise LineSearchError(
        f"no acceptable step after {max_backtracks} backtracks ({invalid} inverted trials)",
        degenerate=invalid > 0,
    )


def lbfgs_run(
    problem: ShapeProblem,
    metric: Metric,
    max_iters: int = 100,
    g_tol: float = 1e-6,
    memory: int = 5,
    x0: np.ndarray | None = None,
    g_rtol: float = 0.0,
    max_displacement: float | None = None,
    metric_factory: Callable[[TriMesh], Metric] | None = None,
    callback: Callable[[OptimRun], None] | None = None,
) -> OptimRun:
    """Minimise ``problem`` with Riesz-consistent L-BFGS.

    Stops once ``|grad J|_H <= max(g_tol, g_rtol * |grad J(x0)|_H)``.
    ``max_displacement`` caps the largest nodal move of the first trial step.
    ``metric_factory``, when given, rebuilds the metric on each deformed mesh
    instead of keeping the reference one.
    """
    ref = problem.reference
    A_cr = assemble_cr(ref)
    x = np.zeros(problem.size) if x0 is None else np.array(x0, dtype=float)
    mem = LbfgsMemory(memory)
    run = OptimRun(ref, x, [], memory=mem,
                   config={"max_iters": max_iters, "g_tol": g_tol, "g_rtol": g_rtol, "memory": memory})
    J, dual = problem.evaluate(x)
    g = metric.solve(dual)
    gnorm = math.sqrt(max(float(dual @ g), 0.0))
    run.history.append(_snapshot(problem, x, J, gnorm, 0.0, 0, A_cr))
    if callback:
        callback(run)
    tol = max(g_tol, g_rtol * gnorm)

    for it in range(1, max_iters + 1):
        if gnorm <= tol:
            break
        direction = -mem.apply(g, metric.inner)
        slope = float(dual @ direction)
        if not slope < 0:
            mem.clear()
            direction = -g
            slope = -gnorm**2
        t0 = 1.0
        if max_displacement is not None:
            move = np.abs(problem.control.to_nodal(direction)).reshape(-1, 2)
            peak = float(np.linalg.norm(move, axis=1).max())
            if peak > max_displacement:
                t0 = max_displacement / peak
        try:
            t, J_new, dual_new = line_search(problem, x, J, slope, direction, t0)
        except LineSearchError as exc:
            run.status = MESH_DEGENERATED if exc.degenerate else LINE_SEARCH_FAILED
            run.message = str(exc)
            log.info("iteration %d: %s", it, exc)
            break
        s = t * direction
        x = x + s
        run.accepted_steps.append(s)
        if metric_factory is not None:
            metric = metric_factory(problem.displaced(x))
            mem.clear()
        g_new = metric.solve(dual_new)
        y = g_new - g
        sy = metric.inner(s, y)
        if sy > 1e-12 * math.sqrt(max(metric.inner(s, s) * metric.inner(y, y), 0.0)):
            mem.push(s, y, sy)
        J, dual, g = J_new, dual_new, g_new
        gnorm = math.sqrt(max(float(dual @ g), 0.0))
        run.x = x
        run.history.append(_snapshot(problem, x, J, gnorm, t, it, A_cr))
        if callback:
            callback(run)
        log.debug("iter %d J=%.8g |g|=%.3e step=%.3e", it, J, gnorm, t)
    if run.status == MAX_ITERS and gnorm <= tol:
        run.status = CONVERGED
    run.x = x
    return run


def alpha_sweep(make_problem: Callable[[], ShapeProblem], make_metric: Callable[[float | None], Metric],
                alphas: Sequence[float | None], **run_kwargs) -> list[dict]:
    """One L-BFGS run per alpha (``None`` for the metric without CR term)."""
    rows = []
    for alpha in alphas:
        problem = make_problem()
        try:
            run = lbfgs_run(problem, make_metric(alpha), **run_kwargs)
        except Exception as exc:  # recorded per row
            rows.append({"alpha": alpha, "status": f"error: {exc}", "run": None})
            continue
        last = run.final
        rows.append({
            "alpha": alpha,
            "eta_max": last["eta_max"],
            "eta_frac_gt2": last["eta_frac_gt2"],
            "iterations": run.iterations,
            "grad_norm": last["grad_norm"],
            "J": last["J"],
            "status": run.status,
            "run": run,
        })
    return rows


def moving_average(values: Sequence[float], window: int = 5) -> np.ndarray:
    """Trailing average over full windows only."""
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return np.array([])
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


@dataclass(eq=False)
class ConstrainedRun:
    run: OptimRun
    state: ConstraintState
    residuals: list[np.ndarray]
    outer_iterations: int
    initial_multipliers: np.ndarray


def multiplier_estimate(J_dual: np.ndarray, c_duals: np.ndarray, metric: Metric) -> np.ndarray:
    """Least-squares multipliers minimising ``|dJ + lambda.dc|`` in the metric's dual norm."""
    C = np.atleast_2d(c_duals)
    AiC = np.column_stack([metric.solve(c) for c in C])
    return np.linalg.solve(C @ AiC, -(AiC.T @ J_dual))


def augmented_lagrangian_run(
    reference: TriMesh,
    base_objective,
    metric: Metric,
    rho: float = 10.0,
    outer_iters: int = 10,
    inner_iters: int = 30,
    g_tol: float = 0.0,
    g_rtol: float = 1e-2,
    c_tol: float = 1e-4,
    memory: int = 5,
    max_displacement: float | None = None,
    estimate_multipliers: bool = True,
    channel_box=CHANNEL_BOX,
) -> ConstrainedRun:
    """Outer multiplier loop around L-BFGS at fixed multipliers.

    Multipliers start from the least-squares estimate at the reference shape
    (or zero), follow ``lambda += rho c`` after every inner solve, and ``rho``
    doubles whenever the constraint residual fails to halve. ``g_rtol`` is
    relative to the gradient norm at the start of the first inner solve.
    """
    geom0 = obstacle_geometry(reference, channel_box)
    lam0 = np.zeros(3)
    if estimate_multipliers:
        _, dJ = base_objective(reference)
        lam0 = multiplier_estimate(dJ, constraint_duals(geom0), metric)
    state = ConstraintState(geom0.volume, geom0.barycentre, lam0.copy(), rho)
    x = np.zeros(2 * reference.n_nodes)
    history: list[dict] = []
    residuals = []
    prev = math.inf
    combined = None
    outer = 0
    tol, rtol = g_tol, g_rtol
    for outer in range(1, outer_iters + 1):
        objective = AugmentedLagrangianObjective(base_objective, state, channel_box)
        problem = ShapeProblem(reference, objective)
        run = lbfgs_run(problem, metric, inner_iters, tol, memory, x0=x, g_rtol=rtol,
                        max_displacement=max_displacement)
        if outer == 1:
            # later inner solves keep the tolerance of the first one
            tol, rtol = max(g_tol, g_rtol * run.history[0]["grad_norm"]), 0.0
        x = run.x
        c = objective.residual(problem.displaced(x))
        residuals.append(c)
        offset = history[-1]["iter"] if history else 0
        rows = run.history if not history else run.history[1:]
        history.extend({**r, "iter": r["iter"] + offset} for r in rows)
        combined = run
        norm_c = float(np.linalg.norm(c))
        log.info("outer %d: |c|=%.3e rho=%.3g status=%s", outer, norm_c, state.rho, run.status)
        if run.status in (LINE_SEARCH_FAILED, MESH_DEGENERATED):
            break
        if norm_c <= c_tol and run.status == CONVERGED:
            break
        state = update_multipliers(state, c)
        if norm_c > 0.5 * prev:
            state.rho *= 2.0
        prev = norm_c
    combined.history = history
    combined.x = x
    return ConstrainedRun(combined, state, residuals, outer, lam0)
