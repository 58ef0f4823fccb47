import numpy as np
import pytest
import scipy.linalg as sla

from conformal_deform.fem_metric import InnerProductSpec, MetricKind, build_metric, cr_residual
from conformal_deform.functionals import clover, levelset_shape_dual, levelset_value
from conformal_deform.mesh import GAMMA, gen_annulus, gen_disc, validate
from conformal_deform.optimizer import (
    CONVERGED,
    HISTORY_FIELDS,
    InvalidMeshError,
    KernelControl,
    LbfgsMemory,
    LevelsetObjective,
    LineSearchError,
    ShapeProblem,
    alpha_sweep,
    lbfgs_run,
    line_search,
    moving_average,
    multiplier_estimate,
)
from conformal_deform.rkhs import KernelInterpolation, KernelMetric, KernelModel


def fem(mesh, kind, alpha=1e-2, **kw):
    return build_metric(mesh, InnerProductSpec(kind, alpha, **kw))


class Quadratic:
    """``J(f) = 1/2 f.A f - w.f`` in terms of the nodal displacement ``f``."""

    def __init__(self, reference, A, w):
        self.ref, self.A, self.w = reference, A, w

    def __call__(self, mesh):
        f = (mesh.nodes - self.ref.nodes).ravel()
        Af = self.A @ f
        return 0.5 * f @ Af - self.w @ f, Af - self.w


@pytest.fixture(scope="module")
def quad_setup():
    mesh = gen_annulus(0.5, 1.0, 4)
    metric = fem(mesh, MetricKind.CR_PLUS_HSYM_CLAMPED)
    w = np.random.default_rng(3).normal(size=metric.size) * 1e-3
    w[metric.fixed] = 0
    return mesh, metric, Quadratic(mesh, metric.A, w)


def test_evaluate_at_zero(disc):
    lf = clover()
    problem = ShapeProblem(disc, LevelsetObjective(lf))
    J, dual = problem.evaluate(np.zeros(problem.size))
    assert J == levelset_value(disc, lf)
    assert np.array_equal(dual, levelset_shape_dual(disc, lf).values)


def test_evaluate_fd(disc, rng):
    problem = ShapeProblem(disc, LevelsetObjective(clover()))
    x = rng.normal(scale=1e-3, size=problem.size)
    v = rng.normal(size=problem.size)
    _, dual = problem.evaluate(x)
    h = 1e-6
    fd = (problem.evaluate(x + h * v)[0] - problem.evaluate(x - h * v)[0]) / (2 * h)
    assert fd == pytest.approx(dual @ v, rel=1e-4)


def test_evaluate_rejects_inverted(disc, rng):
    problem = ShapeProblem(disc, LevelsetObjective(clover()))
    with pytest.raises(InvalidMeshError):
        problem.evaluate(rng.normal(scale=2.0, size=problem.size))


def test_quadratic_converges_to_riesz_representative(quad_setup):
    mesh, metric, objective = quad_setup
    run = lbfgs_run(ShapeProblem(mesh, objective), metric, max_iters=10, g_tol=1e-10)
    assert run.status == CONVERGED and run.iterations <= 3
    exact = metric.solve(objective.w)
    assert np.abs(run.x - exact).max() < 1e-8 * np.abs(exact).max()


def test_infinite_tolerance_returns_immediately(disc, quad_setup):
    problem = ShapeProblem(disc, LevelsetObjective(clover()))
    run = lbfgs_run(problem, fem(disc, MetricKind.HSYM_RING), g_tol=np.inf)
    assert len(run.history) == 1 and run.status == CONVERGED
    assert set(run.history[0]) == set(HISTORY_FIELDS)


def test_line_search_full_step_on_quadratic(quad_setup):
    mesh, metric, objective = quad_setup
    problem = ShapeProblem(mesh, objective)
    x = np.zeros(problem.size)
    J, dual = problem.evaluate(x)
    d = -metric.solve(dual)
    t, J_new, _ = line_search(problem, x, J, float(dual @ d), d)
    assert t == 1.0 and J_new < J


def test_line_search_backtracks_past_inversion(disc):
    problem = ShapeProblem(disc, LevelsetObjective(clover()))
    x = np.zeros(problem.size)
    J, dual = problem.evaluate(x)
    d = -fem(disc, MetricKind.H1_RING).solve(dual)
    d *= 0.1 * disc.mean_edge_length() / np.abs(d).max()
    d[0] += 5 * disc.mean_edge_length()  # throw the centre node across its ring
    assert dual @ d < 0
    assert not validate(problem.displaced(d))
    t, J_new, _ = line_search(problem, x, J, float(dual @ d), d)
    assert t < 1 and J_new < J
    assert validate(problem.displaced(t * d))


def test_line_search_errors(disc):
    problem = ShapeProblem(disc, LevelsetObjective(clover()))
    x = np.zeros(problem.size)
    J, dual = problem.evaluate(x)
    with pytest.raises(LineSearchError, match="descent"):
        line_search(problem, x, J, 1.0, dual)
    # a direction that inverts the mesh at every trial length
    bad = np.zeros(problem.size)
    bad[0] = 1.0
    with pytest.raises(LineSearchError) as exc:
        line_search(problem, x, J, -1.0, bad * 1e20, max_backtracks=5)
    assert exc.value.degenerate


def test_two_loop_matches_euclidean_in_whitened_coordinates(rng):
    n = 20  # ten nodes
    Q = rng.normal(size=(n, n))
    M = Q @ Q.T + n * np.eye(n)
    R = sla.sqrtm(M).real
    Ri = np.linalg.inv(R)
    mem = LbfgsMemory(5)
    pairs = []
    for _ in range(7):
        s = rng.normal(size=n)
        y = s + 0.1 * rng.normal(size=n)  # primal gradient difference
        sy = s @ M @ y
        mem.push(s, y, sy)
        pairs.append((R @ s, R @ y))
    g = rng.normal(size=n)
    got = mem.apply(g, lambda u, v: u @ M @ v)

    # textbook Euclidean two-loop on the whitened pairs
    pairs = pairs[-5:]
    q = R @ g
    al = []
    for s, y in reversed(pairs):
        a = (s @ q) / (s @ y)
        q = q - a * y
        al.append(a)
    s, y = pairs[-1]
    q = q * (s @ y) / (y @ y)
    for (s, y), a in zip(pairs, reversed(al)):
        b = (y @ q) / (s @ y)
        q = q + (a - b) * s
    np.testing.assert_allclose(got, Ri @ q, rtol=1e-10, atol=1e-10 * np.abs(got).max())
    assert len(mem.pairs) == 5


@pytest.fixture(scope="module")
def clover_run():
    mesh = gen_disc(3.0, 12)
    metric = fem(mesh, MetricKind.CR_PLUS_HSYM)
    problem = ShapeProblem(mesh, LevelsetObjective(clover()))
    run = lbfgs_run(problem, metric, 300, 0.0, g_rtol=1e-5, max_displacement=mesh.mean_edge_length())
    return mesh, metric, problem, run


def test_clover_run_descends_to_levelset(clover_run):
    mesh, _, problem, run = clover_run
    assert run.status == CONVERGED
    J = [r["J"] for r in run.history]
    assert all(b < a for a, b in zip(J, J[1:]))
    final = problem.displaced(run.x)
    assert validate(final)
    lf = clover()
    bnd = final.nodes[final.nodes_with_tags([GAMMA])]
    gx, gy = lf.grad(*bnd.T)
    dist = np.abs(lf.f(*bnd.T)) / np.hypot(gx, gy)
    assert dist.max() < mesh.mean_edge_length()


def test_riesz_descent_along_run(clover_run):
    _, metric, problem, run = clover_run
    x = np.zeros(problem.size)
    for k, s in enumerate(run.accepted_steps[:10]):
        _, dual = problem.evaluate(x)
        g = metric.solve(dual)
        assert dual @ (-g) == pytest.approx(-metric.inner(g, g), rel=1e-10)
        assert dual @ (-g) < 0
        x = x + s


def test_holomorphy_accumulates_subadditively(clover_run):
    mesh, _, _, run = clover_run
    total = cr_residual(mesh, run.x)
    assert total <= sum(cr_residual(mesh, s) for s in run.accepted_steps) + 1e-12


def test_warm_start_matches_replay(disc):
    metric = fem(disc, MetricKind.CR_PLUS_HSYM)
    problem = ShapeProblem(disc, LevelsetObjective(clover()))
    first = lbfgs_run(problem, metric, 6, 0.0)
    second = lbfgs_run(problem, metric, 4, 0.0, x0=first.x)
    replay = np.zeros(problem.size)
    for s in first.accepted_steps + second.accepted_steps:
        replay = replay + s
    assert np.array_equal(replay, second.x)
    assert validate(problem.displaced(second.x))


def test_alpha_sweep_large_alpha_matches_base(disc):
    def make_metric(alpha):
        if alpha is None:
            return fem(disc, MetricKind.HSYM_RING)
        return fem(disc, MetricKind.CR_PLUS_HSYM, alpha)

    rows = alpha_sweep(lambda: ShapeProblem(disc, LevelsetObjective(clover())), make_metric, [1e6, None],
                       max_iters=15, g_tol=0.0)
    J_cr = [r["J"] for r in rows[0]["run"].history]
    J_base = [r["J"] for r in rows[1]["run"].history]
    n = min(len(J_cr), len(J_base))
    np.testing.assert_allclose(J_cr[:n], J_base[:n], rtol=1e-2)
    assert alpha_sweep(lambda: None, make_metric, []) == []


def test_alpha_sweep_records_failures(disc):
    rows = alpha_sweep(lambda: ShapeProblem(disc, LevelsetObjective(clover())),
                       lambda a: (_ for _ in ()).throw(np.linalg.LinAlgError("boom")), [1.0])
    assert rows[0]["status"].startswith("error") and rows[0]["run"] is None


def test_kernel_control_gradient(rng):
    mesh = gen_disc(3.0, 6)
    model = KernelModel.on_mesh(mesh, 4.0)
    control = KernelControl(KernelInterpolation(model, mesh.nodes))
    problem = ShapeProblem(mesh, LevelsetObjective(clover()), control)
    c = rng.normal(scale=1e-3, size=problem.size)
    v = rng.normal(size=problem.size)
    _, dual = problem.evaluate(c)
    h = 1e-6
    fd = (problem.evaluate(c + h * v)[0] - problem.evaluate(c - h * v)[0]) / (2 * h)
    assert fd == pytest.approx(dual @ v, rel=1e-4)
    run = lbfgs_run(problem, KernelMetric(model.system, 1e-4), 5, 0.0)
    assert run.history[-1]["J"] < run.history[0]["J"]


def test_moving_average():
    assert moving_average([1, 2, 3], 5).size == 0
    np.testing.assert_allclose(moving_average(np.arange(7.0), 5), [2, 3, 4])


def test_multiplier_estimate_recovers_exact_combination(disc, rng):
    metric = fem(disc, MetricKind.HSYM_RING)
    C = rng.normal(size=(3, metric.size))
    lam = np.array([0.5, -2.0, 1.5])
    assert np.allclose(multiplier_estimate(-lam @ C, C, metric), lam, rtol=1e-8)
