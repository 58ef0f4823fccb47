import numpy as np
import pytest
from scipy.optimize import brentq

from conformal_deform.functionals import (
    annulus,
    annulus_f,
    clover,
    clover_f,
    clover_grad,
    constant,
    coordinate,
    fd_check,
    levelset_shape_dual,
    levelset_value,
)
from conformal_deform.mesh import MeshError, gen_annulus, gen_disc

from conftest import smooth_directions


def test_clover_values():
    assert clover_f(0.0, 0.0) == pytest.approx(0.2**4 - 0.001, abs=1e-15)
    assert clover_f(1.8, 0.0) == pytest.approx(-0.001, abs=1e-15)


def test_clover_grad_fd(rng):
    pts = rng.uniform(-2.5, 2.5, size=(10, 2))
    h = 1e-6
    for x, y in pts:
        gx, gy = clover_grad(x, y)
        fx = (clover_f(x + h, y) - clover_f(x - h, y)) / (2 * h)
        fy = (clover_f(x, y + h) - clover_f(x, y - h)) / (2 * h)
        assert np.hypot(gx - fx, gy - fy) < 1e-6 * max(np.hypot(gx, gy), 1e-3)


def test_annulus_levels_and_sign(rng):
    lf = annulus(0.7)
    t = rng.uniform(0, 2 * np.pi, 5)
    assert np.allclose(lf.f(np.cos(t), np.sin(t)), 0, atol=1e-15)
    assert np.all(lf.f(0.85 * np.cos(t), 0.85 * np.sin(t)) < 0)
    roots = sorted(brentq(lambda r: annulus_f(r, 0.0, 0.7), a, b, xtol=1e-14) for a, b in ((0.5, 0.8), (0.9, 1.3)))
    np.testing.assert_allclose(roots, [0.7, 1.0], atol=1e-10)
    with pytest.raises(ValueError):
        annulus(1.0)


def test_annulus_grad_fd(rng):
    lf = annulus(0.85)
    h = 1e-6
    for x, y in rng.uniform(0.3, 1.5, size=(10, 2)):
        gx, gy = lf.grad(x, y)
        assert gx == pytest.approx((lf.f(x + h, y) - lf.f(x - h, y)) / (2 * h), rel=1e-6, abs=1e-9)
        assert gy == pytest.approx((lf.f(x, y + h) - lf.f(x, y - h)) / (2 * h), rel=1e-6, abs=1e-9)


def test_annulus_inner_boundary_wants_to_grow():
    m = gen_annulus(0.5, 1.0, 6)
    lf = annulus(0.7)
    r = np.linalg.norm(m.nodes, axis=1)
    # radial push of the inner circle, fading to zero at the outer circle
    X = (m.nodes / r[:, None]) * np.clip((1 - r) / 0.5, 0, 1)[:, None]
    t = 1e-4
    plus = m.with_nodes(m.nodes + t * X)
    assert levelset_value(plus, lf) < levelset_value(m, lf)
    assert levelset_shape_dual(m, lf) @ X < 0


def test_value_simple_integrands(disc):
    area = disc.areas().sum()
    assert levelset_value(disc, constant()) == pytest.approx(area, rel=1e-14)
    assert abs(levelset_value(disc, coordinate(0))) < 1e-12 * area * 3


def test_clover_value_against_fine_quadrature():
    lf = clover()
    coarse = levelset_value(gen_disc(3.0, 18), lf)
    fine = levelset_value(gen_disc(3.0, 72), lf)
    assert abs(coarse - fine) < 0.01 * abs(fine)


def test_dual_simple_fields(disc):
    d = levelset_shape_dual(disc, constant())
    const = np.tile([0.3, -1.2], disc.n_nodes)
    assert abs(d @ const) < 1e-12
    assert d @ disc.nodes == pytest.approx(2 * disc.areas().sum(), rel=1e-12)


@pytest.mark.parametrize("lf,mesh", [(clover(), gen_disc(3.0, 8)), (annulus(0.7), gen_annulus(0.5, 1.0, 4))])
def test_dual_fd(lf, mesh, rng):
    dirs = smooth_directions(mesh, rng, 5)
    err = fd_check(lambda m: levelset_value(m, lf), levelset_shape_dual(mesh, lf), mesh, dirs, 1e-5)
    assert err < 1e-4


def test_fd_error_decreases_with_step(rng):
    mesh = gen_disc(3.0, 8)
    lf = clover()
    dual = levelset_shape_dual(mesh, lf)
    X = smooth_directions(mesh, rng, 1, scale=1.0)
    errs = [fd_check(lambda m: levelset_value(m, lf), dual, mesh, X, s) for s in (1e-1, 1e-2, 1e-3)]
    assert errs[1] < errs[0] / 5 and errs[2] < errs[1] / 5


def test_fd_linear_functional_exact(disc):
    # area is quadratic in node positions; along a translation it is constant
    err = fd_check(lambda m: levelset_value(m, coordinate(0)), levelset_shape_dual(disc, coordinate(0)), disc,
                   [np.tile([1.0, 0.0], disc.n_nodes)], 0.1)
    assert err < 1e-10


def test_fd_rejects_inverting_step(disc, rng):
    X = rng.normal(size=(disc.n_nodes, 2))
    with pytest.raises(MeshError):
        fd_check(lambda m: levelset_value(m, constant()), levelset_shape_dual(disc, constant()), disc, [X], 5.0)


def test_translation_changes_value_by_shifted_integral(disc):
    lf = clover()
    d = np.array([1e-3, -2e-3])
    moved = disc.with_nodes(disc.nodes + d)
    shifted = type(lf)(lambda x, y: lf.f(x + d[0], y + d[1]), lf.grad)
    assert levelset_value(moved, lf) == pytest.approx(levelset_value(disc, shifted), rel=1e-13)
