import sys
from pathlib import Path

import numpy as np
import pytest

from conformal_deform.functionals import fd_check
from conformal_deform.mesh import GAMMA, GAMMA_INF, TriMesh, apply_displacement
from conformal_deform.stokes import (
    QUAD_BARY,
    ConstraintState,
    StokesError,
    _assemble_blocks,
    _velocity_gradients,
    augmented_lagrangian,
    dissipated_energy,
    divergence_residual,
    obstacle_geometry,
    pressure_mean,
    solve_stokes,
    stokes_shape_dual,
    update_multipliers,
)

from conftest import unit_square

TOOLS = Path(__file__).resolve().parents[1] / "tools"


@pytest.fixture(scope="module")
def flow(channel):
    return solve_stokes(channel, (1.0, 0.0))


def obstacle_fields(mesh, rng, k):
    """Smooth random fields supported near the hole, zero on the walls."""
    r = np.linalg.norm(mesh.nodes, axis=1)
    bump = np.clip((1.5 - r) / 1.0, 0, 1) ** 2
    x, y = mesh.nodes.T
    out = []
    for _ in range(k):
        c = rng.normal(size=(2, 4))
        u = c[:, 0:1] + c[:, 1:2] * x + c[:, 2:3] * y + c[:, 3:4] * x * y
        out.append(0.02 * (u * bump).T)
    return out


def test_zero_data(channel):
    sol = solve_stokes(channel, (0.0, 0.0))
    assert np.abs(sol.velocity).max() == 0 and np.abs(sol.pressure).max() == 0
    assert dissipated_energy(sol) == 0
    assert np.all(stokes_shape_dual(sol).values == 0)


def test_constant_flow_in_box():
    m = unit_square(4)
    m = TriMesh(m.nodes, m.triangles, m.boundary_edges, [GAMMA_INF] * len(m.edge_tags))
    sol = solve_stokes(m, (0.3, -0.2))
    np.testing.assert_allclose(sol.velocity, np.tile([0.3, -0.2], (m.n_nodes, 1)), atol=1e-13)
    assert dissipated_energy(sol) < 1e-25
    assert np.abs(sol.pressure).max() < 1e-12


def test_missing_inflow_tag(square):
    with pytest.raises(StokesError):
        solve_stokes(square, (1.0, 0.0))


def test_solution_invariants(channel, flow):
    hole = channel.nodes_with_tags([GAMMA])
    walls = channel.nodes_with_tags([GAMMA_INF])
    assert np.all(flow.velocity[hole] == 0)
    assert np.all(flow.velocity[walls] == [1.0, 0.0])
    assert abs(pressure_mean(flow)) < 1e-10
    assert np.abs(divergence_residual(flow)).max() < 1e-9
    free = np.setdiff1d(np.arange(2 * channel.n_nodes), flow.dirichlet)
    assert np.abs(flow.reaction[free]).max() < 1e-9 * np.abs(flow.reaction).max()


def test_energy_matches_elementwise_oracle(channel, flow):
    blk = _assemble_blocks(channel)
    grads, area, G1, _ = _velocity_gradients(flow)
    # the bubble gradient has zero mean on each element, so the two parts decouple
    oracle = 0.5 * np.sum(area * np.einsum("mij,mij->m", G1, G1)) \
        + 0.5 * np.sum(blk.a_bb * np.einsum("mi,mi->m", flow.bubble, flow.bubble))
    assert dissipated_energy(flow) == pytest.approx(oracle, rel=1e-12)


def test_energy_equals_half_boundary_work(flow):
    u = flow.velocity.reshape(-1)
    work = u[flow.dirichlet] @ flow.reaction[flow.dirichlet]
    assert dissipated_energy(flow) == pytest.approx(0.5 * work, rel=1e-8)


def test_pressure_symmetry(channel, flow):
    key = {tuple(np.round(p, 9)): i for i, p in enumerate(channel.nodes)}
    flip_y = np.array([key[(round(x, 9) + 0.0, round(-y, 9) + 0.0)] for x, y in channel.nodes])
    flip_x = np.array([key[(round(-x, 9) + 0.0, round(y, 9) + 0.0)] for x, y in channel.nodes])
    p = flow.pressure
    scale = np.abs(p).max()
    # symmetric across the flow axis, antisymmetric across the vertical axis
    assert np.abs(p - p[flip_y]).max() < 1e-8 * scale
    assert np.abs(p + p[flip_x]).max() < 1e-8 * scale


def test_shape_dual_fd(channel, rng):
    dual = stokes_shape_dual(solve_stokes(channel))
    value = lambda m: dissipated_energy(solve_stokes(m))
    err = fd_check(value, dual, channel, obstacle_fields(channel, rng, 5), 1e-5)
    assert err < 1e-3


def test_shape_dual_clamped_and_symmetric(channel, flow):
    dual = stokes_shape_dual(flow)
    walls = channel.nodes_with_tags([GAMMA_INF])
    assert np.all(dual.values.reshape(-1, 2)[walls] == 0)
    r = np.linalg.norm(channel.nodes, axis=1)
    lift = np.zeros((channel.n_nodes, 2))
    lift[:, 1] = np.clip((1.5 - r) / 1.0, 0, 1)
    assert abs(dual @ lift) < 1e-8 * np.abs(dual.values).sum()


def test_boundary_form_agreement_improves():
    sys.path.insert(0, str(TOOLS))
    try:
        from make_channel_mesh import build
    finally:
        sys.path.remove(str(TOOLS))

    def X(p):
        r = np.linalg.norm(p, axis=1)
        return p / r[:, None] * (np.clip((1.3 - r) / 0.8, 0, 1) ** 2)[:, None]

    gaps = []
    for h0, h_far in ((0.1, 0.32), (0.05, 0.16)):
        mesh = build(h0, h_far)
        sol = solve_stokes(mesh)
        volume_form = stokes_shape_dual(sol) @ X(mesh.nodes)
        gaps.append(abs(volume_form - boundary_form(mesh, sol, X)))
    assert gaps[1] < 0.7 * gaps[0]


def boundary_form(mesh, sol, X):
    """``int_Gamma -1/2 |d_nu u|^2 (X . nu)`` with the element gradient at edge midpoints."""
    grads, _, G1, _ = _velocity_gradients(sol)
    owner = {}
    for k, tri in enumerate(mesh.triangles):
        for a in range(3):
            owner[frozenset((tri[a], tri[(a + 1) % 3]))] = k
    total = 0.0
    for (i, j), tag in zip(mesh.boundary_edges, mesh.edge_tags):
        if tag != GAMMA:
            continue
        k = owner[frozenset((i, j))]
        tri = list(mesh.triangles[k])
        c = next(v for v in range(3) if tri[v] not in (i, j))
        # on the edge opposite c: grad(27 l1 l2 l3) = 27 la lb grad(lc) with la = lb = 1/2
        G = G1[k] + np.outer(sol.bubble[k], 27 * 0.25 * grads[k, c])
        mid = 0.5 * (mesh.nodes[i] + mesh.nodes[j])
        nu = -mid / np.linalg.norm(mid)
        dnu = G @ nu
        total += -0.5 * (dnu @ dnu) * (X(mid[None])[0] @ nu) * np.linalg.norm(mesh.nodes[j] - mesh.nodes[i])
    return total


def test_obstacle_geometry(channel, rng):
    g = obstacle_geometry(channel)
    assert g.volume == pytest.approx(np.pi / 4, rel=5e-3)
    assert g.volume < np.pi / 4
    assert np.abs(g.barycentre).max() < 1e-12
    for X in obstacle_fields(channel, rng, 3):
        t = 1e-6
        plus = obstacle_geometry(apply_displacement(channel, t * X))
        minus = obstacle_geometry(apply_displacement(channel, -t * X))
        fd_vol = (plus.volume - minus.volume) / (2 * t)
        assert fd_vol == pytest.approx(g.volume_dual @ X.ravel(), rel=1e-6)
        fd_bc = (plus.barycentre - minus.barycentre) / (2 * t)
        np.testing.assert_allclose(fd_bc, g.barycentre_dual @ X.ravel(), rtol=1e-5, atol=1e-9)


def test_obstacle_geometry_requires_hole(square):
    with pytest.raises(ValueError):
        obstacle_geometry(square, (0.0, 1.0, 0.0, 1.0))


def test_augmented_lagrangian_examples():
    dual = np.array([1.0, 2.0, 3.0])
    c_duals = np.eye(3)
    state = ConstraintState(1.0, [0.0, 0.0], np.zeros(3), rho=1.0)
    v, d = augmented_lagrangian(2.0, dual, np.zeros(3), c_duals, state)
    assert v == 2.0 and np.array_equal(d, dual)
    c = np.array([0.1, 0.0, 0.0])
    v, d = augmented_lagrangian(2.0, dual, c, c_duals, state)
    assert v == pytest.approx(2.005, abs=1e-15)
    np.testing.assert_allclose(d, dual + [0.1, 0, 0])
    new = update_multipliers(state, c)
    np.testing.assert_allclose(new.multipliers, [0.1, 0, 0])
    with pytest.raises(ValueError):
        ConstraintState(1.0, [0, 0], np.zeros(3), rho=0.0)


def test_quadrature_rule_is_consistent():
    assert QUAD_BARY.shape == (7, 3)
    np.testing.assert_allclose(QUAD_BARY.sum(axis=1), 1.0)
