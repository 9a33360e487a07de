import numpy as np
import pytest

from calderon_lab.geometry import CarlemanWeight, AngularIntervals, cylinder, partition_boundary
from calderon_lab.pde import (
    GridFunction,
    Potential,
    PreconditionError,
    SupportViolationError,
    TraceFunction,
    cauchy_pair,
    conductivity_to_schrodinger,
    greens_terms,
    interior_residual,
    load_field,
    save_field,
    neumann_trace,
    sample_set,
    solve_dirichlet,
    solve_linear,
    trace_of,
)
from calderon_lab.phantoms import smooth_bump


@pytest.fixture(scope="module")
def grid():
    return cylinder(resolution=(16, 8, 32)).grid


def test_x1_is_reproduced_exactly(grid):
    X1, _, _ = grid.coords
    u = solve_dirichlet(grid, 0.0, X1)
    assert np.abs(u.values - X1).max() < 1e-10


def test_neumann_of_x1_on_caps_and_side(grid):
    X1, _, _ = grid.coords
    dn = neumann_trace(GridFunction(grid, X1))
    s = dn.samples
    np.testing.assert_allclose(dn.values[s.face == 0], -1.0, atol=1e-12)
    np.testing.assert_allclose(dn.values[s.face == 1], 1.0, atol=1e-12)
    np.testing.assert_allclose(dn.values[s.face == 2], 0.0, atol=1e-12)


def test_lateral_normal_derivative_of_radius_cubed_converges():
    # oracle: d/dr |x'|^3 = 3 r^2, equal to 0.75 on the rim of a radius-0.5 disk
    errs = []
    for n in (8, 16, 32):
        g = cylinder(resolution=(8, n, 4 * n)).grid
        _, X2, X3 = g.coords
        dn = neumann_trace(GridFunction(g, np.hypot(X2, X3) ** 3))
        lat = dn.samples.face == 2
        errs.append(np.abs(dn.values[lat] - 0.75).max())
    assert errs[-1] < 1e-3
    assert errs[0] > errs[1] > errs[2]


def test_laplacian_of_radius_squared_is_four(grid):
    _, X2, X3 = grid.coords
    lap = GridFunction(grid, X2**2 + X3**2).laplacian()
    interior = ~grid.is_boundary
    np.testing.assert_allclose(lap[interior], 4.0, rtol=1e-8)


def test_exponential_solution_converges_at_second_order():
    c = 2.0
    errs = []
    for n in (16, 32, 64):
        g = cylinder(resolution=(n // 2, n // 2, n)).grid
        X1, _, _ = g.coords
        ex = np.exp(np.sqrt(c) * X1)
        u = solve_dirichlet(g, c, ex)
        errs.append(np.abs(u.values - ex).max())
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 1.7)


def test_solution_satisfies_the_discrete_equation(grid):
    rng = np.random.default_rng(3)
    q = Potential(grid, 1 + rng.uniform(0, 1, grid.shape))
    g = rng.normal(size=grid.shape)
    u = solve_dirichlet(grid, q, np.where(grid.is_boundary, g, 0))
    assert interior_residual(grid, u, q) < 1e-10 * max(1.0, u.norm())


def test_complex_potential_and_source(grid):
    X1, X2, _ = grid.coords
    q = Potential(grid, 1.0 + 0.5j * np.ones(grid.shape))
    ex = np.exp(0.3 * X1) * np.cos(0.2 * X2)
    src = GridFunction(grid, ex).values
    u = solve_dirichlet(grid, q, np.zeros(grid.shape), source=src)
    assert np.iscomplexobj(u.values)
    assert interior_residual(grid, u, q, src) < 1e-10


def test_amg_and_direct_agree(grid):
    X1, X2, X3 = grid.coords
    data = np.where(grid.is_boundary, np.exp(0.5 * X1 + 0.5 * X3), 0)
    a = solve_dirichlet(grid, 1.0, data, method="direct")
    b = solve_dirichlet(grid, 1.0, data, method="amg")
    assert np.abs(a.values - b.values).max() < 1e-9


def test_unknown_method(grid):
    with pytest.raises(ValueError):
        solve_linear(grid.stiffness, np.ones(grid.size), method="jacobi")


def test_greens_identity_with_exact_solutions():
    """Both sides agree up to discretization error, which shrinks with the grid."""
    a = np.array([0.6, 0.8, 0.0])
    b = np.array([-0.6, 0.0, 0.8])
    rel = []
    for n in (16, 32):
        g = cylinder(resolution=(n, n // 2, 2 * n)).grid
        X1, X2, X3 = g.coords
        q1 = Potential(g, 1 + 2 * smooth_bump(np.sqrt(X1**2 + X2**2 + X3**2) / 0.4))
        q2 = Potential.constant(g, 1.0)
        e1 = np.exp(a[0] * X1 + a[1] * X2 + a[2] * X3)
        u1 = solve_dirichlet(g, q1, e1)
        u2 = GridFunction(g, np.exp(b[0] * X1 + b[1] * X2 + b[2] * X3))
        vol, bnd = greens_terms(q1, q2, u1, u2, GridFunction(g, e1))
        rel.append(abs(vol - bnd) / abs(vol))
    assert rel[1] < rel[0] / 3


def test_greens_terms_precondition(grid):
    X1, _, _ = grid.coords
    u1 = GridFunction(grid, 1 + X1)
    with pytest.raises(PreconditionError):
        greens_terms(1.0, 1.0, u1, u1, GridFunction(grid, X1))


def test_cauchy_pair_rejects_data_off_gamma_D():
    dom = cylinder(resolution=(8, 8, 16))
    part = partition_boundary(dom, CarlemanWeight.linear(), AngularIntervals.whole())
    S = sample_set(dom.grid)
    with pytest.raises(SupportViolationError):
        cauchy_pair(dom, 1.0, part, TraceFunction(S, np.ones(len(S))))
    ok = TraceFunction(S, np.where(part.gamma_D, 1.0, 0.0))
    cp = cauchy_pair(dom, 1.0, part, ok)
    assert np.all(cp.neumann.values[~part.gamma_N] == 0)
    assert cp.distance(cp) == 0.0


def test_conductivity_reduction_constant_gamma(grid):
    q, check = conductivity_to_schrodinger(Potential.constant(grid, 2.0))
    assert np.abs(q.values).max() < 1e-10
    assert check < 1e-8


def test_conductivity_reduction_smooth_gamma():
    errs = []
    for n in (16, 32):
        g = cylinder(resolution=(n, n // 2, 2 * n)).grid
        X1, X2, X3 = g.coords
        gamma = Potential(g, 1 + 0.3 * np.exp(-4 * (X1**2 + X2**2 + X3**2)))
        _, check = conductivity_to_schrodinger(gamma)
        errs.append(check)
    assert errs[1] < errs[0]
    assert errs[1] < 0.05


def test_conductivity_must_be_positive(grid):
    with pytest.raises(ValueError):
        conductivity_to_schrodinger(Potential.constant(grid, -1.0))


def test_field_round_trip(tmp_path, grid):
    rng = np.random.default_rng(0)
    f = Potential(grid, rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape))
    save_field(f, tmp_path / "q.bin")
    g = load_field(tmp_path / "q.bin")
    assert isinstance(g, Potential)
    np.testing.assert_array_equal(g.values, f.values)


def test_trace_round_trip(grid):
    X1, X2, X3 = grid.coords
    u = GridFunction(grid, X1 + 2 * X2 - X3)
    t = trace_of(u)
    back = t.node_values(grid)
    np.testing.assert_allclose(back[grid.is_boundary], u.values[grid.is_boundary], atol=1e-14)


def test_interpolation_is_exact_for_x1(grid):
    X1, _, _ = grid.coords
    f = Potential(grid, X1)
    pts = np.random.default_rng(1).uniform(-0.3, 0.3, (50, 3))
    np.testing.assert_allclose(f.as_callable()(*pts.T), pts[:, 0], atol=1e-12)
    assert f.as_callable()(0.0, 0.6, 0.0) == 0.0
