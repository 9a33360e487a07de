import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calderon_lab.geometry import StarDomain2D
from calderon_lab.linearized import (
    GAMMA,
    LinearizedScene,
    NullVector,
    OutOfNeighborhoodError,
    SceneError,
    bilinear_dot,
    cancellation_integral,
    corrector_decay,
    harmonic_vanishing_on_F,
    kelvin_points,
    kelvin_transform,
    log_abs_sb,
    null_decompose,
    phi,
    sb_decay_experiment,
)
from calderon_lab.phantoms import bump2d
from calderon_lab.transforms import SBQuery, segal_bargmann

H_SHORT = tuple(10.0 ** -np.arange(1.0, 3.01, 0.5))


@pytest.fixture(scope="module")
def scene():
    return LinearizedScene.disk(0.9, 0.2, nr=24, ntheta=96)


def _near(a, eps, n, draw):
    """A point within eps*a of 2 i a e1 (strictly inside the neighbourhood)."""
    u = np.array(draw[: 2 * n]).reshape(2, n)
    v = u[0] + 1j * u[1]
    v = v / max(np.linalg.norm(v), 1e-12) * 0.99 * 2 * eps * a * draw[-1]
    c = np.zeros(n, dtype=complex)
    c[0] = 2j * a
    return c + v


@settings(max_examples=100, deadline=None)
@given(
    st.integers(2, 3),
    st.floats(0.1, 10.0),
    st.floats(0.01, 0.4),
    st.lists(st.floats(-1, 1), min_size=7, max_size=7),
)
def test_null_decomposition(n, a, eps, draw):
    z = _near(a, eps, n, draw)
    sp = null_decompose(z, a, eps)
    np.testing.assert_allclose(sp.zeta.zeta + sp.eta.zeta, z, atol=1e-12 * max(1, abs(a)))
    for v in (sp.zeta.zeta, sp.eta.zeta):
        assert abs(bilinear_dot(v, v)) <= 1e-12 * max(1.0, np.vdot(v, v).real)
    assert sp.constant < 2.0


def test_null_decomposition_of_the_centre_is_exact():
    sp = null_decompose(np.array([2j, 0.0]), 1.0, 0.1)
    np.testing.assert_allclose(sp.zeta.zeta, GAMMA)
    np.testing.assert_allclose(sp.eta.zeta, -np.conj(GAMMA))


def test_out_of_neighbourhood():
    with pytest.raises(OutOfNeighborhoodError):
        null_decompose(np.array([2j, 1.0]), 1.0, 0.1)
    with pytest.raises(ValueError):
        NullVector(np.array([1.0, 0.0]))


def test_phi_definition():
    np.testing.assert_allclose(phi(np.array([1 + 2j, -1 + 2j])), [4 - 1, 4])


def test_kelvin_transform_preserves_harmonicity():
    u = lambda p: p[..., 0] ** 2 - p[..., 1] ** 2 + 3 * p[..., 0]
    v = kelvin_transform(u, 2, center=(0.3, -0.2), radius=0.7)
    x = np.array([1.1, 0.8])
    e = 1e-3
    lap = sum(v(x + e * d) + v(x - e * d) for d in np.eye(2)) - 4 * v(x)
    assert abs(lap / e**2) < 1e-4
    p = np.array([[0.5, 0.1]])
    np.testing.assert_allclose(kelvin_points(kelvin_points(p)), p)


def test_scene_validation():
    with pytest.raises(SceneError):
        LinearizedScene(StarDomain2D.disk((0.0, 0.0), 0.5), 0.2)
    with pytest.raises(SceneError):
        LinearizedScene.disk(0.9, c=-1.0)
    with pytest.raises(SceneError):
        LinearizedScene(StarDomain2D.disk((-1.2, 0.0), 1.2), 0.2)


def test_harmonic_field_vanishes_on_F(scene):
    hf = harmonic_vanishing_on_F(scene, NullVector(0.5 * GAMMA), 0.1)
    g = hf.grid
    rim = g.rim
    on_F = scene.in_F(g.xy[rim])
    assert np.abs(hf.values[rim][on_F]).max() == 0.0
    inner = np.setdiff1d(np.arange(g.n_nodes), rim)
    lap = g.stiffness @ hf.corrector
    assert np.abs(lap[inner]).max() < 1e-10 * max(1.0, np.abs(hf.corrector).max())


def test_corrector_decays_exponentially(scene):
    out = corrector_decay(scene, [0.05, 0.1, 0.15, 0.2], 0.02)
    assert out["exponent"] > 0
    assert all(np.diff(out["norms"]) < 0)


def test_cancellation_integral_area(scene):
    g = scene.grid
    val = cancellation_integral(1.0, np.ones(g.n_nodes), np.ones(g.n_nodes), g)
    assert abs(val - np.pi * 0.81) < 1e-2
    with pytest.raises(ValueError):
        cancellation_integral(1.0, np.ones(3), np.ones(3))


def test_log_abs_sb_matches_direct_transform():
    f = bump2d((-0.3, 0.1), 0.2)
    z = np.array([-0.2 + 0.05j, 0.0 + 0.02j])
    h = 0.01
    # same tensor Gauss grid on both sides (the window does not clip this box)
    direct = abs(segal_bargmann(f, SBQuery(tuple(z), h), nodes=200))
    assert abs(log_abs_sb(f, z, h, nodes=200) - np.log(direct)) < 1e-10


def test_log_abs_sb_is_finite_below_underflow():
    f = bump2d((-0.6, 0.0), 0.1)
    v = log_abs_sb(f, np.array([0.0 + 0j, 0.0 + 0j]), 1e-4)
    assert np.isfinite(v) and v < -700


def test_classifier_verdicts(scene):
    far = bump2d((-0.9, 0.3), 0.2)
    near = bump2d((-0.03, 0.0), 0.2)
    kw = dict(h_list=H_SHORT, n_points=3)
    assert sb_decay_experiment(scene, far, **kw).verdict == "vanishing"
    assert sb_decay_experiment(scene, near, **kw).verdict == "non-vanishing"
    with pytest.raises(ValueError):
        sb_decay_experiment(scene, far, h_list=(0.1, 0.01))
