import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calderon_lab.geometry import AngularIntervals, GeometryError, StarDomain2D
from calderon_lab.phantoms import Phantom2D, Phantom3D
from calderon_lab.transforms import (
    Line2D,
    OverflowGuardError,
    SBQuery,
    TangentialReflectionError,
    broken_ray_transform,
    fourier_x1,
    heat_limit,
    mixed_transform,
    sb_apriori_bound,
    segal_bargmann,
    segal_bargmann_batch,
    shift_origin,
    simpson,
    trace_broken_ray,
    xray,
)

S2 = 0.1  # transverse Gaussian width
S1 = 0.15  # x1 Gaussian width


def gauss2d(center=(0.0, 0.0), s=S2):
    c = np.asarray(center)
    return Phantom2D(lambda x, y: np.exp(-((x - c[0]) ** 2 + (y - c[1]) ** 2) / (2 * s * s)), tuple(c), 9 * s)


def gauss3d(center=(0.0, 0.0)):
    c = np.asarray(center)

    def f(x1, x2, x3):
        return np.exp(-(x1**2) / (2 * S1**2) - ((x2 - c[0]) ** 2 + (x3 - c[1]) ** 2) / (2 * S2**2))

    return Phantom3D(f, (-9 * S1, 9 * S1), tuple(c), 9 * S2)


def test_simpson_is_exact_for_cubics():
    val, err = simpson(lambda x: x**3 - 2 * x + 1, -1.0, 2.0)
    assert abs(val - (15 / 4 - 3 + 3)) < 1e-13


def test_line_geometry():
    ln = Line2D.from_angle(0.3, 0.2)
    assert np.allclose(ln.distance_to(ln.point(np.array([0.0, 1.0, -2.0]))), 0)
    a, b = ln.chord((0.0, 0.0), 1.0)
    assert np.isclose(b - a, 2 * np.sqrt(1 - 0.04))
    assert ln.chord((0.0, 0.0), 0.1) is None
    with pytest.raises(ValueError):
        Line2D((1.0, 1.0), 0.0)


def test_xray_of_constant_is_chord_length():
    f = Phantom2D(lambda x, y: np.ones_like(x), (0.0, 0.0), 1.0)
    for sigma in (0.0, 0.5, 0.9):
        assert abs(xray(f, Line2D.from_angle(1.0, sigma)) - 2 * np.sqrt(1 - sigma**2)) < 1e-9


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(-0.3, 0.3))
def test_xray_of_gaussian(angle, sigma):
    ref = np.sqrt(2 * np.pi) * S2 * np.exp(-(sigma**2) / (2 * S2**2))
    assert abs(xray(gauss2d(), Line2D.from_angle(angle, sigma)) - ref) < 1e-9


@pytest.mark.parametrize("lam", [0.0, 0.5, -1.0])
def test_mixed_transform_of_separable_gaussian(lam):
    ln = Line2D.from_angle(0.7, 0.05)
    # closed form: x1 Fourier factor times the attenuated transverse line integral
    ref = (
        np.sqrt(2 * np.pi) * S1 * np.exp(-2 * lam**2 * S1**2)
        * np.sqrt(2 * np.pi) * S2 * np.exp(-(0.05**2) / (2 * S2**2)) * np.exp(2 * lam**2 * S2**2)
    )
    got = mixed_transform(gauss3d(), lam, ln)
    assert abs(got.value - ref) < 1e-8 * abs(ref)
    assert got.quadrature_error_estimate < 1e-8


def test_mixed_transform_is_zero_for_missing_lines():
    assert mixed_transform(gauss3d(), 0.5, Line2D.from_angle(0.0, 2.0)).value == 0


def test_fourier_x1_closed_form():
    pts = np.array([[0.0, 0.0], [0.05, -0.02]])
    xi = 3.0
    ref = np.sqrt(2 * np.pi) * S1 * np.exp(-(xi**2) * S1**2 / 2) * np.exp(-(pts**2).sum(1) / (2 * S2**2))
    np.testing.assert_allclose(fourier_x1(gauss3d(), xi, pts), ref, rtol=1e-9)


def test_reversed_line_with_shift():
    """Reversing the line flips the attenuation; the values relate by the origin shift."""
    f = gauss3d((0.05, 0.0))
    ln = Line2D.from_angle(0.4, 0.02)
    lam = 0.7
    a = mixed_transform(f, lam, ln).value
    b = mixed_transform(f, -lam, ln.reversed()).value
    # t -> -t maps e^{-2 lam t} to e^{2 lam t}; the x1 phase flips sign too
    assert abs(np.conj(b) - a) < 1e-9 * abs(a) or abs(b - np.conj(a)) < 1e-9 * abs(a)
    assert shift_origin(1.0, 0.5, 1.0) == np.exp(1.0)


# ---------------------------------------------------------------------------
# broken rays

DISK = StarDomain2D.disk()
E_ARC = AngularIntervals.from_intervals([[-20, 20]], degrees=True)


def test_single_chord_ray_matches_mixed_transform():
    E = AngularIntervals.from_intervals([[-60, 60], [120, 240]], degrees=True)
    start = np.array([np.cos(np.pi), np.sin(np.pi)])
    d = np.array([1.0, 0.05]) / np.hypot(1.0, 0.05)
    ray = trace_broken_ray(DISK, E, start, d)
    assert ray.n_reflections == 0 and ray.exits_in_E
    f = gauss3d((0.1, 0.05))
    lam = 0.5
    ln = Line2D((float(d[0]), float(d[1])), float(start @ np.array([-d[1], d[0]])))
    t_start = float(start @ d)
    br = broken_ray_transform(f, ray, lam).value
    mx = shift_origin(mixed_transform(f, lam, ln).value, lam, t_start)
    assert abs(br - mx) <= 1e-6 * abs(mx)


def test_reflection_law_and_billiard_invariance():
    start = np.array([np.cos(0.1), np.sin(0.1)])
    d = np.array([-np.cos(0.6), -np.sin(0.6)])
    ray = trace_broken_ray(DISK, E_ARC, start, d, max_bounces=50)
    assert ray.n_reflections >= 1
    assert ray.reflection_defects(DISK).max() <= 1e-8
    ang = ray.incidence_angles(DISK)
    assert np.ptp(ang) <= 1e-8


def test_non_inward_start_is_rejected():
    with pytest.raises(TangentialReflectionError):
        trace_broken_ray(DISK, E_ARC, np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    with pytest.raises(GeometryError):
        trace_broken_ray(DISK, E_ARC, np.array([0.0, 1.0]), np.array([0.0, -1.0]))


def test_unfinished_ray_has_no_transform():
    start = np.array([np.cos(0.1), np.sin(0.1)])
    ray = trace_broken_ray(DISK, E_ARC, start, -start + np.array([0.0, 0.3]), max_bounces=0)
    if not ray.exits_in_E:
        with pytest.raises(GeometryError):
            broken_ray_transform(gauss3d(), ray, 0.0)


# ---------------------------------------------------------------------------
# Segal-Bargmann


def _sb_gauss(z, h, s=S2):
    z = np.asarray(z, dtype=complex)
    n = len(z)
    return (2 * np.pi * h * s * s / (h + s * s)) ** (n / 2) * np.exp(-np.sum(z * z) / (2 * (h + s * s)))


@settings(max_examples=20, deadline=None)
@given(st.floats(-0.2, 0.2), st.floats(-0.2, 0.2), st.floats(-0.05, 0.05), st.floats(-0.05, 0.05))
def test_segal_bargmann_of_gaussian(x1, x2, y1, y2):
    h = 0.01
    z = (complex(x1, y1), complex(x2, y2))
    ref = _sb_gauss(z, h)
    got = segal_bargmann(gauss2d(), SBQuery(z, h))
    assert abs(got - ref) <= 1e-8 * max(abs(ref), 1e-300) + 1e-14


def test_batch_matches_single():
    rng = np.random.default_rng(0)
    Z = rng.uniform(-0.2, 0.2, (5, 2)) + 1j * rng.uniform(-0.05, 0.05, (5, 2))
    h = 0.05
    got = segal_bargmann_batch(gauss2d(), Z, h, nodes=96)
    ref = np.array([_sb_gauss(z, h) for z in Z])
    np.testing.assert_allclose(got, ref, rtol=1e-8)


def test_apriori_bound_at_random_points():
    rng = np.random.default_rng(1)
    h = 0.02
    Z = rng.uniform(-1, 1, (200, 2)) + 1j * rng.uniform(-0.3, 0.3, (200, 2))
    vals = segal_bargmann_batch(gauss2d(), Z, h, nodes=64)
    assert np.all(np.abs(vals) <= sb_apriori_bound(Z, h, 1.0, 2))


def test_heat_limit_recovers_point_values():
    f = gauss2d()
    x = np.array([0.03, -0.02])
    ref = np.exp(-(x @ x) / (2 * S2**2))
    assert abs(heat_limit(f, x, 1e-5) - ref) < 1e-3


def test_overflow_guard():
    with pytest.raises(OverflowGuardError):
        segal_bargmann(gauss2d(), SBQuery((1j * 10, 0j), 1e-3))
    with pytest.raises(ValueError):
        SBQuery((0j, 0j), 0.0)
