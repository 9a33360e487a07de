import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calderon_lab.geometry import (
    WEIGHT_VARIANTS,
    AngularIntervals,
    CarlemanWeight,
    GeometryError,
    SingularPointError,
    StarDomain2D,
    cylinder,
    describe,
    dumps_description,
    load_description,
    partition_boundary,
    points_in_hull_interior,
    reachable_set,
    weight_eval,
)

WEIGHTS = {
    "linear": CarlemanWeight("linear", alpha=(0.6, 0.8, 0.0)),
    "log": CarlemanWeight("log", x0=(-3.0, 0.5, 0.2)),
    "inverted-linear": CarlemanWeight("inverted-linear", alpha=(0.0, 0.6, 0.8), x0=(-3.0, 0.0, 0.0)),
    "arg-plane": CarlemanWeight("arg-plane", alpha=(1.0, 0.0, 0.0), beta=(0.0, 1.0, 0.0)),
    "arg-quadric": CarlemanWeight("arg-quadric", xi=(0.0, 0.0, 0.7), theta=0.3),
    "log-ratio": CarlemanWeight("log-ratio", xi=(0.0, 0.0, 2.5)),
}


def _fd_gradient(w, x, step=1e-5):
    g = np.zeros(3)
    for i in range(3):
        e = np.zeros(3)
        e[i] = step
        g[i] = (weight_eval(w, x + e)[0] - weight_eval(w, x - e)[0]) / (2 * step)
    return g


def test_every_variant_has_a_fixture():
    assert set(WEIGHTS) == set(WEIGHT_VARIANTS)


def test_linear_weight_at_origin():
    val, grad = weight_eval(CarlemanWeight.linear(), np.zeros(3))
    assert val == 0.0
    np.testing.assert_array_equal(grad, [1.0, 0.0, 0.0])


def test_log_weight_on_unit_sphere():
    x = np.array([0.6, 0.0, 0.8])
    val, grad = weight_eval(CarlemanWeight("log"), x)
    assert abs(val) < 1e-15
    np.testing.assert_allclose(grad, x, atol=1e-15)


def test_log_weight_singular_point():
    with pytest.raises(SingularPointError):
        weight_eval(CarlemanWeight("log"), np.zeros(3))


def test_arg_plane_branch_cut_raises():
    w = WEIGHTS["arg-plane"]
    with pytest.raises(SingularPointError):
        weight_eval(w, np.array([-1.0, 0.0, 0.3]))


@pytest.mark.parametrize("name", sorted(WEIGHTS))
@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3))
def test_gradient_matches_central_differences(name, pt):
    w = WEIGHTS[name]
    x = np.array(pt) + np.array([0.9, 0.0, 0.0])  # keeps x1 > 0, clear of the arg cut
    _, grad = weight_eval(w, x)
    fd = _fd_gradient(w, x)
    assert np.linalg.norm(grad - fd) <= 1e-5 * max(1.0, np.linalg.norm(grad))


def test_weight_validation():
    with pytest.raises(GeometryError):
        CarlemanWeight("linear", alpha=(1.0, 1.0, 0.0))
    with pytest.raises(GeometryError):
        CarlemanWeight("arg-plane", alpha=(1.0, 0.0, 0.0), beta=(1.0, 0.0, 0.0))
    with pytest.raises(GeometryError):
        CarlemanWeight("log-ratio", xi=(0.0, 0.0, 0.0))
    with pytest.raises(GeometryError):
        CarlemanWeight("parabolic")


def test_weight_dict_round_trip():
    for w in WEIGHTS.values():
        assert CarlemanWeight.from_dict(w.to_dict()) == w


def test_star_domain_rejects_bad_samples():
    with pytest.raises(GeometryError):
        StarDomain2D((0.0, 0.0), (1.0, -0.1))


def test_star_domain_disk_geometry():
    d = StarDomain2D.disk((0.3, -0.2), 0.7)
    th = np.linspace(0, 2 * np.pi, 50, endpoint=False)
    p = d.point(th)
    np.testing.assert_allclose(np.hypot(p[:, 0] - 0.3, p[:, 1] + 0.2), 0.7, atol=1e-14)
    np.testing.assert_allclose(d.normal(th), np.column_stack([np.cos(th), np.sin(th)]), atol=1e-14)


def test_angular_interval_wraps_around_zero():
    E = AngularIntervals.from_intervals([[350, 10]], degrees=True)
    # oracle: union of [350, 360) and [0, 10)
    th = np.deg2rad(np.array([355.0, 5.0, 0.0, 20.0, 340.0, 180.0]))
    np.testing.assert_array_equal(E.contains(th), [True, True, True, False, False, False])
    assert np.isclose(E.total_length(), np.deg2rad(20))


def test_angular_interval_merge_and_subset():
    E = AngularIntervals.from_intervals([[0, 90], [45, 135]], degrees=True)
    assert len(E.pieces) == 1
    assert AngularIntervals.from_intervals([[10, 20]], degrees=True).issubset(E)
    assert AngularIntervals.from_intervals([[0, 360]], degrees=True).full


def test_partition_linear_weight_on_cylinder():
    dom = cylinder(resolution=(8, 8, 16))
    part = partition_boundary(dom, CarlemanWeight.linear(), AngularIntervals.whole())
    s = part.samples
    assert np.all(part.labels[s.face == 2] == 0)
    assert np.all(part.labels[s.face == 1] == 1)
    assert np.all(part.labels[s.face == 0] == -1)
    assert not part.gamma_i.any()


def test_partition_log_weight_matches_radial_sign():
    dom = cylinder(resolution=(8, 8, 16))
    x0 = np.array([-2.0, 0.1, 0.0])
    part = partition_boundary(dom, CarlemanWeight("log", x0=tuple(x0)), AngularIntervals.whole())
    s = part.samples
    sign = np.sign(np.einsum("ij,ij->i", s.points - x0, s.normals))
    on = part.labels != 0
    np.testing.assert_array_equal(part.labels[on], sign[on])


def test_partition_far_log_weight_agrees_with_linear():
    R = 1e3
    dom = cylinder(resolution=(16, 16, 64))
    E = AngularIntervals.whole()
    a = partition_boundary(dom, CarlemanWeight.linear(), E, tangential_tolerance=1e-6)
    b = partition_boundary(dom, CarlemanWeight("log", x0=(-R, 0.0, 0.0)), E, tangential_tolerance=1e-6)
    caps = a.samples.face < 2
    # the caps carry the sign; the lateral boundary is tangential only for the linear weight
    assert np.mean(a.labels[caps] == b.labels[caps]) >= 0.99


def test_partition_sets_are_consistent_and_margin_enlarges():
    dom = cylinder(resolution=(8, 8, 32))
    E = AngularIntervals.from_intervals([[-60, 60]], degrees=True)
    p0 = partition_boundary(dom, CarlemanWeight.linear(), E)
    p1 = partition_boundary(dom, CarlemanWeight.linear(), E, gamma_margins=(0.1, 0.1))
    assert p0.gamma_i.any() and p0.gamma_a.any()
    assert np.all(p1.gamma_D >= p0.gamma_D) and p1.gamma_D.sum() > p0.gamma_D.sum()
    assert not np.any(p0.gamma_a & p0.gamma_i)


def test_partition_rigid_motion_invariance():
    dom_a = cylinder(center=(0.0, 0.0), resolution=(8, 8, 16))
    dom_b = cylinder(center=(0.4, -0.3), resolution=(8, 8, 16))
    wa = CarlemanWeight("log", x0=(-2.0, 0.1, 0.2))
    wb = CarlemanWeight("log", x0=(-2.0, 0.5, -0.1))
    E = AngularIntervals.whole()
    la = partition_boundary(dom_a, wa, E).labels
    lb = partition_boundary(dom_b, wb, E).labels
    np.testing.assert_array_equal(la, lb)


def test_reachable_full_E_covers_disk():
    r = reachable_set(StarDomain2D.disk(), AngularIntervals.whole(), n_grid=33)
    np.testing.assert_array_equal(r.O_mask, r.inside)


def test_reachable_empty_E_has_zero_area():
    r = reachable_set(StarDomain2D.disk(), AngularIntervals.empty(), n_grid=33)
    X, Y = np.meshgrid(r.x, r.y, indexing="ij")
    # only nodes lying exactly on the circle survive (tangent lines touch them)
    np.testing.assert_allclose(np.hypot(X[r.O_mask], Y[r.O_mask]), 1.0, atol=1e-12)
    assert not np.any(r.O_mask & (np.hypot(X, Y) < 1 - 1e-9))


def test_reachable_upper_semicircle_is_upper_half():
    n = 65
    r = reachable_set(StarDomain2D.disk(), AngularIntervals.from_intervals([[0, 180]], degrees=True), n_grid=n)
    X, Y = np.meshgrid(r.x, r.y, indexing="ij")
    half = r.inside & (Y >= 0)
    dy = r.y[1] - r.y[0]
    on_circle = np.abs(np.hypot(X, Y) - 1) < 1e-12  # tangent lines touch these
    sym = (r.O_mask ^ half) & ~on_circle
    # the symmetric difference stays within two cells of the diameter
    assert np.all(np.abs(Y[sym]) <= 2 * dy + 1e-12)


def test_reachable_brute_force_lines():
    """Membership from 2000 random directions of the line through each node."""
    dom0 = StarDomain2D.disk()
    E = AngularIntervals.from_intervals([[-30, 210]], degrees=True)
    r = reachable_set(dom0, E, n_grid=33)
    rng = np.random.default_rng(0)
    X, Y = np.meshgrid(r.x, r.y, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    ang = rng.uniform(0, np.pi, 2000)
    nrm = np.column_stack([-np.sin(ang), np.cos(ang)])
    proj = r.K_hull @ nrm.T
    s = pts @ nrm.T
    one_sided = (s <= proj.min(axis=0) + 1e-12) | (s >= proj.max(axis=0) - 1e-12)
    brute = one_sided.any(axis=1).reshape(X.shape) & r.inside
    disagree = (brute ^ r.O_mask) & ~r.boundary_flags
    assert not disagree.any()
    assert not np.any(r.O_mask & r.K_interior_mask)


def test_reachable_is_monotone_in_E():
    d = StarDomain2D.disk()
    small = reachable_set(d, AngularIntervals.from_intervals([[0, 120]], degrees=True), n_grid=33)
    big = reachable_set(d, AngularIntervals.from_intervals([[-20, 200]], degrees=True), n_grid=33)
    assert np.all(big.O_mask >= small.O_mask)


def test_hull_interior_test():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    inside = points_in_hull_interior(sq, np.array([[0.5, 0.5], [1.0, 0.5], [2.0, 0.0]]))
    np.testing.assert_array_equal(inside, [True, False, False])


def test_description_round_trip_and_unknown_key():
    dom = cylinder(resolution=(8, 8, 16))
    E = AngularIntervals.from_intervals([[350, 10]], degrees=True)
    d = describe(dom, CarlemanWeight.linear(), E)
    dom2, w2, E2, _ = load_description(json.loads(dumps_description(d)))
    assert dom2.to_dict() == dom.to_dict()
    np.testing.assert_allclose(np.array(E2.pieces), np.array(E.pieces), atol=1e-12)
    d["colour"] = "red"
    with pytest.raises(GeometryError, match="colour"):
        load_description(d)
