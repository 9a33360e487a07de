"""Acceptance suite: one PASS/FAIL line per criterion.

Each test prints its verdict line (visible in ``pytest -v`` output through
``capsys.disabled``) and then asserts the criterion.  The suite is slow
(about 8 minutes on one core); select it with ``-k acceptance`` or
deselect it with ``-m "not acceptance"``.
"""

import json
import os
import time
import warnings

import numpy as np
import pytest

from calderon_lab.carleman import (
    BumpFamily,
    carleman_sweep,
    fit_constants,
    fit_solvability_constant,
    per_h_constants,
    solvability_ratio,
    solvability_runs,
    solve_conjugated,
)
from calderon_lab.cgo import AngularBump, ComplexFrequency, build_cgo, default_bump_width, place_frame
from calderon_lab.cli import main
from calderon_lab.geometry import (
    AngularIntervals,
    CarlemanWeight,
    StarDomain2D,
    cylinder,
    partition_boundary,
    reachable_set,
)
from calderon_lab.linearized import LinearizedScene, bilinear_dot, classifier_trials, null_decompose
from calderon_lab.pde import GridFunction, Potential, greens_terms, solve_dirichlet
from calderon_lab.phantoms import Phantom2D, Phantom3D, bump2d, gaussian_profile, separable, smooth_bump
from calderon_lab.reconstruct import (
    admissible_lines,
    admissible_samples,
    IllPosednessWarning,
    cgo_limit_check,
    invert_on_O,
    moment_support_check,
    vanishing_verdict,
    width_sweep,
)
from calderon_lab.transforms import (
    QUAD_TOL,
    Line2D,
    broken_ray_transform,
    heat_limit,
    mixed_transform,
    sb_apriori_bound,
    sb_halfspace_bound,
    segal_bargmann_batch,
    shift_origin,
    trace_broken_ray,
)

pytestmark = pytest.mark.acceptance

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def report(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n{name}: {'PASS' if ok else 'FAIL'}  {detail}")


def observed_orders(hs, errs):
    return [float(np.log(errs[i] / errs[i + 1]) / np.log(hs[i] / hs[i + 1])) for i in range(len(hs) - 1)]


# ---------------------------------------------------------------------------
# C1: Green identity


def _greens_residual(n):
    """Relative gap between the volume and boundary forms of the identity.

    Exact exponential solutions e^{a.x} (a.a = 1) and e^{b.x} (b.b = 1) with
    q2 = 1; q1 = 1 + compact smooth bump, so u1 is a genuine discrete solve.
    """
    a = np.array([0.6, 0.8, 0.0])
    b = np.array([-0.6, 0.0, 0.8])
    g = cylinder(resolution=(n, n // 2, 2 * n)).grid
    X1, X2, X3 = g.coords
    q1 = Potential(g, 1.0 + 2.0 * smooth_bump(np.sqrt(X1**2 + X2**2 + X3**2) / 0.4))
    q2 = Potential.constant(g, 1.0)
    u2 = GridFunction(g, np.exp(b[0] * X1 + b[1] * X2 + b[2] * X3))
    e1 = np.exp(a[0] * X1 + a[1] * X2 + a[2] * X3)
    u1 = solve_dirichlet(g, q1, e1)
    vol, bnd = greens_terms(q1, q2, u1, u2, GridFunction(g, e1))
    return abs(vol - bnd) / abs(vol)


def test_c1_green_identity(capsys):
    t0 = time.perf_counter()
    ns = [24, 48, 96]
    res = [_greens_residual(n) for n in ns]
    wall = time.perf_counter() - t0
    orders = observed_orders([1 / n for n in ns], res)
    ok = min(orders) >= 1.8 and res[-1] <= 1e-3 and wall <= 300
    report(capsys, "C1 green identity", ok, f"residuals={['%.3e' % r for r in res]} orders={['%.2f' % o for o in orders]} time={wall:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# C2: Carleman inequality


def test_c2_carleman_constant(capsys):
    t0 = time.perf_counter()
    g = cylinder(resolution=(96, 48, 192)).grid
    rng = np.random.default_rng(2024)
    fams = [BumpFamily.random(rng, g) for _ in range(100)]
    hs = [0.2, 0.1, 0.05, 0.025]
    sweep = carleman_sweep(g, fams, hs)
    wall = time.perf_counter() - t0
    C0, _ = fit_constants(sweep)
    frac = np.mean([v.lhs <= C0 * v.rhs * (1 + 1e-12) for v in sweep])
    per_h = per_h_constants(sweep)
    c_a, c_b = per_h[0.05], per_h[0.025]
    drift = abs(c_a - c_b) / max(c_a, c_b)
    ok = frac == 1.0 and drift <= 0.2 and wall <= 600
    detail = f"C0={C0:.4g} holds={frac:.0%} per_h={ {h: round(c, 5) for h, c in per_h.items()} } drift={drift:.1%} time={wall:.0f}s"
    report(capsys, "C2 carleman constant", ok, detail)
    assert ok


# ---------------------------------------------------------------------------
# C3: conjugated solvability


def test_c3_conjugated_solvability(capsys):
    g = cylinder(resolution=(48, 24, 96)).grid
    X1, X2, X3 = g.coords
    f = (1 + 0.5j) * np.exp(-((X1 - 0.1) ** 2 + (X2 - 0.1) ** 2 + X3**2) / (2 * 0.15**2))
    taus = [8.0, 16.0, 32.0, 64.0]
    slopes = []
    for sign in (1, -1):
        nu = [solve_conjugated(g, 0.0, sign, t, 0.3, f)[1].norm_u for t in taus]
        slopes.append(float(np.polyfit(np.log(taus), np.log(nu), 1)[0]))
    C0 = fit_solvability_constant(solvability_runs(g, 0.0, 200, seed=1))
    val = solvability_runs(g, 0.0, 50, seed=2)
    frac = float(np.mean([solvability_ratio(r) <= C0 for r in val]))
    ok = max(slopes) <= -0.8 and frac >= 0.95
    report(capsys, "C3 conjugated solvability", ok, f"slopes={['%.2f' % s for s in slopes]} C0={C0:.3f} holds={frac:.0%}")
    assert ok


# ---------------------------------------------------------------------------
# C4, C5: CGO decay and the transform limit share the small cylinder

R = 0.2
E_TWO_ARCS = AngularIntervals.from_intervals([[-60, 60], [120, 240]], degrees=True)


@pytest.fixture(scope="module")
def cgo_setup():
    g = cylinder(x1_interval=(-R, R), radius=R, resolution=(192, 96, 480)).grid
    part = partition_boundary(g, CarlemanWeight.linear(), E_TWO_ARCS)
    dom0 = StarDomain2D.disk((0.0, 0.0), R)
    frame = place_frame(dom0, (1.0, 0.0), 0.0)
    bump = AngularBump(frame.theta0, default_bump_width(frame, dom0, E_TWO_ARCS))
    return g, part, dom0, frame, bump


def test_c4_cgo_decay(capsys, cgo_setup):
    g, part, _, frame, bump = cgo_setup
    ratios, defects = [], []
    for k in range(4):
        sol = build_cgo(g, 0.0, part, frame, bump, ComplexFrequency(16.0 * 2**k), 1, E=E_TWO_ARCS)
        ratios.append(sol.ratio())
        defects.append(sol.boundary_support_defect)
    dec = ratios[0] / ratios[-1]
    ok = bool(np.all(np.diff(ratios) < 0)) and dec >= 3 and max(defects) <= 1e-8
    report(capsys, "C4 cgo decay", ok, f"ratios={['%.4f' % r for r in ratios]} decrease={dec:.2f}x defect={max(defects):.1e}")
    assert ok


def test_c5_transform_limit(capsys, cgo_setup):
    g, part, dom0, frame, bump = cgo_setup
    h = bump2d((0.0, 0.0), 0.12, 5.0)
    diff = Phantom3D(lambda x1, x2, x3: h.func(x2, x3), (-R, R), (0.0, 0.0), 0.12)
    q1 = np.broadcast_to(h(g.disk.xy[:, 0], g.disk.xy[:, 1]), g.shape).copy()
    lam = 0.5
    tab = cgo_limit_check(g, q1, np.zeros(g.shape), part, frame, bump, lam, [12.0, 120.0], diff=diff, dom0=dom0, E=E_TWO_ARCS)
    rel = [r[3] / abs(r[2]) for r in tab.rows]
    drop = rel[0] / rel[1]
    # independent target: the single-line transform through the frame point
    out, target = width_sweep(diff, frame, bump, lam, dom0, halvings=2)
    errs = [e for _, _, e in out]
    mono = errs[0] > errs[1] > errs[2]
    ok = drop >= 3 and mono
    report(capsys, "C5 transform limit", ok, f"defects(tau=12,120)={['%.4f' % r for r in rel]} drop={drop:.1f}x width_errs={['%.1e' % e for e in errs]}")
    assert ok


# ---------------------------------------------------------------------------
# C6, C7: support property and reconstruction on O

DISK = StarDomain2D.disk()
E_UPPER = AngularIntervals.from_intervals([[-30, 210]], degrees=True)


def _o_mass_fraction(f, reach):
    X, Y = np.meshgrid(reach.x, reach.y, indexing="ij")
    vals = np.abs(f.func(X, Y)) * reach.inside
    return float(vals[reach.O_mask].sum() / vals.sum())


def test_c6_support_property(capsys):
    t0 = time.perf_counter()
    lams = [-1.0, -0.5, 0.0, 0.5, 1.0]
    lines = admissible_lines(DISK, E_UPPER, 200)
    tol = 10 * QUAD_TOL
    k_bump = bump2d((0.0, -0.75), 0.12)
    f_k = separable(gaussian_profile(0.0, 0.3), k_bump, (-1.5, 1.5))
    v_k = vanishing_verdict(admissible_samples(f_k, lines, lams), tol=tol)
    mom = moment_support_check(f_k, DISK, E_UPPER, kmax=3, lines=lines)
    reach = reachable_set(DISK, E_UPPER, n_grid=129)
    o_bump = bump2d((0.0, 0.2), 0.5)
    mass = _o_mass_fraction(o_bump, reach)
    f_o = separable(gaussian_profile(0.0, 0.3), o_bump, (-1.5, 1.5))
    v_o = vanishing_verdict(admissible_samples(f_o, lines, lams), tol=tol)
    wall = time.perf_counter() - t0
    ok = v_k.holds and mass >= 0.01 and v_o.max_abs > 10 * tol and mom.passes and wall <= 600
    detail = f"K max|T|={v_k.max_abs:.1e} tol={tol:.0e} O mass={mass:.2f} O max|T|={v_o.max_abs:.3f} moments={mom.passes} time={wall:.0f}s"
    report(capsys, "C6 support property", ok, detail)
    assert ok


def test_c7_reconstruction_on_O(capsys):
    reach = reachable_set(DISK, E_UPPER, n_grid=65)
    lams = np.linspace(-4, 4, 33)
    f = separable(gaussian_profile(0.0, 0.5), bump2d((0.0, 0.2), 0.7), (-2.5, 2.5))
    errs = {}
    for n in (32, 64, 128):
        lines = admissible_lines(DISK, E_UPPER, n)
        data = np.array([[mixed_transform(f, lam, ln).value for ln in lines] for lam in lams])
        with warnings.catch_warnings():
            # O nodes on the circle are seen only by tangent lines; the warning is expected
            warnings.simplefilter("ignore", IllPosednessWarning)
            rec = invert_on_O(data, lines, lams, reach, DISK, (-2.5, 2.5))
        errs[n] = rec.relative_error(f)
    ok = errs[64] <= 0.15 and errs[64] <= errs[32] and errs[128] <= errs[64]
    report(capsys, "C7 reconstruction on O", ok, f"relative L2 errors={ {k: round(v, 4) for k, v in errs.items()} }")
    assert ok


# ---------------------------------------------------------------------------
# C8: broken rays


def _gauss3d(c=(0.1, 0.05), s1=0.15, s2=0.1):
    return Phantom3D(
        lambda x1, x2, x3: np.exp(-(x1**2) / (2 * s1**2) - ((x2 - c[0]) ** 2 + (x3 - c[1]) ** 2) / (2 * s2**2)),
        (-9 * s1, 9 * s1),
        c,
        9 * s2,
    )


def test_c8_broken_rays(capsys):
    E_arc = AngularIntervals.from_intervals([[-20, 20]], degrees=True)
    refl, ptps, nref = [], [], 0
    for a0, d0 in [(0.1, 0.6), (-0.2, 0.9), (0.25, 1.2), (0.0, 0.3)]:
        start = np.array([np.cos(a0), np.sin(a0)])
        d = -np.array([np.cos(a0 + d0), np.sin(a0 + d0)])
        ray = trace_broken_ray(DISK, E_arc, start, d, max_bounces=60)
        nref += ray.n_reflections
        if ray.n_reflections:
            refl.append(ray.reflection_defects(DISK).max())
            ptps.append(np.ptp(ray.incidence_angles(DISK)))
    start = np.array([-1.0, 0.0])
    d = np.array([1.0, 0.05]) / np.hypot(1.0, 0.05)
    chord = trace_broken_ray(DISK, E_TWO_ARCS, start, d)
    f = _gauss3d()
    lam = 0.5
    ln = Line2D((float(d[0]), float(d[1])), float(start @ np.array([-d[1], d[0]])))
    mx = shift_origin(mixed_transform(f, lam, ln).value, lam, float(start @ d))
    br = broken_ray_transform(f, chord, lam).value
    chord_err = abs(br - mx) / abs(mx)
    ok = nref > 0 and chord.n_reflections == 0 and max(refl) <= 1e-8 and max(ptps) <= 1e-8 and chord_err <= 1e-6
    report(capsys, "C8 broken rays", ok, f"reflections={nref} max_defect={max(refl):.1e} max_angle_ptp={max(ptps):.1e} chord_err={chord_err:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# C9: Segal-Bargmann transform


def test_c9_segal_bargmann(capsys):
    rng = np.random.default_rng(9)
    h = 0.02
    f = bump2d((0.1, -0.2), 0.4)
    fsup = 1.0
    Z = rng.uniform(-1.5, 1.5, (10_000, 2)) + 1j * rng.uniform(-0.3, 0.3, (10_000, 2))
    vals = segal_bargmann_batch(f, Z, h, nodes=64)
    apriori = bool(np.all(np.abs(vals) <= sb_apriori_bound(Z, h, fsup, 2)))
    # half-space: support in {x1 <= 0}, Re z1 >= 0
    fh = bump2d((-0.45, 0.1), 0.4)
    Zh = Z.copy()
    Zh[:, 0] = np.abs(Zh[:, 0].real) + 1j * Zh[:, 0].imag
    vh = segal_bargmann_batch(fh, Zh, h, nodes=64)
    half = bool(np.all(np.abs(vh) <= sb_halfspace_bound(Zh, h, fsup, 2)))
    # heat-kernel limit at h = 1e-3 for a smooth phantom
    g = Phantom2D(lambda x, y: np.exp(-(x * x + y * y) / (2 * 0.2**2)), (0.0, 0.0), 1.8)
    pts = np.array([[0.0, 0.0], [0.1, -0.05], [-0.2, 0.15], [0.3, 0.1]])
    rel = [abs(heat_limit(g, x, 1e-3) - g.func(*x)) / abs(g.func(*x)) for x in pts]
    ok = apriori and half and max(rel) <= 0.05
    report(capsys, "C9 segal-bargmann", ok, f"apriori={apriori} halfspace={half} heat_limit_rel_err={max(rel):.1e} samples={len(Z)}")
    assert ok


# ---------------------------------------------------------------------------
# C10: linearized classifier and null decompositions


def test_c10_linearized_classifier(capsys):
    scene = LinearizedScene.disk(0.9, 0.2)
    res = classifier_trials(scene, 20, seed=1, h_list=tuple(10.0 ** -np.arange(1.0, 3.51, 0.5)), n_points=4)
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 4))
        a = float(rng.uniform(0.1, 10.0))
        eps = float(rng.uniform(0.01, 0.4))
        v = rng.normal(size=n) + 1j * rng.normal(size=n)
        v *= 0.99 * eps * a * rng.uniform() / np.linalg.norm(v)
        z = v.copy()
        z[0] += 2j * a
        sp = null_decompose(z, a, eps)
        for w in (sp.zeta.zeta, sp.eta.zeta):
            worst = max(worst, abs(bilinear_dot(w, w)) / max(1.0, np.vdot(w, w).real))
    ok = res["accuracy"] >= 0.9 and worst <= 1e-12
    report(capsys, "C10 linearized classifier", ok, f"accuracy={res['accuracy']:.2f} over {len(res['trials'])} trials worst_null={worst:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# C11: determinism


def _small_configs():
    out = {}
    for sub, name, patch in [
        ("forward", "forward.json", {}),
        ("carleman", "carleman_sweep.json", {"params": {"n_functions": 5, "delta": 0.3}, "domain": {"center": [0.0, 0.0], "radius_samples": [0.5], "x1_interval": [-0.5, 0.5], "grid_resolution": [16, 8, 32]}}),
        ("cgo", "cgo_decay_small.json", {}),
        ("transform", "transform_vanishing.json", {"lines": 20}),
        ("broken-ray", "broken_ray.json", {}),
    ]:
        with open(os.path.join(ROOT, "configs", name)) as fh:
            cfg = json.load(fh)
        cfg.update(patch)
        out[sub] = cfg
    return out


def test_c11_determinism(capsys, tmp_path):
    mismatched = []
    checked = 0
    for sub, cfg in _small_configs().items():
        path = tmp_path / f"{sub}.json"
        path.write_text(json.dumps(cfg, indent=2))
        dirs = []
        for rep in ("a", "b"):
            out = tmp_path / sub / rep
            assert main([sub, "--config", str(path), "--out", str(out), "--formats", "csv,json"]) == 0
            dirs.append(out)
        for fn in sorted(p.name for p in dirs[0].glob("*.csv")):
            checked += 1
            if (dirs[0] / fn).read_bytes() != (dirs[1] / fn).read_bytes():
                mismatched.append(f"{sub}/{fn}")
    capsys.readouterr()
    ok = checked > 0 and not mismatched
    report(capsys, "C11 determinism", ok, f"csv files compared={checked} mismatched={mismatched}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
