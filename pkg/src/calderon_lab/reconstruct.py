"""Vanishing verification, moment/support checks and regularized recovery on the reachable set."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .cgo import AngularBump, PolarFrame, build_cgo
from .geometry import AngularIntervals, ReachableSet, StarDomain2D, hull_of_complement
from .phantoms import evaluator, support_params
from .transforms import QUAD_TOL, Line2D, TransformSample, line_fourier, mixed_transform, shift_origin

FD_STEP = 1e-3
REGULARIZATION = 1e-4
ILL_POSED_RATIO = 1e-6
DEFAULT_SPACING = 0.1


class EmptyFamilyError(ValueError):
    pass


class NyquistError(ValueError):
    pass


class IllPosednessWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# admissible lines


def line_meets_hull_interior(line: Line2D, hull: np.ndarray, tol: float = 1e-12) -> bool:
    if len(hull) < 3:
        return False
    s = hull @ line.perp - line.sigma
    return bool(s.min() < -tol and s.max() > tol)


def line_meets_domain(line: Line2D, dom0: StarDomain2D, n: int = 1024) -> bool:
    _, pts = dom0.boundary_samples(n)
    s = pts @ line.perp - line.sigma
    return bool(s.min() <= 0 <= s.max())


def admissible_lines(
    dom0: StarDomain2D,
    E: AngularIntervals,
    n: int,
    sampler: str = "halton",
    seed: int = 0,
    max_tries: int = 200,
) -> list[Line2D]:
    """``n`` oriented lines meeting the closed cross-section but not the interior
    of the hull of the boundary outside E.

    Candidates are drawn uniformly in (angle, offset from the centre) with a
    Halton sequence (deterministic) or a seeded generator.
    """
    if E.total_length() == 0:
        raise EmptyFamilyError("E is empty: no admissible lines")
    hull = hull_of_complement(dom0, E)
    c = np.asarray(dom0.center, dtype=float)
    Rm = dom0.max_radius()
    if sampler == "halton":
        gen = qmc.Halton(d=2, scramble=False, seed=seed)
        gen.fast_forward(1)
        draw = lambda m: gen.random(m)
    elif sampler == "random":
        rng = np.random.default_rng(seed)
        draw = lambda m: rng.uniform(size=(m, 2))
    else:
        raise ValueError("sampler must be 'halton' or 'random'")
    out: list[Line2D] = []
    for _ in range(max_tries):
        U = draw(max(4 * n, 64))
        for a, b in U:
            ang = 2 * np.pi * a
            w = np.array([np.cos(ang), np.sin(ang)])
            sig = float(c @ np.array([-w[1], w[0]]) + (2 * b - 1) * Rm)
            ln = Line2D((float(w[0]), float(w[1])), sig)
            if line_meets_domain(ln, dom0) and not line_meets_hull_interior(ln, hull):
                out.append(ln)
                if len(out) == n:
                    return out
    if not out:
        raise EmptyFamilyError("no admissible lines found (reachable set has zero area)")
    raise EmptyFamilyError(f"only {len(out)} admissible lines found out of {n}")


# ---------------------------------------------------------------------------
# verdicts


@dataclass(frozen=True)
class Verdict:
    holds: bool
    max_abs: float
    tol: float

    def __iter__(self):
        return iter((self.holds, self.max_abs))


def vanishing_verdict(samples: list[TransformSample], tol: float | None = None, cgo_defect: float = 0.0) -> Verdict:
    """``holds`` iff every |value| <= tol; tol defaults to ten times the largest
    quadrature error estimate plus the supplied CGO-limit defect bound."""
    if not samples:
        raise ValueError("no samples")
    vals = np.array([abs(s.value) for s in samples])
    if tol is None:
        tol = 10 * max(s.quadrature_error_estimate for s in samples) + cgo_defect
    mx = float(vals.max())
    return Verdict(bool(mx <= tol), mx, float(tol))


def admissible_samples(f3d, lines, lams, tol=QUAD_TOL) -> list[TransformSample]:
    return [mixed_transform(f3d, lam, ln, tol) for lam in lams for ln in lines]


# ---------------------------------------------------------------------------
# moments


_FD = {
    0: ([0], [1.0], 1),
    1: ([-2, -1, 1, 2], [1 / 12, -8 / 12, 8 / 12, -1 / 12], 1),
    2: ([-2, -1, 0, 1, 2], [-1 / 12, 16 / 12, -30 / 12, 16 / 12, -1 / 12], 2),
    3: ([-3, -2, -1, 1, 2, 3], [1 / 8, -1, 13 / 8, -13 / 8, 1, -1 / 8], 3),
}


@dataclass
class MomentReport:
    rows: list = field(default_factory=list)  # dicts (k, max_abs, tol, holds)

    @property
    def passes(self) -> bool:
        return all(r["holds"] for r in self.rows)

    def to_json(self) -> str:
        return json.dumps(self.rows, indent=2, sort_keys=True)


def moment_support_check(
    f3d,
    dom0: StarDomain2D,
    E: AngularIntervals,
    kmax: int = 3,
    lines: list[Line2D] | None = None,
    n_lines: int = 200,
    step: float = FD_STEP,
    tol: float = QUAD_TOL,
) -> MomentReport:
    """X-rays of ``d^k/dxi1^k f^(0, x')`` along admissible lines, k = 0..kmax.

    Derivatives use fourth-order centred differences in xi1 (one-sided order
    for k = 0 is exact).  The tolerance per k is ten times the propagated
    quadrature error ``sum |c_i| err / step^k``.
    """
    if kmax > 3:
        raise ValueError("finite-difference stencils are provided up to k = 3")
    lines = lines if lines is not None else admissible_lines(dom0, E, n_lines)
    _, center, radius = support_params(f3d)
    rep = MomentReport()
    cache: dict = {}

    def X(ln, xi):
        key = (ln, xi)
        if key not in cache:
            ch = ln.chord(center, radius)
            cache[key] = (0j, 0.0) if ch is None else line_fourier(f3d, xi, 0.0, ln.sigma * ln.perp, ln.w, ch[0], ch[1], tol)
        return cache[key]

    for k in range(kmax + 1):
        offs, coefs, p = _FD[k]
        mx, err = 0.0, 0.0
        for ln in lines:
            acc, e = 0j, 0.0
            for o, c in zip(offs, coefs):
                v, ev = X(ln, o * step)
                acc += c * v
                e += abs(c) * ev
            acc /= step**p
            e /= step**p
            mx = max(mx, abs(acc))
            err = max(err, e)
        t = 10 * err + 10 * np.finfo(float).eps * mx / step**p
        rep.rows.append({"k": k, "max_abs": float(mx), "tol": float(t), "holds": bool(mx <= t)})
    return rep


# ---------------------------------------------------------------------------
# CGO limit


def _chord_along_ray(dom0: StarDomain2D, frame: PolarFrame, theta):
    """Entry and exit distances of the rays from x0' at angles ``theta`` (disk closed form)."""
    x0 = np.asarray(frame.x0_prime, dtype=float)
    c = np.asarray(dom0.center, dtype=float)
    if not dom0.is_disk:
        raise NotImplementedError("closed-form chords need a disk cross-section")
    R = dom0.max_radius()
    d = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    b = (x0 - c) @ d.T if d.ndim == 2 else d @ (x0 - c)
    cc = (x0 - c) @ (x0 - c) - R * R
    disc = np.maximum(b * b - cc, 0.0)
    return -b - np.sqrt(disc), -b + np.sqrt(disc)


def weighted_polar_transform(f, frame: PolarFrame, bump: AngularBump, lam: float, dom0: StarDomain2D, n_theta=96, n_r=96, n_x1=64) -> complex:
    """``int int int f e^{-2i lam x1} e^{-2 lam r} |b(theta)|^2 dtheta dr dx1`` over the cylinder,
    by Gauss-Legendre in (x1, r, theta) about the frame point."""
    F = evaluator(f)
    (a1, b1), _, _ = support_params(f)
    xt, wt = np.polynomial.legendre.leggauss(n_theta)
    th = bump.theta0 + bump.width * xt
    wth = bump.width * wt * bump(th) ** 2
    r_in, r_out = _chord_along_ray(dom0, frame, th)
    xr, wr = np.polynomial.legendre.leggauss(n_r)
    R = 0.5 * (r_out - r_in)[:, None] * xr[None, :] + 0.5 * (r_out + r_in)[:, None]
    WR = 0.5 * (r_out - r_in)[:, None] * wr[None, :]
    x1, w1 = np.polynomial.legendre.leggauss(n_x1)
    X1 = 0.5 * (b1 - a1) * x1 + 0.5 * (a1 + b1)
    W1 = 0.5 * (b1 - a1) * w1 * np.exp(-2j * lam * X1)
    P2 = frame.x0_prime[0] + R * np.cos(th)[:, None]
    P3 = frame.x0_prime[1] + R * np.sin(th)[:, None]
    vals = F(X1[:, None, None], P2[None], P3[None])  # (n_x1, n_theta, n_r)
    inner = np.einsum("i,ijk->jk", W1, vals)
    return complex(np.sum(wth[:, None] * WR * np.exp(-2 * lam * R) * inner))


def line_through_frame(frame: PolarFrame) -> Line2D:
    w = frame.direction()
    x0 = np.asarray(frame.x0_prime, dtype=float)
    return Line2D((float(w[0]), float(w[1])), float(x0 @ np.array([-w[1], w[0]])))


def frame_line_value(f, frame: PolarFrame, lam: float, tol=QUAD_TOL) -> complex:
    """Single-line transform with the t-origin moved to the frame point."""
    ln = line_through_frame(frame)
    T = mixed_transform(f, lam, ln, tol)
    t0 = float(np.asarray(frame.x0_prime) @ ln.w)
    return complex(shift_origin(T.value, lam, t0))


@dataclass
class LimitTable:
    rows: list  # (tau, lhs, rhs, defect)

    def defects(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows])

    def to_dict(self):
        return {"rows": [[r[0], [r[1].real, r[1].imag], [r[2].real, r[2].imag], r[3]] for r in self.rows]}


def cgo_limit_check(dom, q1, q2, partition, frame, bump, lam, tau_list, diff=None, dom0=None, **kw) -> LimitTable:
    """Compare ``int (q1 - q2) u1 conj(u2)`` with the (r, theta)-weighted transform.

    u1 solves with q1 and sign +, u2 with conj(q2) and sign -, both for the
    same frame, bump and ``s = tau + i lam``.  ``diff`` is a pointwise
    callable for q1 - q2 used on the right-hand side (defaults to the
    interpolated grid difference).
    """
    from .cgo import ComplexFrequency
    from .pde import Potential, as_grid

    grid = as_grid(dom)
    qv1 = np.asarray(getattr(q1, "values", q1)) * np.ones(grid.shape)
    qv2 = np.asarray(getattr(q2, "values", q2)) * np.ones(grid.shape)
    dq = qv1 - qv2
    if diff is None:
        diff = Potential(grid, dq)
    if dom0 is None:
        dom0 = StarDomain2D.disk(grid.disk.center, grid.disk.radius)
    rhs = weighted_polar_transform(diff, frame, bump, lam, dom0)
    rows = []
    for t in tau_list:
        s = ComplexFrequency(float(t), float(lam))
        if np.abs(dq).max() == 0:
            rows.append((float(t), 0j, rhs, abs(rhs)))
            continue
        u1 = build_cgo(grid, qv1, partition, frame, bump, s, +1, **kw)
        u2 = build_cgo(grid, np.conj(qv2), partition, frame, bump, s, -1, **kw)
        lhs = complex(np.sum(grid.volumes * dq * u1.u.values * np.conj(u2.u.values)))
        rows.append((float(t), lhs, rhs, float(abs(lhs - rhs))))
    return LimitTable(rows)


def width_sweep(f, frame, bump, lam, dom0, halvings=2):
    """(width, value, |value - single-line value|) for successively halved bumps."""
    target = frame_line_value(f, frame, lam)
    out = []
    b = bump
    for _ in range(halvings + 1):
        v = weighted_polar_transform(f, frame, b, lam, dom0)
        out.append((b.width, v, abs(v - target)))
        b = b.halved()
    return out, target


# ---------------------------------------------------------------------------
# inversion on O


def _bspline(u, degree):
    """Centred cardinal B-spline of degree 1 or 3."""
    u = np.abs(u)
    if degree == 1:
        return np.clip(1 - u, 0.0, None)
    return np.where(u < 1, 2 / 3 - u**2 + u**3 / 2, np.where(u < 2, (2 - u) ** 3 / 6, 0.0))


@dataclass
class SplineBasis:
    """Tensor B-splines on a Cartesian grid, restricted to those touching O.

    ``degree=1`` gives bilinear hat functions, ``degree=3`` cubic B-splines.
    """

    origin: np.ndarray
    spacing: float
    shape: tuple
    nodes: np.ndarray  # flat indices of active nodes
    degree: int = 3

    @classmethod
    def on_reachable(cls, reach: ReachableSet, spacing: float, degree: int = 3) -> "SplineBasis":
        if degree not in (1, 3):
            raise ValueError("degree must be 1 or 3")
        pad = (degree + 1) // 2 * spacing - (spacing if degree == 1 else 0.0)
        x0, y0 = reach.x[0] - pad, reach.y[0] - pad
        nx = int(np.ceil((reach.x[-1] + pad - x0) / spacing)) + 1
        ny = int(np.ceil((reach.y[-1] + pad - y0) / spacing)) + 1
        X, Y = np.meshgrid(reach.x, reach.y, indexing="ij")
        px, py = X[reach.O_mask], Y[reach.O_mask]
        if px.size == 0:
            raise EmptyFamilyError("reachable set has zero area")
        probe = cls(np.array([x0, y0]), float(spacing), (nx, ny), np.arange(nx * ny), degree)
        _, cols, _ = probe.weights(np.stack([px, py], axis=1))
        return cls(np.array([x0, y0]), float(spacing), (nx, ny), np.unique(cols), degree)

    @property
    def size(self) -> int:
        return len(self.nodes)

    def _positions(self):
        nx, ny = self.shape
        pos = -np.ones(nx * ny, dtype=int)
        pos[self.nodes] = np.arange(self.size)
        return pos

    def weights(self, pts):
        """Sparse evaluation: (rows, basis columns, values) for points (m, 2)."""
        nx, ny = self.shape
        u = (np.asarray(pts, dtype=float) - self.origin) / self.spacing
        i = np.floor(u[:, 0]).astype(int)
        j = np.floor(u[:, 1]).astype(int)
        offs = (0, 1) if self.degree == 1 else (-1, 0, 1, 2)
        pos = self._positions()
        R, C, V = [], [], []
        m = np.arange(len(u))
        for di in offs:
            for dj in offs:
                ii, jj = i + di, j + dj
                ok = (ii >= 0) & (ii < nx) & (jj >= 0) & (jj < ny)
                col = np.where(ok, pos[np.clip(ii, 0, nx - 1) * ny + np.clip(jj, 0, ny - 1)], -1)
                ok &= col >= 0
                w = _bspline(u[:, 0] - ii, self.degree) * _bspline(u[:, 1] - jj, self.degree)
                ok &= w != 0
                R.append(m[ok])
                C.append(col[ok])
                V.append(w[ok])
        return np.concatenate(R), np.concatenate(C), np.concatenate(V)

    def evaluate(self, coef, pts) -> np.ndarray:
        r, c, v = self.weights(pts)
        out = np.zeros(len(pts) if coef.ndim == 1 else (len(pts),) + coef.shape[1:], dtype=complex)
        np.add.at(out, r, v[:, None] * coef[c] if coef.ndim > 1 else v * coef[c])
        return out

    def penalty(self, order: int = 2) -> np.ndarray:
        """Coefficient differences of the given order along both grid axes, scaled to unit 2-norm."""
        stencil = {1: (-1.0, 1.0), 2: (1.0, -2.0, 1.0)}[order]
        nx, ny = self.shape
        pos = self._positions()
        rows = []
        for n in self.nodes:
            i, j = divmod(int(n), ny)
            for di, dj in ((1, 0), (0, 1)):
                ii = [i + k * di for k in range(order + 1)]
                jj = [j + k * dj for k in range(order + 1)]
                if ii[-1] >= nx or jj[-1] >= ny:
                    continue
                cols = [pos[a * ny + b] for a, b in zip(ii, jj)]
                if min(cols) < 0:
                    continue
                r = np.zeros(self.size)
                r[cols] = stencil
                rows.append(r)
        if not rows:
            return np.zeros((0, self.size))
        G = np.array(rows)
        return G / np.linalg.norm(G, 2)


def forward_matrix(basis: SplineBasis, lines, lam: float, dom0: StarDomain2D, n_per_spacing: int = 16) -> np.ndarray:
    """Attenuated line integrals of the basis functions (lines x basis)."""
    A = np.zeros((len(lines), basis.size), dtype=complex)
    R = dom0.max_radius()
    for li, ln in enumerate(lines):
        ch = ln.chord(dom0.center, R)
        if ch is None:
            continue
        m = int(np.ceil((ch[1] - ch[0]) / basis.spacing * n_per_spacing))
        m += m % 2
        t = np.linspace(ch[0], ch[1], m + 1)
        w = np.full(m + 1, 2.0)
        w[1::2] = 4.0
        w[0] = w[-1] = 1.0
        w *= (ch[1] - ch[0]) / m / 3
        r, c, v = basis.weights(ln.point(t))
        np.add.at(A[li], c, v * (w * np.exp(-2 * lam * t))[r])
    return A


@dataclass
class Reconstruction:
    x1: np.ndarray
    points: np.ndarray  # O points, (m, 2)
    values: np.ndarray  # (len(x1), m) complex
    lambdas: np.ndarray
    slices: np.ndarray  # (len(lambdas), m): estimated f^(2 lam, x') on O points
    residuals: np.ndarray  # relative data residual per lambda
    sv_ratio: np.ndarray  # smallest / largest singular value per lambda
    warnings: list = field(default_factory=list)

    def relative_error(self, truth) -> float:
        F = evaluator(truth)
        X1 = self.x1[:, None]
        ref = F(X1, self.points[None, :, 0], self.points[None, :, 1])
        return float(np.linalg.norm(self.values - ref) / np.linalg.norm(ref))


def check_nyquist(lambdas, x1_support):
    lam = np.asarray(lambdas, dtype=float)
    if not np.allclose(lam, -lam[::-1], atol=1e-12):
        raise NyquistError("lambda grid must be symmetric about 0")
    d = np.diff(lam)
    if not np.allclose(d, d[0], rtol=1e-9):
        raise NyquistError("lambda grid must be uniform")
    half = 0.5 * (x1_support[1] - x1_support[0])
    if 2 * d[0] > np.pi / half:
        raise NyquistError(f"xi spacing {2 * d[0]:.3g} exceeds pi / half-width {np.pi / half:.3g}")


def invert_on_O(
    data: np.ndarray,
    lines: list[Line2D],
    lambdas,
    reach: ReachableSet,
    dom0: StarDomain2D,
    x1_support,
    x1_eval=None,
    spacing: float | None = None,
    regularization: float = REGULARIZATION,
    degree: int = 3,
    penalty_order: int = 2,
) -> Reconstruction:
    """Recover f on R x O from ``data[k, j] = T f(lambdas[k], lines[j])``.

    Each lambda slice fits the cross-section values of ``f^(2 lambda, .)`` in
    a tensor B-spline basis on O (``degree`` 3 by default).  The fit is a
    generalized Tikhonov least-squares problem whose penalty is the
    ``penalty_order`` coefficient difference operator, weighted by
    ``regularization * sigma_max``.  The ill-posedness warning tests the
    singular values of this stacked (data + penalty) system.  The slices are assembled by a
    trapezoidal inverse Fourier transform in xi1 = 2 lambda.
    """
    lams = np.asarray(lambdas, dtype=float)
    check_nyquist(lams, x1_support)
    data = np.asarray(data, dtype=complex)
    if spacing is None:
        spacing = DEFAULT_SPACING
    basis = SplineBasis.on_reachable(reach, spacing, degree)
    G = basis.penalty(penalty_order)
    X, Y = np.meshgrid(reach.x, reach.y, indexing="ij")
    pts = np.stack([X[reach.O_mask], Y[reach.O_mask]], axis=1)
    slices = np.zeros((len(lams), len(pts)), dtype=complex)
    res = np.zeros(len(lams))
    ratio = np.zeros(len(lams))
    warns = []
    zeros = np.zeros(G.shape[0], dtype=complex)
    for k, lam in enumerate(lams):
        A = forward_matrix(basis, lines, lam, dom0)
        smax = np.linalg.norm(A, 2)
        M = np.vstack([A, regularization * smax * G])
        sm = np.linalg.svd(M, compute_uv=False)
        ratio[k] = float(sm[-1] / sm[0]) if sm[0] > 0 and len(sm) >= basis.size else 0.0
        if ratio[k] < ILL_POSED_RATIO:
            warns.append(f"lambda={lam:g}: smallest singular value ratio {ratio[k]:.2e}")
        coef = np.linalg.lstsq(M, np.concatenate([data[k], zeros]), rcond=None)[0]
        nd = np.linalg.norm(data[k])
        res[k] = float(np.linalg.norm(A @ coef - data[k]) / nd) if nd > 0 else 0.0
        slices[k] = basis.evaluate(coef, pts)
    if warns:
        warnings.warn("; ".join(warns[:3]) + (" ..." if len(warns) > 3 else ""), IllPosednessWarning, stacklevel=2)
    if x1_eval is None:
        x1_eval = np.linspace(x1_support[0], x1_support[1], 65)
    x1_eval = np.asarray(x1_eval, dtype=float)
    xi = 2 * lams
    w = np.full(len(xi), xi[1] - xi[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    vals = (np.exp(1j * np.outer(x1_eval, xi)) * w) @ slices / (2 * np.pi)
    return Reconstruction(x1_eval, pts, vals, lams, slices, res, ratio, warns)
