"""X-ray, mixed Fourier/attenuated X-ray, broken-ray and Segal-Bargmann transforms.

Lines are parametrized as ``gamma(t) = sigma * omega_perp + t * omega`` with
``omega_perp`` the +90 degree rotation of ``omega``; ``t = 0`` is the point of
the line closest to the origin.  Shifting the t-origin by ``t0`` multiplies
attenuated values by ``exp(2 lambda t0)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import AngularIntervals, GeometryError, StarDomain2D
from .phantoms import Phantom2D, evaluator, grid_step, support_params

QUAD_TOL = 1e-10
MAX_POINTS = 2**17
TANGENTIAL_ANGLE = 1e-3
BISECTION_TOL = 1e-10
SB_LOG_LIMIT = 700.0


class TangentialReflectionError(GeometryError):
    pass


class DistinctnessError(GeometryError):
    pass


class OverflowGuardError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# quadrature


def _simpson_sum(y, h):
    return h / 3 * (y[0] + y[-1] + 4 * y[1:-1:2].sum(axis=0) + 2 * y[2:-1:2].sum(axis=0))


def simpson(func, a: float, b: float, tol: float = QUAD_TOL, n0: int = 16, max_levels: int = 20, min_levels: int = 1):
    """Composite Simpson rule with global step halving.

    ``func`` maps an array of abscissae of shape (n,) to values of shape
    (n, ...).  Returns ``(value, error_estimate)`` with the estimate
    ``max |S_2n - S_n| / 15``.
    """
    n = max(2, n0 + (n0 % 2))
    if b <= a:
        y = np.asarray(func(np.array([a])))
        return np.zeros(y.shape[1:], dtype=y.dtype), 0.0
    x = np.linspace(a, b, n + 1)
    y = np.asarray(func(x))
    S = _simpson_sum(y, (b - a) / n)
    err = np.inf
    for level in range(max_levels):
        if 2 * n + 1 > MAX_POINTS:
            break
        xm = 0.5 * (x[:-1] + x[1:])
        ym = np.asarray(func(xm))
        x2 = np.empty(2 * n + 1)
        x2[0::2], x2[1::2] = x, xm
        y2 = np.empty((2 * n + 1,) + y.shape[1:], dtype=np.result_type(y, ym))
        y2[0::2], y2[1::2] = y, ym
        n *= 2
        S2 = _simpson_sum(y2, (b - a) / n)
        err = float(np.max(np.abs(S2 - S))) / 15 if np.size(S2) else 0.0
        x, y, S = x2, y2, S2
        if level + 1 >= min_levels and err <= tol:
            break
    return S, err


def _fixed_levels(step, length):
    """Simpson start size for gridded data: one halving from ``step``-spaced nodes."""
    n = int(np.ceil(length / step))
    return n + (n % 2), 1


# ---------------------------------------------------------------------------
# lines


@dataclass(frozen=True)
class Line2D:
    omega: tuple[float, float]
    sigma: float

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=float)
        if abs(np.linalg.norm(w) - 1) > 1e-12:
            raise ValueError("omega must be a unit vector")

    @classmethod
    def from_angle(cls, angle: float, sigma: float) -> "Line2D":
        return cls((float(np.cos(angle)), float(np.sin(angle))), float(sigma))

    @property
    def w(self) -> np.ndarray:
        return np.asarray(self.omega, dtype=float)

    @property
    def perp(self) -> np.ndarray:
        return np.array([-self.omega[1], self.omega[0]])

    def point(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.sigma * self.perp + t[..., None] * self.w

    def reversed(self) -> "Line2D":
        return Line2D((-self.omega[0], -self.omega[1]), -self.sigma)

    def chord(self, center, radius):
        """Parameter interval where the line meets the closed disk, or None."""
        c = np.asarray(center, dtype=float)
        d = c @ self.perp - self.sigma
        if abs(d) > radius:
            return None
        half = np.sqrt(radius**2 - d * d)
        t0 = c @ self.w
        return float(t0 - half), float(t0 + half)

    def distance_to(self, xy) -> np.ndarray:
        return np.abs(np.asarray(xy) @ self.perp - self.sigma)

    def to_dict(self):
        return {"omega": list(self.omega), "sigma": self.sigma}


@dataclass(frozen=True)
class TransformSample:
    lam: float
    line_or_ray: object
    value: complex
    quadrature_error_estimate: float

    def __post_init__(self):
        if not (np.isfinite(self.value) and np.isfinite(self.quadrature_error_estimate)):
            raise FloatingPointError("non-finite transform sample")


def _support2d(f):
    if isinstance(f, Phantom2D):
        return f.center, f.radius
    if hasattr(f, "center") and hasattr(f, "radius"):
        return f.center, f.radius
    raise TypeError("f2d needs a declared support (use Phantom2D)")


def xray(f2d, line: Line2D, tol: float = QUAD_TOL, return_error: bool = False):
    """Integral of ``f2d`` along the line by composite Simpson over the support chord."""
    center, radius = _support2d(f2d)
    ch = line.chord(center, radius)
    if ch is None:
        return (0.0, 0.0) if return_error else 0.0

    def g(t):
        p = line.point(t)
        return f2d(p[..., 0], p[..., 1])

    val, err = simpson(g, ch[0], ch[1], tol)
    val = float(val)
    return (val, err) if return_error else val


def line_fourier(f3d, xi1, atten, p0, d, ta, tb, tol=QUAD_TOL):
    """``int_ta^tb e^{-atten t} int e^{-i xi1 x1} f(x1, p0 + t d) dx1 dt`` with an error estimate."""
    F = evaluator(f3d)
    (a1, b1), _, _ = support_params(f3d)
    step = grid_step(f3d)
    if step is not None:
        n1, lv1 = _fixed_levels(step, b1 - a1)
        nt, lvt = _fixed_levels(step, max(tb - ta, step))
    else:
        n1 = nt = 16
        lv1 = lvt = 20
    p0 = np.asarray(p0, dtype=float)
    d = np.asarray(d, dtype=float)
    inner_err = [0.0]

    def g(t):
        pts = p0 + t[:, None] * d

        def h(x1):
            vals = F(x1[:, None], pts[None, :, 0], pts[None, :, 1])
            return np.exp(-1j * xi1 * x1)[:, None] * vals

        v, e = simpson(h, a1, b1, tol, n0=n1, max_levels=lv1, min_levels=lv1 if step else 1)
        inner_err[0] = max(inner_err[0], e)
        return np.exp(-atten * t) * v

    val, err = simpson(g, ta, tb, tol, n0=nt, max_levels=lvt, min_levels=lvt if step else 1)
    scale = np.exp(-atten * np.array([ta, tb])).max() * (tb - ta)
    return complex(val), float(err + inner_err[0] * scale)


def mixed_transform(f3d, lam: float, line: Line2D, tol: float = QUAD_TOL) -> TransformSample:
    """``T f(lam, line) = int e^{-2 lam t} int e^{-2i lam x1} f(x1, gamma(t)) dx1 dt``."""
    _, center, radius = support_params(f3d)
    ch = line.chord(center, radius)
    if ch is None:
        return TransformSample(float(lam), line, 0j, 0.0)
    val, err = line_fourier(f3d, 2 * lam, 2 * lam, line.sigma * line.perp, line.w, ch[0], ch[1], tol)
    return TransformSample(float(lam), line, val, err)


def shift_origin(value: complex, lam: float, t0: float) -> complex:
    """Value of an attenuated integral after moving the t-origin to ``t0``."""
    return value * np.exp(2 * lam * t0)


def fourier_x1(f3d, xi1: float, points=None, tol: float = QUAD_TOL) -> np.ndarray:
    """``f^(xi1, x') = int e^{-i x1 xi1} f(x1, x') dx1`` at cross-section points.

    For a gridded potential the default points are its cross-section nodes
    and the quadrature uses the x1 grid levels (Simpson when the level count
    allows, trapezoid otherwise).
    """
    if hasattr(f3d, "grid") and points is None:
        g = f3d.grid
        vals = np.asarray(f3d.values).reshape(g.shape)
        ph = np.exp(-1j * xi1 * g.x1)[:, None]
        if g.n1 % 2 == 0:
            return _simpson_sum(ph * vals, g.dx1)
        return (g.x1_weights[:, None] * ph * vals).sum(axis=0)
    if points is None:
        raise ValueError("points are required for analytic inputs")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    F = evaluator(f3d)
    (a1, b1), _, _ = support_params(f3d)

    def h(x1):
        return np.exp(-1j * xi1 * x1)[:, None] * F(x1[:, None], pts[None, :, 0], pts[None, :, 1])

    val, _ = simpson(h, a1, b1, tol)
    return val


# ---------------------------------------------------------------------------
# broken rays


def _cross2(a, b) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


@dataclass(eq=False)
class BrokenRay:
    vertices: np.ndarray  # (k, 2)
    exits_in_E: bool
    termination: str  # "exit", "max_length" or "max_bounces"
    meta: dict = field(default_factory=dict)

    @property
    def directions(self) -> np.ndarray:
        d = np.diff(self.vertices, axis=0)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    @property
    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.vertices, axis=0), axis=1)

    @property
    def length(self) -> float:
        return float(self.segment_lengths.sum())

    @property
    def n_reflections(self) -> int:
        return max(len(self.vertices) - 2, 0)

    def point(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        cum = np.concatenate([[0.0], np.cumsum(self.segment_lengths)])
        k = np.clip(np.searchsorted(cum, t, side="right") - 1, 0, len(cum) - 2)
        return self.vertices[k] + (t - cum[k])[..., None] * self.directions[k]

    def reflection_defects(self, dom0: StarDomain2D) -> np.ndarray:
        """|angle(incoming, nu) - angle(outgoing, -nu)| at interior vertices (nu outward)."""
        d = self.directions
        out = []
        for k in range(1, len(self.vertices) - 1):
            nu = dom0.normal(dom0.angle_of(self.vertices[k]))
            a_in = np.arctan2(abs(_cross2(d[k - 1], nu)), d[k - 1] @ nu)
            a_out = np.arctan2(abs(_cross2(d[k], -nu)), d[k] @ -nu)
            out.append(abs(a_in - a_out))
        return np.array(out)

    def incidence_angles(self, dom0: StarDomain2D) -> np.ndarray:
        """Angle between the incoming direction and the outward normal at each reflection."""
        d = self.directions
        out = []
        for k in range(1, len(self.vertices) - 1):
            nu = dom0.normal(dom0.angle_of(self.vertices[k]))
            out.append(np.arccos(np.clip(d[k - 1] @ nu, -1, 1)))
        return np.array(out)

    def to_dict(self):
        return {
            "vertices": self.vertices.tolist(),
            "exits_in_E": self.exits_in_E,
            "termination": self.termination,
            "length": self.length,
        }


def _next_hit(dom0: StarDomain2D, p, d, ds, smax):
    """First boundary crossing of ``p + s d`` (s > 0) by marching then bisection."""
    s_prev = 0.0
    chunk = 256
    s0 = 0.0
    while s0 < smax:
        s = s0 + ds * np.arange(1, chunk + 1)
        lv = dom0.level(p + s[:, None] * d)
        pos = np.flatnonzero(lv > 0)
        if pos.size:
            k = pos[0]
            lo = s[k - 1] if k > 0 else s_prev
            hi = s[k]
            while hi - lo > BISECTION_TOL:
                mid = 0.5 * (lo + hi)
                if dom0.level(p + mid * d) > 0:
                    hi = mid
                else:
                    lo = mid
            return 0.5 * (lo + hi)
        s_prev = s[-1]
        s0 = s[-1]
    return None


def trace_broken_ray(
    dom0: StarDomain2D,
    E: AngularIntervals,
    start,
    direction,
    max_length: float = 100.0,
    max_bounces: int = 100,
    march_step: float | None = None,
) -> BrokenRay:
    """Billiard trajectory from a boundary point of E, reflecting off the boundary
    outside E and stopping at the first hit inside E."""
    p = np.asarray(start, dtype=float)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    if abs(dom0.level(p)) > 1e-8:
        raise GeometryError("start point is not on the boundary")
    th = dom0.angle_of(p)
    if not E.contains(th):
        raise GeometryError("start point is not in E")
    nu = dom0.normal(th)
    if d @ nu >= -np.sin(TANGENTIAL_ANGLE):
        raise TangentialReflectionError("initial direction is not strictly inward")
    D = dom0.diameter()
    ds = march_step if march_step is not None else D / 4000
    verts = [p.copy()]
    total = 0.0
    bounces = 0
    while True:
        s = _next_hit(dom0, p, d, ds, 2 * D)
        if s is None:
            raise GeometryError("ray failed to meet the boundary")
        q = p + s * d
        total += s
        verts.append(q)
        thq = dom0.angle_of(q)
        nu = dom0.normal(thq)
        cos_in = float(d @ nu)
        if cos_in < np.sin(TANGENTIAL_ANGLE):
            raise TangentialReflectionError(f"tangential hit (d.nu = {cos_in:.2e})")
        if E.contains(thq):
            return BrokenRay(np.array(verts), True, "exit")
        if total >= max_length:
            return BrokenRay(np.array(verts), False, "max_length")
        if bounces >= max_bounces:
            return BrokenRay(np.array(verts), False, "max_bounces")
        refl = np.array(verts[1:-1])
        if refl.size and np.min(np.linalg.norm(refl - q, axis=1)) < 1e-9:
            raise DistinctnessError("reflection points repeat")
        d = d - 2 * cos_in * nu
        d = d / np.linalg.norm(d)
        p = q
        bounces += 1


def broken_ray_transform(f3d, ray: BrokenRay, lam: float, tol: float = QUAD_TOL) -> TransformSample:
    """``int_0^L e^{-2 lam t} f^(2 lam, gamma(t)) dt`` along the arclength of the ray."""
    if not ray.exits_in_E:
        raise GeometryError("broken ray does not end in E")
    total, err = 0j, 0.0
    t0 = 0.0
    for v, d, ell in zip(ray.vertices[:-1], ray.directions, ray.segment_lengths):
        val, e = line_fourier(f3d, 2 * lam, 2 * lam, v - t0 * d, d, t0, t0 + ell, tol)
        total += val
        err += e
        t0 += ell
    return TransformSample(float(lam), ray, total, err)


# ---------------------------------------------------------------------------
# Segal-Bargmann


@dataclass(frozen=True)
class SBQuery:
    z: tuple
    h: float

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be positive")
        if len(self.z) not in (2, 3):
            raise ValueError("z must have 2 or 3 components")

    @property
    def n(self) -> int:
        return len(self.z)

    @property
    def zc(self) -> np.ndarray:
        return np.asarray(self.z, dtype=complex)


def _support_box(f, n):
    if n == 2:
        c, r = _support2d(f)
        return np.array([c[0] - r, c[1] - r]), np.array([c[0] + r, c[1] + r])
    (a1, b1), c, r = support_params(f)
    return np.array([a1, c[0] - r, c[1] - r]), np.array([b1, c[0] + r, c[1] + r])


def _feval(f, n, Y):
    F = evaluator(f)
    if n == 2:
        return F(Y[..., 0], Y[..., 1])
    return F(Y[..., 0], Y[..., 1], Y[..., 2])


def _gl_grid(lo, hi, counts):
    axes, wts = [], []
    for a, b, m in zip(lo, hi, counts):
        x, w = np.polynomial.legendre.leggauss(int(m))
        axes.append(0.5 * (b - a) * x + 0.5 * (a + b))
        wts.append(0.5 * (b - a) * w)
    mesh = np.meshgrid(*axes, indexing="ij")
    W = wts[0]
    for w in wts[1:]:
        W = np.multiply.outer(W, w)
    return np.stack(mesh, axis=-1), W


def segal_bargmann(f, query: SBQuery, nodes: int | None = None, window: float = 11.0) -> complex:
    """``int exp(-(z - y)^2 / (2h)) f(y) dy`` by tensor Gauss-Legendre quadrature.

    The integration box is the support box intersected with a window of
    ``window * sqrt(h)`` around ``Re z`` in each coordinate.
    """
    n, h, z = query.n, query.h, query.zc
    x, eta = z.real, z.imag
    lo, hi = _support_box(f, n)
    a = np.maximum(lo, x - window * np.sqrt(h))
    b = np.minimum(hi, x + window * np.sqrt(h))
    if np.any(b <= a):
        return 0j
    # largest log-magnitude of the kernel over the box
    near = np.clip(x, a, b)
    logmax = (eta @ eta - np.sum((x - near) ** 2)) / (2 * h)
    if logmax > SB_LOG_LIMIT:
        raise OverflowGuardError(f"kernel log-magnitude {logmax:.1f} exceeds {SB_LOG_LIMIT}")
    if nodes is None:
        width = b - a
        counts = np.ceil(16 + 1.5 * width * (np.abs(eta) / h) + 6 * width / np.sqrt(h)).astype(int)
        counts = np.minimum(counts, 4000 if n == 2 else 200)
    else:
        counts = np.full(n, nodes)
    Y, W = _gl_grid(a, b, counts)
    q = np.sum((z - Y) ** 2, axis=-1)
    vals = _feval(f, n, Y)
    return complex(np.sum(W * np.exp(-q / (2 * h)) * vals))


def segal_bargmann_batch(f, Z, h: float, nodes: int = 64) -> np.ndarray:
    """SB transform at many points ``Z`` (m, n) with one global quadrature grid."""
    Z = np.asarray(Z, dtype=complex)
    n = Z.shape[1]
    lo, hi = _support_box(f, n)
    Y, W = _gl_grid(lo, hi, [nodes] * n)
    Yf = Y.reshape(-1, n)
    fw = (W * _feval(f, n, Y)).ravel()
    keep = fw != 0
    Yf, fw = Yf[keep], fw[keep]
    out = np.empty(len(Z), dtype=complex)
    eta2 = np.sum(Z.imag**2, axis=1)
    if np.any(eta2 / (2 * h) > SB_LOG_LIMIT):
        raise OverflowGuardError("kernel log-magnitude exceeds the guard")
    for i0 in range(0, len(Z), 256):
        Zc = Z[i0 : i0 + 256]
        q = np.sum((Zc[:, None, :] - Yf[None, :, :]) ** 2, axis=-1)
        out[i0 : i0 + 256] = np.exp(-q / (2 * h)) @ fw
    return out


def sb_apriori_bound(z, h, fsup, n) -> np.ndarray:
    """``(2 pi h)^{n/2} exp(|Im z|^2 / (2h)) ||f||_inf``."""
    z = np.atleast_2d(np.asarray(z, dtype=complex))
    return (2 * np.pi * h) ** (n / 2) * np.exp(np.sum(z.imag**2, axis=1) / (2 * h)) * fsup


def sb_halfspace_bound(z, h, fsup, n, literal: bool = False) -> np.ndarray:
    """Improved bound for supp f in {x1 <= 0} and Re z1 >= 0.

    The default exponent is ``(|Im z|^2 - (Re z1)^2) / (2h)``; ``literal=True``
    uses ``|Im z|^2/(2h) - (Re z1)^2`` instead.
    """
    z = np.atleast_2d(np.asarray(z, dtype=complex))
    im2 = np.sum(z.imag**2, axis=1)
    re1 = np.maximum(z[:, 0].real, 0.0)
    expo = im2 / (2 * h) - re1**2 if literal else (im2 - re1**2) / (2 * h)
    return (2 * np.pi * h) ** (n / 2) * np.exp(expo) * fsup


def heat_limit(f, x, h: float) -> complex:
    """``(2 pi h)^{-n/2} T f(x)`` at a real point x."""
    x = np.asarray(x, dtype=float)
    return segal_bargmann(f, SBQuery(tuple(x.astype(complex)), h)) / (2 * np.pi * h) ** (len(x) / 2)


# ---------------------------------------------------------------------------
# export


def write_samples_csv(samples, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["lambda", "omega_x", "omega_y", "sigma", "re", "im", "err_est"])
        for s in samples:
            ln = s.line_or_ray
            if not isinstance(ln, Line2D):
                raise TypeError("CSV export covers line samples only")
            wr.writerow(
                [f"{v:.12e}" for v in (s.lam, ln.omega[0], ln.omega[1], ln.sigma, s.value.real, s.value.imag, s.quadrature_error_estimate)]
            )


def write_ray_json(ray: BrokenRay, path):
    with open(path, "w") as fh:
        json.dump(ray.to_dict(), fh, indent=2, sort_keys=True)
