"""Linearized partial-data pipeline in the plane.

Harmonic exponentials with null complex frequencies, correctors that make
them vanish on a boundary patch F, null-vector splittings of complex
points, and a Segal-Bargmann decay classifier that decides whether a
function vanishes near the boundary point x0 = 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse.linalg as spla
from scipy import stats

from .geometry import StarDomain2D
from .grid import DiskGrid
from .transforms import OverflowGuardError, _feval, _gl_grid, _support_box

NULL_TOL = 1e-12
LOG_GUARD = 700.0
GAMMA = np.array([1j, 1.0])


class OutOfNeighborhoodError(ValueError):
    """The point to decompose is too far from ``2 i a e1``."""


class SceneError(ValueError):
    """The scene is not in normalized position."""


# ---------------------------------------------------------------------------
# null vectors


def bilinear_dot(a, b) -> complex:
    """Complex bilinear product (no conjugation)."""
    return complex(np.sum(np.asarray(a, dtype=complex) * np.asarray(b, dtype=complex)))


@dataclass(frozen=True)
class NullVector:
    zeta: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.zeta, dtype=complex)
        if z.shape not in ((2,), (3,)):
            raise ValueError("a null vector has 2 or 3 components")
        object.__setattr__(self, "zeta", z)
        scale = max(float(np.vdot(z, z).real), 1.0)
        if abs(bilinear_dot(z, z)) > NULL_TOL * scale:
            raise ValueError(f"zeta . zeta = {bilinear_dot(z, z):.3e} is not zero")

    @property
    def n(self) -> int:
        return self.zeta.size

    def exponential(self, xy, h: float) -> np.ndarray:
        """``exp(-i zeta . x / h)`` at points ``xy`` (m, n)."""
        return np.exp(-1j * (np.asarray(xy, dtype=float) @ self.zeta) / h)


@dataclass
class NullSplit:
    zeta: NullVector
    eta: NullVector
    constant: float  # observed C in |zeta - a gamma|, |eta + a conj(gamma)| <= C eps a


def _gamma(n: int, plane: int = 1) -> np.ndarray:
    g = np.zeros(n, dtype=complex)
    g[0] = 1j
    g[plane] = 1.0
    return g


def null_decompose(z, a: float, epsilon: float, plane: int = 1) -> NullSplit:
    """Split ``z`` near ``2 i a e1`` as ``zeta + eta`` with both summands null.

    In the plane ``zeta`` is the gamma-component and ``eta`` the
    conj(gamma)-component in the basis {gamma, conj(gamma)}, gamma = (i, 1).
    In 3D the same construction is embedded in the (x1, x_plane) coordinate
    plane: ``zeta = z/2 + w`` with ``w . z = 0`` and ``w . w = -z . z / 4``,
    ``w`` taken along the bilinear projection of ``e_plane``.
    """
    z = np.asarray(z, dtype=complex)
    n = z.size
    if n not in (2, 3):
        raise ValueError("z must have 2 or 3 components")
    if a <= 0 or epsilon <= 0:
        raise ValueError("a and epsilon must be positive")
    center = np.zeros(n, dtype=complex)
    center[0] = 2j * a
    dist = float(np.linalg.norm(z - center))
    if dist >= 2 * epsilon * a:
        raise OutOfNeighborhoodError(f"|z - 2ia e1| = {dist:.3g} is not below 2 eps a = {2 * epsilon * a:.3g}")
    g = _gamma(n, plane)
    if n == 2:
        p = (z[1] - 1j * z[0]) / 2
        q = (z[1] + 1j * z[0]) / 2
        zeta = p * g
        eta = q * np.conj(g)
    else:
        e = np.zeros(n, dtype=complex)
        e[plane] = 1.0
        zz = bilinear_dot(z, z)
        v = e - bilinear_dot(z, e) / zz * z
        alpha = np.sqrt(-zz / 4 / bilinear_dot(v, v))
        if abs(alpha - a) > abs(alpha + a):
            alpha = -alpha
        zeta = z / 2 + alpha * v
        eta = z / 2 - alpha * v
    err = max(np.linalg.norm(zeta - a * g), np.linalg.norm(eta + a * np.conj(g)))
    return NullSplit(NullVector(zeta), NullVector(eta), float(err / (epsilon * a)))


# ---------------------------------------------------------------------------
# scene


def smooth_step(t) -> np.ndarray:
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)

    def g(s):
        return np.where(s > 0, np.exp(-1 / np.where(s > 0, s, 1.0)), 0.0)

    return g(t) / (g(t) + g(1 - t))


def phi(z1) -> np.ndarray:
    """(Im z1)^2, minus (Re z1)^2 when Re z1 >= 0."""
    z1 = np.asarray(z1, dtype=complex)
    return z1.imag**2 - np.where(z1.real >= 0, z1.real**2, 0.0)


@dataclass
class LinearizedScene:
    """Normalized scene: x0 = 0 on the boundary with tangent {x1 = 0}, the
    domain inside {|x + e1| < 1}, and F the boundary part with x1 <= -2c."""

    domain: StarDomain2D
    c: float
    nr: int = 64
    ntheta: int = 256
    tol: float = 1e-9

    def __post_init__(self):
        if self.c <= 0:
            raise SceneError("c must be positive")
        if not self.domain.is_disk:
            raise SceneError("the harmonic solver needs a disk domain")
        th, pts = self.domain.boundary_samples(2048)
        if np.min(np.hypot(pts[:, 0], pts[:, 1])) > 1e-9:
            raise SceneError("0 must lie on the boundary")
        if np.max(np.hypot(pts[:, 0] + 1, pts[:, 1])) > 1 + self.tol:
            raise SceneError("the domain must lie in {|x + e1| < 1}")
        if np.max(pts[:, 0]) > self.tol:
            raise SceneError("the tangent line at 0 must be {x1 = 0}")
        if not np.any(pts[:, 0] <= -2 * self.c):
            raise SceneError("F = {x1 <= -2c} misses the boundary")

    @classmethod
    def disk(cls, radius: float = 0.9, c: float = 0.2, **kw) -> "LinearizedScene":
        return cls(StarDomain2D.disk((-radius, 0.0), radius), c, **kw)

    @property
    def grid(self) -> DiskGrid:
        d = self.domain
        return DiskGrid(tuple(d.center), d.max_radius(), self.nr, self.ntheta)

    def chi(self, xy) -> np.ndarray:
        """1 on {x1 <= -2c}, 0 on {x1 >= -c}, smooth in between."""
        x1 = np.asarray(xy, dtype=float)[..., 0]
        return smooth_step((-self.c - x1) / self.c)

    def in_F(self, xy) -> np.ndarray:
        return np.asarray(xy, dtype=float)[..., 0] <= -2 * self.c

    @staticmethod
    def Phi(z1) -> np.ndarray:
        return phi(z1)

    def contains(self, xy) -> np.ndarray:
        return self.domain.contains(xy)

    def strip_points(self, delta: float, n: int = 7) -> np.ndarray:
        """Interior points with -delta <= x1 < 0 near x0 = 0."""
        R = self.domain.max_radius()
        x1 = -delta * (np.arange(1, n + 1) / n)
        pts = []
        for a in x1:
            half = np.sqrt(max(R * R - (a + R) ** 2, 0.0))
            for b in np.linspace(-half, half, n + 2)[1:-1]:
                pts.append((a, b))
        return np.array(pts)

    def to_dict(self):
        return {"domain": self.domain.to_dict(), "c": self.c, "nr": self.nr, "ntheta": self.ntheta}


def kelvin_points(xy, center=(0.0, 0.0), radius: float = 1.0) -> np.ndarray:
    """Inversion ``x -> c + R^2 (x - c) / |x - c|^2``."""
    x = np.asarray(xy, dtype=float) - np.asarray(center, dtype=float)
    r2 = np.sum(x * x, axis=-1, keepdims=True)
    if np.any(r2 == 0):
        raise ValueError("the inversion center is singular")
    return np.asarray(center, dtype=float) + radius**2 * x / r2


def kelvin_transform(u: Callable, n: int = 2, center=(0.0, 0.0), radius: float = 1.0) -> Callable:
    """Kelvin transform ``(R/|x-c|)^{n-2} u(c + R^2 (x-c)/|x-c|^2)``; it maps
    harmonic functions to harmonic functions."""
    c = np.asarray(center, dtype=float)

    def v(xy):
        xy = np.asarray(xy, dtype=float)
        r = np.linalg.norm(xy - c, axis=-1)
        return (radius / r) ** (n - 2) * u(kelvin_points(xy, c, radius))

    return v


# ---------------------------------------------------------------------------
# harmonic functions vanishing on F


@dataclass
class HarmonicField:
    grid: DiskGrid
    values: np.ndarray  # u = e + w on grid nodes
    corrector: np.ndarray  # w
    zeta: NullVector
    h: float

    def norm_h1(self, which: str = "corrector") -> float:
        v = self.corrector if which == "corrector" else self.values
        K = self.grid.stiffness
        return float(np.sqrt(abs(np.vdot(v, K @ v)) + np.sum(self.grid.volumes * abs(v) ** 2)))

    def max_on(self, mask) -> float:
        return float(np.max(np.abs(self.values[mask]))) if np.any(mask) else 0.0


_FACTOR_CACHE: dict = {}


def _interior_factor(grid: DiskGrid):
    key = (grid.center, grid.radius, grid.nr, grid.ntheta)
    if key not in _FACTOR_CACHE:
        K = grid.stiffness.tocsr()
        inner = np.setdiff1d(np.arange(grid.n_nodes), grid.rim)
        _FACTOR_CACHE.clear()
        _FACTOR_CACHE[key] = (spla.splu(K[inner][:, inner].tocsc()), K[inner][:, grid.rim], inner)
    return _FACTOR_CACHE[key]


def harmonic_vanishing_on_F(scene: LinearizedScene, zeta: NullVector, h: float) -> HarmonicField:
    """``u = exp(-i zeta.x/h) + w`` with w discrete-harmonic and
    ``w = -exp(-i zeta.x/h) chi`` on the boundary, so that u = 0 on F."""
    if zeta.n != 2:
        raise ValueError("the planar solver needs a 2-component null vector")
    if h <= 0:
        raise ValueError("h must be positive")
    grid = scene.grid
    xy = grid.xy
    expo = np.max(np.abs(xy @ zeta.zeta.imag)) / h
    if expo > LOG_GUARD:
        raise OverflowGuardError(f"|exp(-i zeta.x/h)| reaches exp({expo:.0f})")
    e = zeta.exponential(xy, h)
    rim = grid.rim
    g = -e[rim] * scene.chi(xy[rim])
    w = np.zeros(grid.n_nodes, dtype=complex)
    w[rim] = g
    if np.any(g != 0):
        lu, Kb, inner = _interior_factor(grid)
        rhs = -(Kb @ g)
        w[inner] = lu.solve(rhs.real) + 1j * lu.solve(rhs.imag)
    return HarmonicField(grid, e + w, w, zeta, float(h))


def corrector_decay(scene: LinearizedScene, a_list, h: float) -> dict:
    """Regress ``log ||w||_{H1}`` against ``Im zeta1 / h`` for zeta = a gamma.

    The predicted shape is ``log C + 0.5 log(1 + |zeta|/h) - c Im zeta1 / h``
    (Im zeta' = 0 here).  Returns the fitted exponent (minus the slope after
    removing the algebraic prefactor) and the fitted log C.
    """
    a_list = np.asarray(a_list, dtype=float)
    norms = []
    for a in a_list:
        z = NullVector(a * GAMMA)
        norms.append(harmonic_vanishing_on_F(scene, z, h).norm_h1())
    norms = np.array(norms)
    x = a_list / h
    y = np.log(norms) - 0.5 * np.log(1 + np.sqrt(2) * a_list / h)
    fit = stats.linregress(x, y)
    return {
        "a": a_list.tolist(),
        "norms": norms.tolist(),
        "exponent": float(-fit.slope),
        "log_C": float(fit.intercept),
        "c": scene.c,
    }


def cancellation_integral(f, u1, u2, grid: DiskGrid | None = None) -> complex:
    """``int f u1 u2`` (no conjugation) by the grid volume quadrature."""
    if isinstance(u1, HarmonicField):
        grid = u1.grid
        u1 = u1.values
    if isinstance(u2, HarmonicField):
        grid = u2.grid if grid is None else grid
        u2 = u2.values
    if grid is None:
        raise ValueError("a grid is needed when fields are plain arrays")
    fv = f(grid.xy[:, 0], grid.xy[:, 1]) if callable(f) else np.asarray(f) * np.ones(grid.n_nodes)
    return complex(np.sum(grid.volumes * fv * np.asarray(u1) * np.asarray(u2)))


# ---------------------------------------------------------------------------
# Segal-Bargmann decay classifier


def log_abs_sb(f, z, h: float, nodes: int | None = None) -> float:
    """``log |T f(z)|`` computed with a factored-out maximum exponent, so that
    values far below the double-precision range stay finite."""
    z = np.asarray(z, dtype=complex)
    n = z.size
    lo, hi = _support_box(f, n)
    if nodes is None:
        width = hi - lo
        counts = np.minimum(np.ceil(24 + 1.5 * width * np.abs(z.imag) / h + 8 * width / np.sqrt(h)), 3000)
    else:
        counts = np.full(n, nodes)
    Y, W = _gl_grid(lo, hi, counts.astype(int))
    fw = W * _feval(f, n, Y)
    keep = fw != 0
    if not np.any(keep):
        return -np.inf
    expo = -np.sum((z - Y[keep]) ** 2, axis=-1) / (2 * h)
    m = float(np.max(expo.real))
    s = np.sum(fw[keep] * np.exp(expo - m))
    if s == 0:
        return -np.inf
    return m + float(np.log(abs(s)))


@dataclass
class DecayVerdict:
    verdict: str  # "vanishing", "non-vanishing" or "inconclusive"
    fitted_rate: float  # slope of the normalized log-magnitude against 1/h
    confidence: tuple  # (low, high) band of the slope
    margin: float
    h_list: list
    log_values: list
    heat_check: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "verdict": self.verdict,
            "fitted_rate": self.fitted_rate,
            "confidence": list(self.confidence),
            "margin": self.margin,
            "h_list": list(self.h_list),
            "log_values": list(self.log_values),
            "heat_check": self.heat_check,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


DEFAULT_H_LIST = tuple(10.0 ** -np.arange(1.0, 3.51, 0.25))


def sb_decay_experiment(
    scene: LinearizedScene,
    f,
    h_list=DEFAULT_H_LIST,
    a: float = 1.0,
    epsilon: float = 0.1,
    delta: float = 0.05,
    margin: float = 2e-3,
    level: float = 0.95,
    n_points: int = 5,
) -> DecayVerdict:
    """Classify ``f`` as vanishing near x0 = 0 from the decay of its SB transform.

    For each h the statistic is the largest value over strip points x
    (``-delta <= x1 < 0``) of ``log[(2 pi h)^{-1} |Tf(x)| exp(-Phi(x1)/(2h))]``.
    It is regressed against 1/h.  A vanishing f gives a slope near
    ``-dist^2/2`` (dist from the strip to supp f); a non-vanishing f gives a
    slope near 0.  The verdict is "vanishing" when the whole confidence band
    of the slope lies below ``-margin``, "non-vanishing" when it lies above,
    and "inconclusive" otherwise.  ``a`` and ``epsilon`` set the reference
    point ``2 a e1`` of the decomposition and are reported only.
    """
    h_arr = np.asarray(h_list, dtype=float)
    if h_arr.size < 4 or np.any(np.diff(h_arr) >= 0):
        raise ValueError("h_list must be decreasing with at least 4 entries")
    pts = scene.strip_points(delta, n_points)
    logs = []
    for h in h_arr:
        best = -np.inf
        for p in pts:
            v = log_abs_sb(f, p.astype(complex), h)
            v += -np.log(2 * np.pi * h) - float(phi(p[0])) / (2 * h)
            best = max(best, v)
        logs.append(best)
    logs = np.array(logs)
    x = 1 / h_arr
    if np.all(np.isneginf(logs)):
        return DecayVerdict("vanishing", -np.inf, (-np.inf, -np.inf), margin, h_arr.tolist(), logs.tolist(), {"f_zero": True})
    fit = stats.linregress(x, logs)
    tq = stats.t.ppf(0.5 + level / 2, df=len(x) - 2)
    band = (float(fit.slope - tq * fit.stderr), float(fit.slope + tq * fit.stderr))
    if band[1] < -margin:
        verdict = "vanishing"
    elif band[0] > -margin:
        verdict = "non-vanishing"
    else:
        verdict = "inconclusive"
    # heat-kernel cross-check at the smallest h
    hmin = float(h_arr[-1])
    vals = np.array([_feval(f, 2, p[None, :])[0] for p in pts])
    heat = np.array([np.exp(log_abs_sb(f, p.astype(complex), hmin)) / (2 * np.pi * hmin) for p in pts])
    heat_check = {
        "h": hmin,
        "max_f": float(np.max(np.abs(vals))),
        "max_heat": float(np.max(heat)),
        "consistent": bool((np.max(np.abs(vals)) > 0) == (verdict == "non-vanishing")),
        "a": a,
        "epsilon": epsilon,
    }
    return DecayVerdict(verdict, float(fit.slope), band, margin, h_arr.tolist(), logs.tolist(), heat_check)


# ---------------------------------------------------------------------------
# randomized classifier suite


def restrict_to_scene(f, scene: LinearizedScene):
    """``f`` times the indicator of the scene domain (support box unchanged)."""
    from .phantoms import Phantom2D

    def g(x2, x3):
        inside = scene.domain.contains(np.stack(np.broadcast_arrays(x2, x3), axis=-1))
        return np.where(inside, f.func(x2, x3), 0.0)

    return Phantom2D(g, f.center, f.radius)


def random_phantom(scene: LinearizedScene, rng: np.random.Generator, vanishing: bool, delta: float = 0.05, gap: float = 0.1):
    """Random bump; ``vanishing`` ones keep a distance ``gap`` from the strip
    ``-delta <= x1 <= 0`` near x0, the others are centred next to a strip point."""
    from .phantoms import bump2d

    R = scene.domain.max_radius()
    cd = np.asarray(scene.domain.center)
    while True:
        w = rng.uniform(0.1, 0.3)
        amp = rng.uniform(0.5, 2.0)
        if vanishing:
            c = cd + rng.uniform(0, R - w) * np.array([np.cos(t := rng.uniform(0, 2 * np.pi)), np.sin(t)])
            if np.hypot(*c) - w < np.hypot(delta, np.sqrt(2 * R * delta)) + gap:
                continue
            return bump2d(c, w, amp), False
        p = scene.strip_points(delta, 5)
        c = p[rng.integers(len(p))] + rng.uniform(-0.3, 0.3, 2) * w
        return restrict_to_scene(bump2d(c, w, amp), scene), True


def classifier_trials(scene: LinearizedScene, n_each: int = 20, seed: int = 0, **kw) -> dict:
    """Run the decay classifier on ``n_each`` vanishing and ``n_each``
    non-vanishing random phantoms; inconclusive verdicts count as errors."""
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(2 * n_each):
        vanishing = k % 2 == 0
        f, nonvan = random_phantom(scene, rng, vanishing)
        v = sb_decay_experiment(scene, f, **kw)
        truth = "non-vanishing" if nonvan else "vanishing"
        rows.append({"truth": truth, "verdict": v.verdict, "rate": v.fitted_rate, "center": list(map(float, f.center)), "width": float(f.radius)})
    acc = float(np.mean([r["truth"] == r["verdict"] for r in rows]))
    return {"accuracy": acc, "trials": rows}
