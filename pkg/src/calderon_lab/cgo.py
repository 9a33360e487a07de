"""Quasimode amplitudes in polar coordinates and CGO solutions vanishing off a boundary set."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.integrate import quad

from .carleman import apply_conjugated, conjugated_sets, solve_conjugated
from .geometry import AngularIntervals, BoundaryPartition, StarDomain2D
from .grid import CylinderGrid, DiskGrid
from .pde import GridFunction, NumericalError, TraceFunction, as_grid, sample_set

TWO_PI = 2 * np.pi


class FrameError(ValueError):
    pass


class SupportDefectError(NumericalError):
    pass


@dataclass(frozen=True)
class ComplexFrequency:
    tau: float
    lam: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def s(self) -> complex:
        return complex(self.tau, self.lam)


def _wrap(a):
    return (np.asarray(a) + np.pi) % TWO_PI - np.pi


@dataclass(frozen=True)
class PolarFrame:
    """Polar coordinates ``(r, theta)`` about a point outside the cross-section."""

    x0_prime: tuple[float, float]
    theta0: float
    ball_radius: float = np.inf  # radius of the enlarged ball, centred at the cross-section centre

    def polar(self, xy):
        xy = np.asarray(xy, dtype=float)
        d = xy - np.asarray(self.x0_prime)
        return np.hypot(d[..., 0], d[..., 1]), np.arctan2(d[..., 1], d[..., 0])

    def psi(self, xy):
        return self.polar(xy)[0]

    def direction(self) -> np.ndarray:
        return np.array([np.cos(self.theta0), np.sin(self.theta0)])

    def check(self, dom0: StarDomain2D, E: AngularIntervals | None = None, n: int = 4096):
        th, pts = dom0.boundary_samples(n)
        r, _ = self.polar(pts)
        if dom0.contains(np.asarray(self.x0_prime)) or r.min() <= 0:
            raise FrameError("x0' must lie outside the closed cross-section")
        if np.hypot(*(np.asarray(self.x0_prime) - dom0.center)) >= self.ball_radius:
            raise FrameError("x0' must lie inside the enlarged ball")
        hits = ray_boundary_hits(self, dom0, n)
        if len(hits) == 0:
            raise FrameError("the ray theta = theta0 misses the cross-section")
        if E is not None and not np.all(E.contains(dom0.angle_of(hits))):
            raise FrameError("the ray theta = theta0 meets the boundary outside E")
        return self


def ray_boundary_hits(frame: PolarFrame, dom0: StarDomain2D, n: int = 4096) -> np.ndarray:
    """Points where the ray from x0' in direction theta0 crosses the boundary curve."""
    th = np.linspace(0, TWO_PI, n + 1)
    pts = dom0.point(th)
    _, ang = frame.polar(pts)
    dev = _wrap(ang - frame.theta0)
    out = []
    for i in range(n):
        a, b = dev[i], dev[i + 1]
        if a == 0:
            out.append(pts[i])
        elif a * b < 0 and abs(a - b) < np.pi:
            lo, hi = th[i], th[i + 1]
            fa = a
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                fm = _wrap(frame.polar(dom0.point(mid))[1] - frame.theta0)
                if np.sign(fm) == np.sign(fa):
                    lo, fa = mid, fm
                else:
                    hi = mid
            out.append(dom0.point(0.5 * (lo + hi)))
    return np.array(out).reshape(-1, 2)


def place_frame(dom0: StarDomain2D, omega, sigma: float, factor: float = 3.0) -> PolarFrame:
    """Frame on the line ``sigma*omega_perp + t*omega``, a distance ``factor``
    times the diameter behind the point of the line closest to the centre."""
    w = np.asarray(omega, dtype=float)
    w = w / np.linalg.norm(w)
    wp = np.array([-w[1], w[0]])
    c = np.asarray(dom0.center, dtype=float)
    p = sigma * wp + (c @ w) * w
    D = dom0.diameter()
    x0 = p - factor * D * w
    ball = np.hypot(*(x0 - c)) + D
    return PolarFrame((float(x0[0]), float(x0[1])), float(np.arctan2(w[1], w[0])), float(ball))


_PSI_L2 = quad(lambda t: np.exp(-2 / (1 - t * t)), -1, 1, epsabs=1e-14, epsrel=1e-14)[0]


@dataclass(frozen=True)
class AngularBump:
    """``b(theta) = N * psi((theta - theta0)/w)`` with the standard mollifier,
    normalised so that the integral of |b|^2 over theta is one."""

    theta0: float
    width: float

    def __post_init__(self):
        if not 0 < self.width < np.pi:
            raise ValueError("bump width must lie in (0, pi)")

    @property
    def norm_const(self) -> float:
        return 1 / np.sqrt(self.width * _PSI_L2)

    def _t(self, theta):
        return _wrap(np.asarray(theta, dtype=float) - self.theta0) / self.width

    def __call__(self, theta, derivative: int = 0) -> np.ndarray:
        t = self._t(theta)
        inside = np.abs(t) < 1
        ts = np.where(inside, t, 0.0)
        one = 1 - ts * ts
        psi = np.where(inside, np.exp(-1 / one), 0.0)
        if derivative == 0:
            val = psi
        else:
            g1 = -2 * ts / one**2
            if derivative == 1:
                val = psi * g1
            elif derivative == 2:
                g2 = -2 / one**2 - 8 * ts * ts / one**3
                val = psi * (g1 * g1 + g2)
            else:
                raise ValueError("derivative must be 0, 1 or 2")
        return self.norm_const * val / self.width**derivative

    def support_mask(self, theta) -> np.ndarray:
        return np.abs(self._t(theta)) < 1

    def halved(self) -> "AngularBump":
        return AngularBump(self.theta0, self.width / 2)


def check_bump(frame: PolarFrame, bump: AngularBump, dom0: StarDomain2D, E: AngularIntervals, n=4096):
    th, pts = dom0.boundary_samples(n)
    _, ang = frame.polar(pts)
    inside = bump.support_mask(ang)
    if np.any(inside & ~E.contains(th)):
        raise FrameError("the bump's angular sector meets the boundary outside E")


def default_bump_width(frame: PolarFrame, dom0: StarDomain2D, E: AngularIntervals, n=4096, margin=2):
    """Largest width whose sector clears the boundary outside E by ``margin`` samples."""
    th, pts = dom0.boundary_samples(n)
    _, ang = frame.polar(pts)
    bad = ~E.contains(th)
    dev = np.abs(_wrap(ang - frame.theta0))
    if not bad.any():
        r = frame.psi(pts)
        return float(min(np.pi / 2, 2 * np.arcsin(min(1.0, dom0.max_radius() / r.min()))))
    order = np.sort(dev[bad])
    step = TWO_PI / n * dom0.max_radius() / frame.psi(pts).min()
    return float(max(order[0] - margin * step, step))


def amplitude_values(frame: PolarFrame, bump: AngularBump, s: complex, xy) -> np.ndarray:
    r, th = frame.polar(xy)
    return np.exp(1j * s * r) * r**-0.5 * bump(th)


def build_amplitude(frame, bump, s, dom, E: AngularIntervals | None = None) -> GridFunction:
    """``m = e^{isr} r^{-1/2} b(theta)`` on the cross-section, constant in x1."""
    s = s.s if isinstance(s, ComplexFrequency) else complex(s)
    grid = as_grid(dom)
    disk = grid.disk
    if E is not None:
        dom0 = StarDomain2D.disk(disk.center, disk.radius)
        frame.check(dom0, E)
        check_bump(frame, bump, dom0, E)
    m2 = amplitude_values(frame, bump, s, disk.xy)
    return GridFunction(grid, np.broadcast_to(m2, grid.shape).copy())


def quasimode_terms(frame, bump, s, xy):
    """Eikonal, transport and remainder pieces of ``e^{-is psi}(-Delta - s^2)(e^{is psi} a)``.

    Everything is evaluated in Cartesian form from closed-form derivatives of
    ``r`` and ``theta``.  Returns (eikonal, transport, remainder) with
    ``e^{-is psi}(-Delta - s^2)(e^{is psi} a) = s^2 eikonal*a - i s transport - remainder``.
    """
    xy = np.asarray(xy, dtype=float)
    dx = xy[..., 0] - frame.x0_prime[0]
    dy = xy[..., 1] - frame.x0_prime[1]
    r = np.hypot(dx, dy)
    th = np.arctan2(dy, dx)
    grad_psi = np.stack([dx / r, dy / r], axis=-1)
    lap_psi = 1 / r
    grad_th = np.stack([-dy / r**2, dx / r**2], axis=-1)
    b, b1, b2 = bump(th), bump(th, 1), bump(th, 2)
    a = r**-0.5 * b
    grad_a = (-0.5 * r**-1.5 * b)[..., None] * grad_psi + (r**-0.5 * b1)[..., None] * grad_th
    # Laplacian via product rule: Lap(r^-1/2) b + 2 grad(r^-1/2).grad(b) + r^-1/2 Lap(b)
    lap_rm = 0.25 * r**-2.5  # Lap r^p = p^2 r^{p-2} in 2D
    lap_b = b2 * (grad_th**2).sum(-1)  # theta is harmonic
    cross = 2 * (-0.5 * r**-1.5)[..., None] * grad_psi * (b1[..., None] * grad_th)
    lap_a = lap_rm * b + cross.sum(-1) + r**-0.5 * lap_b
    eik = (grad_psi**2).sum(-1) - 1
    transport = 2 * (grad_psi * grad_a).sum(-1) + lap_psi * a
    return eik, transport, lap_a


def quasimode_source(frame, bump, s, xy) -> np.ndarray:
    """Closed form of ``(-Delta' - s^2) m`` (no q)."""
    s = s.s if isinstance(s, ComplexFrequency) else complex(s)
    r, th = frame.polar(xy)
    return -np.exp(1j * s * r) * r**-2.5 * (bump(th) / 4 + bump(th, 2))


def quasimode_residual(frame, bump, s, dom, q=None) -> float:
    """L2 norm of ``(-Delta' - s^2 + q) m`` by quadrature on the cross-section grid.

    ``q`` may be None, a scalar, a cross-section array or a 3D grid field; in the
    last case the norm is taken over the cylinder.
    """
    grid = as_grid(dom) if not isinstance(dom, DiskGrid) else None
    disk = dom if isinstance(dom, DiskGrid) else grid.disk
    res = quasimode_source(frame, bump, s, disk.xy)
    m = amplitude_values(frame, bump, complex(s.s if isinstance(s, ComplexFrequency) else s), disk.xy)
    qv = getattr(q, "values", q)
    if qv is None:
        return float(np.sqrt(np.sum(disk.volumes * np.abs(res) ** 2)))
    qv = np.asarray(qv)
    if qv.ndim == 2 and grid is not None:
        full = res[None, :] + qv * m[None, :]
        return float(np.sqrt(np.sum(grid.volumes * np.abs(full) ** 2)))
    return float(np.sqrt(np.sum(disk.volumes * np.abs(res + qv * m) ** 2)))


@dataclass(eq=False)
class CGOSolution:
    phi_sign: int
    s: ComplexFrequency
    m: GridFunction
    r0: GridFunction
    u: GridFunction
    boundary_support_defect: float
    pde_residual: float
    gamma: np.ndarray
    report: dict = field(default_factory=dict)

    def ratio(self) -> float:
        return self.r0.norm() / self.m.norm()

    def metadata(self, frame: PolarFrame, bump: AngularBump) -> dict:
        return {
            "phi_sign": self.phi_sign,
            "tau": self.s.tau,
            "lambda": self.s.lam,
            "frame": {"x0_prime": list(frame.x0_prime), "theta0": frame.theta0},
            "bump": {"theta0": bump.theta0, "width": bump.width},
            "norm_m": self.m.norm(),
            "norm_r0": self.r0.norm(),
            "boundary_support_defect": self.boundary_support_defect,
            "pde_residual": self.pde_residual,
        }


def build_cgo(
    dom,
    q,
    partition: BoundaryPartition,
    frame: PolarFrame,
    bump: AngularBump,
    s,
    phi_sign: int,
    E: AngularIntervals | None = None,
    delta: float = 0.3,
    source: str = "discrete",
    defect_tol: float = 1e-8,
    method: str = "auto",
) -> CGOSolution:
    """CGO solution ``u = e^{-phi_sign s x1}(m + r0)`` of ``(-Delta_h + q)u = 0``
    whose boundary values vanish off Gamma (gamma_D for +, gamma_N for -).

    ``source="discrete"`` feeds the solver with ``-L_h m`` so that u solves the
    discrete equation exactly; ``"analytic"`` uses the closed-form quasimode
    residual instead (u then solves the discrete equation only up to the
    grid dispersion of m).
    """
    grid = as_grid(dom)
    freq = s if isinstance(s, ComplexFrequency) else ComplexFrequency(complex(s).real, complex(s).imag)
    sc = freq.s
    E = E if E is not None else partition.E
    m = build_amplitude(frame, bump, sc, grid, E)
    solver_sign = -phi_sign
    x1 = grid.coords[0]
    if source == "discrete":
        f = -apply_conjugated(grid, solver_sign, sc, q, m.values)
    elif source == "analytic":
        qv = getattr(q, "values", 0.0 if q is None else q)
        f2 = -quasimode_source(frame, bump, sc, grid.disk.xy)
        f = np.broadcast_to(f2, grid.shape) - np.asarray(qv) * m.values
    else:
        raise ValueError("source must be 'discrete' or 'analytic'")
    f = np.where(grid.is_boundary.reshape(grid.shape), 0, f)  # boundary rows are not equations
    gamma = partition.gamma_D if phi_sign > 0 else partition.gamma_N
    samples = sample_set(grid)
    Sm, S0, Sp = conjugated_sets(grid, solver_sign, freq.tau, delta)
    if np.any(Sp & ~gamma):
        raise FrameError("the unconstrained cap is not contained in Gamma")
    mvals = m.values.ravel()[samples.node]
    fm = np.where((Sm | S0) & ~gamma, -mvals, 0).astype(complex)
    # corner nodes: a node is forced to -m if any of its samples lies off Gamma
    off_nodes = np.unique(samples.node[(Sm | S0) & ~gamma])
    fm = np.where(np.isin(samples.node, off_nodes) & (Sm | S0), -mvals, fm)
    r0, rep = solve_conjugated(grid, q, solver_sign, sc, delta, f, TraceFunction(samples, fm), method=method)
    phase = np.exp(-phi_sign * sc * x1)
    u = GridFunction(grid, phase * (m.values + r0.values))
    ub = np.abs(u.values.ravel()[samples.node])
    on = ub[gamma].max() if gamma.any() else 0.0
    defect = float(ub[~gamma].max() / on) if (~gamma).any() and on > 0 else 0.0
    if defect > defect_tol:
        raise SupportDefectError(f"boundary support defect {defect:.3e} exceeds {defect_tol:.0e}")
    return CGOSolution(phi_sign, freq, m, r0, u, defect, rep.pde_residual, gamma, rep.to_dict())


@dataclass
class DecayTable:
    rows: list  # (tau, norm_r0, ratio)
    slope: float

    def to_dict(self):
        return {"rows": [list(r) for r in self.rows], "slope": self.slope}


def decay_study(dom, q, partition, frame, bump, lam, tau_list, phi_sign=1, **kw) -> DecayTable:
    taus = list(tau_list)
    if len(taus) < 4 or any(b <= a for a, b in zip(taus, taus[1:])):
        raise ValueError("tau_list must be increasing with at least 4 entries")
    rows = []
    for t in taus:
        sol = build_cgo(dom, q, partition, frame, bump, ComplexFrequency(t, lam), phi_sign, **kw)
        rows.append((float(t), sol.r0.norm(), sol.ratio()))
    lt = np.log([r[0] for r in rows])
    lr = np.log([max(r[1], 1e-300) for r in rows])
    slope = float(np.polyfit(lt, lr, 1)[0])
    return DecayTable(rows, slope)


def export_cgo(sol: CGOSolution, frame, bump, path_prefix) -> dict:
    from .pde import save_field

    meta = sol.metadata(frame, bump)
    for name in ("m", "r0", "u"):
        save_field(getattr(sol, name), f"{path_prefix}_{name}.bin")
    with open(f"{path_prefix}.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
    return meta
