"""Convexified weights, Carleman inequality sides, and conjugated-operator solves.

The conjugated operator ``e^{-s phi} (-Delta_h + q) e^{s phi}`` is formed
exactly at the discrete level: every stencil entry ``A_ij`` picks up the
factor ``exp(s (phi_j - phi_i))``, so no large exponentials are ever formed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import CarlemanWeight, weight_eval
from .grid import CylinderGrid
from .pde import (
    GridFunction,
    NumericalError,
    PreconditionError,
    TraceFunction,
    _extrapolate_to_boundary,
    _q_values,
    as_grid,
    neumann_trace,
    sample_set,
    solve_linear,
)

TIKHONOV = 1e-8


class BoundaryValueError(ValueError):
    pass


class DegenerateSweepError(ValueError):
    pass


class WeightInvariantError(ValueError):
    pass


# ---------------------------------------------------------------------------
# kappa and the convexified weight


def build_kappa(dom, method="auto") -> GridFunction:
    """Mean-zero solution of ``Delta kappa = -|dOmega|/|Omega|``, ``d_nu kappa = -1``.

    Finite-volume Neumann problem: the boundary flux enters each boundary
    cell through its boundary face measure.  One node is pinned to remove the
    constant kernel; the system is consistent so the pinned equation holds too.
    """
    grid = as_grid(dom)
    s = sample_set(grid)
    B = np.zeros(grid.size)
    np.add.at(B, s.node, s.weights)
    V = grid.volumes.ravel()
    src = -B.sum() / V.sum()
    rhs = -B - V * src
    K = grid.stiffness
    keep = np.arange(1, grid.size)
    x, _ = solve_linear(K[keep][:, keep], rhs[keep], method, check_condition=False)
    k = np.zeros(grid.size)
    k[keep] = x
    k -= np.sum(V * k) / V.sum()
    return GridFunction(grid, k)


def grid_gradient(grid: CylinderGrid, values: np.ndarray):
    """Cartesian gradient (g1, g2, g3) of a nodal field by second-order differences."""
    v = np.asarray(values).reshape(grid.shape)
    d = grid.disk
    g1 = np.gradient(v, grid.dx1, axis=0, edge_order=2)
    P = d.polar_view(v)  # (n1+1, nr+1, nt)
    gr = np.gradient(P, d.dr, axis=1, edge_order=2)
    gt = (np.roll(P, -1, axis=2) - np.roll(P, 1, axis=2)) / (2 * d.dtheta)
    r = np.arange(d.nr + 1) * d.dr
    th = np.arange(d.ntheta) * d.dtheta
    c, sn = np.cos(th), np.sin(th)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_r = np.where(r > 0, 1 / np.where(r > 0, r, 1), 0.0)[None, :, None]
    g2p = gr * c - gt * inv_r * sn
    g3p = gr * sn + gt * inv_r * c
    # axis: least-squares plane through the axis and the first ring
    ring = P[:, 1, :] - P[:, :1, 0]
    ax2 = 2 * (ring * c).mean(axis=1) / d.dr
    ax3 = 2 * (ring * sn).mean(axis=1) / d.dr

    def flat(Q, ax):
        out = np.empty(grid.shape, dtype=Q.dtype)
        out[:, 0] = ax
        out[:, 1:] = Q[:, 1:, :].reshape(grid.n1 + 1, -1)
        return out

    return g1, flat(g2p, ax2), flat(g3p, ax3)


@dataclass(frozen=True, eq=False)
class ConvexifiedWeight:
    base: CarlemanWeight
    epsilon: float
    h: float
    kappa: GridFunction
    h0: float | None = None

    def __post_init__(self):
        if self.base.variant != "linear":
            raise WeightInvariantError("convexification is defined for the linear weight")
        h0 = self.h if self.h0 is None else self.h0
        if not (0 < self.h <= h0 <= self.epsilon <= 1):
            raise WeightInvariantError("need 0 < h <= h0 <= epsilon <= 1")
        dn = neumann_trace(self.kappa).values
        if np.max(np.abs(dn + 1)) > 1e-3:
            raise WeightInvariantError("kappa does not have normal derivative -1")
        gn = np.sqrt(sum(np.abs(g) ** 2 for g in self.gradient))
        if gn.min() < 0.5 or gn.max() > 1.5:
            raise WeightInvariantError(f"|grad phi_eps| in [{gn.min():.3f}, {gn.max():.3f}] leaves [1/2, 3/2]")

    @property
    def grid(self):
        return self.kappa.grid

    @property
    def phi(self) -> np.ndarray:
        X = np.stack(self.grid.coords, axis=-1)
        return weight_eval(self.base, X)[0]

    @property
    def phi_eps(self) -> GridFunction:
        p = self.phi
        return GridFunction(self.grid, p + (self.h / self.epsilon) * p**2 / 2 + self.h * self.kappa.values)

    @property
    def gradient(self):
        X = np.stack(self.grid.coords, axis=-1)
        p, gp = weight_eval(self.base, X)
        gk = grid_gradient(self.grid, self.kappa.values)
        f = 1 + self.h * p / self.epsilon
        return tuple(gp[..., i] * f + self.h * gk[i] for i in range(3))

    def boundary_derivative(self) -> np.ndarray:
        s = sample_set(self.grid)
        p, gp = weight_eval(self.base, s.points)
        dn = np.einsum("ij,ij->i", gp, s.normals)
        return dn * (1 + self.h * p / self.epsilon) + self.h * neumann_trace(self.kappa).values


# ---------------------------------------------------------------------------
# conjugated operators


def conjugated_operator(grid: CylinderGrid, phi: np.ndarray, s: complex, q=None) -> sp.csr_matrix:
    """Pointwise form of ``e^{-s phi}(-Delta_h + q)e^{s phi}`` as a sparse matrix."""
    A = (-grid.laplacian).tocoo()
    ph = np.asarray(phi).ravel()
    factor = np.exp(s * (ph[A.col] - ph[A.row]))
    L = sp.csr_matrix((A.data * factor, (A.row, A.col)), shape=A.shape)
    qv = _q_values(grid, q)
    if qv is not None:
        L = L + sp.diags(np.asarray(qv).ravel())
    return L.tocsr()


def semiclassical_operator(grid, phi, h, q=None) -> sp.csr_matrix:
    """``e^{phi/h}(-h^2 Delta_h + h^2 q)e^{-phi/h}``."""
    return (h * h) * conjugated_operator(grid, phi, -1.0 / h, q)


# ---------------------------------------------------------------------------
# Carleman verdicts


@dataclass
class CarlemanVerdict:
    lhs: float
    rhs: float
    ratio: float
    fitted_C0: float
    h_used: float
    delta_used: float
    boundary_term_breakdown: dict = field(default_factory=dict)

    def row(self):
        return {"h": self.h_used, "delta": self.delta_used, "lhs": self.lhs, "rhs": self.rhs, "ratio": self.ratio}


def _sides_sets(dphi_dnu, h, delta):
    minus = dphi_dnu <= -delta
    plus = dphi_dnu >= h / 3
    zero = ~minus & ~plus
    return minus, zero, plus


def carleman_sides(
    u: GridFunction,
    q=None,
    cw: ConvexifiedWeight | CarlemanWeight | None = None,
    delta: float = 0.3,
    h: float | None = None,
    operator: sp.spmatrix | None = None,
) -> CarlemanVerdict:
    """Evaluate both sides of the boundary Carleman inequality for ``u``.

    ``cw`` is either a linear weight (with ``h`` given) or a convexified
    weight carrying its own ``h``.  Raw sums are reported (C0 = 1).
    """
    grid = u.grid
    tr = u.values.ravel()[sample_set(grid).node]
    scale = max(np.abs(u.values).max(), 1.0)
    if np.abs(tr).max() > 1e-12 * scale:
        raise BoundaryValueError("u does not vanish on the boundary")
    if cw is None:
        cw = CarlemanWeight.linear()
    s = sample_set(grid)
    if isinstance(cw, ConvexifiedWeight):
        h = cw.h
        phi = cw.phi_eps.values
        dn_phi = cw.boundary_derivative()
    else:
        if h is None:
            raise ValueError("h is required with a plain weight")
        X = np.stack(grid.coords, axis=-1)
        phi = weight_eval(cw, X)[0]
        dn_phi = np.einsum("ij,ij->i", weight_eval(cw, s.points)[1], s.normals)
    P = operator if operator is not None else semiclassical_operator(grid, phi, h, q)
    Pu = (P @ u.values.ravel()).reshape(grid.shape)
    Pu = _extrapolate_to_boundary(grid, Pu)
    V = grid.volumes
    norm_Pu = float(np.sum(V * np.abs(Pu) ** 2))
    norm_u = float(np.sum(V * np.abs(u.values) ** 2))
    uf = u.values.ravel()
    grad2 = float(np.real(np.vdot(uf, grid.stiffness @ uf)))
    dn = neumann_trace(u).values
    w = s.weights
    minus, zero, plus = _sides_sets(dn_phi, h, delta)
    bm = float(np.sum(w[minus] * np.abs(dn[minus]) ** 2))
    b0 = float(np.sum(w[zero] * np.abs(dn[zero]) ** 2))
    bp = float(np.sum(w[plus] * np.abs(dn[plus]) ** 2))
    lhs = delta * h**3 * bm + h**4 * b0 + h**2 * (norm_u + h**2 * grad2)
    rhs = norm_Pu + h**3 * bp
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else np.inf)
    return CarlemanVerdict(
        lhs, rhs, ratio, 1.0, float(h), float(delta),
        {"S_minus": bm, "S_zero": b0, "S_plus": bp, "interior_Pu": norm_Pu, "u_l2": norm_u, "grad_l2": grad2},
    )


def fit_constants(sweep: list[CarlemanVerdict]) -> tuple[float, float]:
    """C0 = largest ratio; h0 = largest h from which per-h maxima never increase as h shrinks."""
    if not sweep:
        raise DegenerateSweepError("empty sweep")
    good = [v for v in sweep if v.rhs > 0]
    if not good:
        raise DegenerateSweepError("all right-hand sides vanish")
    C0 = max(v.ratio for v in good)
    hs = sorted({v.h_used for v in good})
    per_h = {hh: max(v.ratio for v in good if v.h_used == hh) for hh in hs}
    h0 = hs[0]
    for i in range(1, len(hs)):
        # per-h maxima over [hs[0], hs[i]] must be non-increasing as h decreases
        if all(per_h[hs[k]] <= per_h[hs[k + 1]] for k in range(i)):
            h0 = hs[i]
        else:
            break
    return float(C0), float(h0)


def per_h_constants(sweep: list[CarlemanVerdict]) -> dict[float, float]:
    out: dict[float, float] = {}
    for v in sweep:
        if v.rhs > 0:
            out[v.h_used] = max(out.get(v.h_used, 0.0), v.ratio)
    return dict(sorted(out.items()))


@dataclass(frozen=True)
class BumpFamily:
    """Random bump superposition with a transverse semiclassical carrier.

    ``u_h(x) = c(x) * sum_k a_k exp(-|x - x_k|^2 / (2 s_k^2)) exp(i eta_k . x' / h)``
    where ``c`` vanishes on the cylinder boundary.
    """

    centers: np.ndarray
    scales: np.ndarray
    amplitudes: np.ndarray
    etas: np.ndarray  # (k, 2), transverse carrier

    @classmethod
    def random(cls, rng: np.random.Generator, grid: CylinderGrid, max_bumps=5, carrier=True):
        k = int(rng.integers(1, max_bumps + 1))
        diam = np.hypot(grid.b1 - grid.a1, 2 * grid.disk.radius)
        L = grid.b1 - grid.a1
        R = grid.disk.radius
        rad = R * np.sqrt(rng.uniform(0, 0.7**2, k))
        ang = rng.uniform(0, 2 * np.pi, k)
        centers = np.column_stack(
            [
                grid.a1 + L * rng.uniform(0.15, 0.85, k),
                grid.disk.center[0] + rad * np.cos(ang),
                grid.disk.center[1] + rad * np.sin(ang),
            ]
        )
        scales = diam * rng.uniform(0.1, 0.4, k)
        amps = rng.normal(size=k) + 1j * rng.normal(size=k)
        if carrier:
            dirn = rng.uniform(0, 2 * np.pi, k)
            mag = (rng.uniform(size=k) > 0.15).astype(float)
            etas = np.column_stack([mag * np.cos(dirn), mag * np.sin(dirn)])
        else:
            etas = np.zeros((k, 2))
        return cls(centers, scales, amps, etas)

    def evaluate(self, grid: CylinderGrid, h: float, cutoff: str = "smooth", width: float = 0.15) -> GridFunction:
        """Sample ``u_h`` on the grid.

        ``cutoff="smooth"`` multiplies by a C-infinity factor that is flat at
        the boundary (the boundary terms vanish as the grid is refined); ``cutoff="linear"`` uses the
        polynomial ``(x1-a1)(b1-x1)(1-r^2/R^2)`` whose normal derivative is
        nonzero, so the boundary terms of the inequality are exercised.
        """
        X1, X2, X3 = grid.coords
        R = grid.disk.radius
        cx, cy = grid.disk.center
        rr = np.hypot(X2 - cx, X3 - cy)
        if cutoff == "smooth":
            cut = smooth_step((X1 - grid.a1) / width) * smooth_step((grid.b1 - X1) / width)
            cut = cut * smooth_step((R - rr) / width)
        elif cutoff == "linear":
            cut = np.clip((X1 - grid.a1) * (grid.b1 - X1), 0, None) * np.clip(1 - (rr / R) ** 2, 0, None)
        else:
            raise ValueError(f"unknown cutoff {cutoff!r}")
        out = np.zeros(grid.shape, dtype=complex)
        for c, sc, a, eta in zip(self.centers, self.scales, self.amplitudes, self.etas):
            d2 = (X1 - c[0]) ** 2 + (X2 - c[1]) ** 2 + (X3 - c[2]) ** 2
            out += a * np.exp(-d2 / (2 * sc**2) + 1j * (eta[0] * X2 + eta[1] * X3) / h)
        out *= cut
        out[grid.is_boundary] = 0
        return GridFunction(grid, out)


def smooth_step(t):
    """C-infinity transition: 0 for t <= 0, 1 for t >= 1."""
    t = np.asarray(t, dtype=float)
    def e(x):
        return np.where(x > 0, np.exp(-1 / np.where(x > 0, x, 1)), 0.0)
    a, b = e(t), e(1 - t)
    return a / (a + b)


def carleman_sweep(grid, families, hs, q=None, weight=None, delta=0.3, cutoff="smooth") -> list[CarlemanVerdict]:
    weight = weight or CarlemanWeight.linear()
    X = np.stack(grid.coords, axis=-1)
    phi = weight_eval(weight, X)[0]
    out = []
    for h in hs:
        P = semiclassical_operator(grid, phi, h, q)
        for fam in families:
            out.append(carleman_sides(fam.evaluate(grid, h, cutoff), q, weight, delta, h=h, operator=P))
    return out


def select_epsilon(grid, families, hs, q=None, delta=0.3, eps_grid=(1.0, 0.5, 0.25, 0.125), kappa=None):
    """Grid search over epsilon minimizing the fitted C0 of the convexified estimate.

    Values of epsilon that violate ``h <= epsilon`` or the gradient bounds for
    some h in the sweep are skipped.  Returns (best_eps, {eps: C0 or None}).
    """
    kappa = kappa if kappa is not None else build_kappa(grid)
    base = CarlemanWeight.linear()
    table = {}
    for eps in eps_grid:
        try:
            cws = [ConvexifiedWeight(base, eps, h, kappa, h0=max(hs)) for h in hs]
        except WeightInvariantError:
            table[eps] = None
            continue
        sweep = []
        for cw in cws:
            P = semiclassical_operator(grid, cw.phi_eps.values, cw.h, q)
            for fam in families:
                sweep.append(carleman_sides(fam.evaluate(grid, cw.h), q, cw, delta, operator=P))
        table[eps] = fit_constants(sweep)[0]
    valid = {e: c for e, c in table.items() if c is not None}
    if not valid:
        raise DegenerateSweepError("no admissible epsilon in the grid")
    best = min(valid, key=valid.get)
    return best, table


def write_sweep_csv(sweep, path):
    rows = sorted((v.row() for v in sweep), key=lambda r: (-r["h"], r["delta"], r["lhs"]))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["h", "delta", "lhs", "rhs", "ratio"])
        for r in rows:
            wr.writerow([f"{r[k]:.12e}" for k in ("h", "delta", "lhs", "rhs", "ratio")])


# ---------------------------------------------------------------------------
# conjugated solvability


@dataclass
class NormReport:
    norm_u: float
    norm_f: float
    norm_fminus_S_minus: float
    norm_fminus_S_zero: float
    tau: float
    delta: float
    C0: float | None
    bound: float | None
    holds: bool | None
    pde_residual: float
    boundary_residual: float
    method: str

    def to_dict(self):
        return asdict(self)


def conjugated_sets(grid, phi_sign, tau, delta):
    """Sample masks (S_minus, S_zero, S_plus) for phi = phi_sign * x1."""
    s = sample_set(grid)
    dn = phi_sign * s.normals[:, 0]
    minus = dn <= -delta
    plus = dn >= 1 / (3 * tau)
    return minus, ~minus & ~plus, plus


def _prescribed(grid, fm: TraceFunction, presc_samples):
    """Node mask and values for nodes carrying any sample in the prescribed set."""
    s = fm.samples
    mask = np.zeros(grid.size, dtype=bool)
    mask[s.node[presc_samples]] = True
    acc = np.zeros(grid.size, dtype=complex)
    cnt = np.zeros(grid.size)
    np.add.at(acc, s.node[presc_samples], fm.values[presc_samples])
    np.add.at(cnt, s.node[presc_samples], 1)
    vals = np.zeros(grid.size, dtype=complex)
    vals[mask] = acc[mask] / cnt[mask]
    return mask, vals


def _is_x1_independent(grid, q):
    qv = _q_values(grid, q)
    if qv is None:
        return True, np.zeros(grid.disk.n_nodes)
    qv = np.asarray(qv)
    if np.iscomplexobj(qv) and np.abs(qv.imag).max() > 0:
        return False, None
    qv = np.real(qv)
    # boundary levels are irrelevant for the interior equations
    inner = qv[1:-1]
    if np.ptp(inner, axis=0).max() <= 1e-14 * max(1.0, np.abs(inner).max()):
        return True, inner[0].copy()
    return False, None


class _CrossSectionModes:
    """Dirichlet eigenpairs of ``-Delta'_h + q`` on the interior cross-section nodes."""

    def __init__(self, disk, qx):
        self.disk = disk
        C = np.flatnonzero(~disk.is_boundary)
        self.C = C
        self.rim = disk.rim
        K = disk.stiffness
        V = disk.volumes[C]
        Kq = (K[C][:, C]).toarray() + np.diag(V * qx[C])
        d = 1 / np.sqrt(V)
        S = d[:, None] * Kq * d[None, :]
        lam, Psi = sla.eigh(S, driver="evd", overwrite_a=True)
        self.lam = lam
        self.Phi = d[:, None] * Psi  # V-orthonormal eigenvectors
        self.VPhi = V[:, None] * self.Phi
        self.coupling = sp.diags(1 / V) @ K[C][:, self.rim]  # pointwise rim coupling

    def project(self, r):
        """Mode coefficients of node values ``r`` with shape (..., interior nodes)."""
        return r @ self.VPhi

    def synthesize(self, a):
        """Node values (interior nodes, n) from coefficients (modes, n)."""
        return self.Phi @ a


class _PolarModes:
    """Same eigenpairs for a potential that is radial about the disk centre.

    Angular Fourier modes decouple the operator into tridiagonal radial
    chains; the axis node joins only the zero mode.
    """

    def __init__(self, disk, qx):
        self.disk = disk
        self.C = np.flatnonzero(~disk.is_boundary)
        self.rim = disk.rim
        nr, nt, dr, dth = disk.nr, disk.ntheta, disk.dr, disk.dtheta
        V = disk.volumes[self.C]
        K = disk.stiffness
        self.coupling = sp.diags(1 / V) @ K[self.C][:, self.rim]
        j = np.arange(1, nr)
        Vr = disk.volumes[disk.index(j, 0)]
        qr = qx[disk.index(j, 0)]
        trans = lambda f: f * dth  # radial face at j - 1/2 + f
        ang = 1 / (j * dth)
        self.Vr = Vr
        self.V0 = disk.volumes[0]
        base = trans(j - 0.5) + trans(j + 0.5) + Vr * qr
        off = -trans(j[:-1] + 0.5)
        sym = np.sqrt(2 - 2 * np.cos(np.arange(nt) * dth))
        lam, W = [], []
        for m in range(1, nt):
            dg = base + ang * sym[m] ** 2
            ev, vec = sla.eigh_tridiagonal(dg / Vr, off / np.sqrt(Vr[:-1] * Vr[1:]))
            lam.append(ev)
            W.append(vec / np.sqrt(Vr)[:, None])
        # zero mode with the axis node in front
        Vz = np.concatenate([[self.V0], Vr])
        dz = np.concatenate([[nt * 0.5 * dth + self.V0 * qx[0]], base])
        oz = np.concatenate([[-0.5 * dth * np.sqrt(nt)], off])
        ev0, vec0 = sla.eigh_tridiagonal(dz / Vz, oz / np.sqrt(Vz[:-1] * Vz[1:]))
        self.W0 = vec0 / np.sqrt(Vz)[:, None]
        self.Wm = np.array(W)  # (nt - 1, nr - 1, nr - 1)
        self.lam = np.concatenate([ev0] + lam)
        self.nr, self.nt = nr, nt

    @staticmethod
    def applies(disk, qx):
        ring = qx[1 : 1 + (disk.nr - 1) * disk.ntheta].reshape(disk.nr - 1, disk.ntheta)
        return np.ptp(ring, axis=1).max(initial=0.0) <= 1e-14 * max(1.0, np.abs(qx).max())

    def project(self, r):
        nr, nt = self.nr, self.nt
        lead = r.shape[:-1]
        rings = r[..., 1:].reshape(lead + (nr - 1, nt))
        rh = np.fft.fft(rings, axis=-1) / np.sqrt(nt)  # (..., nr-1, nt)
        z = np.concatenate([r[..., :1] * self.V0, rh[..., 0] * self.Vr], axis=-1)
        c0 = z @ self.W0
        wr = rh[..., 1:] * self.Vr[:, None]  # (..., nr-1, nt-1)
        cm = np.einsum("...jm,mjk->...mk", wr, self.Wm).reshape(lead + (-1,))
        return np.concatenate([c0, cm], axis=-1)

    def synthesize(self, a):
        nr, nt = self.nr, self.nt
        n = a.shape[1:]
        v0 = self.W0 @ a[:nr]
        am = a[nr:].reshape((nt - 1, nr - 1) + n)
        vm = np.einsum("mjk,mk...->jm...", self.Wm, am)  # (nr-1, nt-1, ...)
        spec = np.concatenate([v0[1:, None], vm], axis=1)
        rings = np.fft.ifft(spec, axis=1) * np.sqrt(nt)
        out = np.empty((1 + (nr - 1) * nt,) + n, dtype=complex)
        out[0] = v0[0]
        out[1:] = rings.reshape(((nr - 1) * nt,) + n)
        return out


_MODE_CACHE: dict = {}
DENSE_MODE_LIMIT = 6000


def _modes(disk, qx):
    key = (disk, qx.tobytes())
    if key not in _MODE_CACHE:
        if len(_MODE_CACHE) > 4:
            _MODE_CACHE.clear()
        if _PolarModes.applies(disk, qx):
            _MODE_CACHE[key] = _PolarModes(disk, qx)
        elif disk.n_nodes - disk.ntheta <= DENSE_MODE_LIMIT:
            _MODE_CACHE[key] = _CrossSectionModes(disk, qx)
        else:
            raise NumericalError("cross-section too large for dense modes and q is not radial")
    return _MODE_CACHE[key]


def _penta_hermitian_solve(d0, d1, d2, rhs):
    """Batched solve of Hermitian pentadiagonal systems via banded Cholesky.

    d0: (b, n) diagonal, d1: (b, n-1) first sub-diagonal N[i+1, i],
    d2: (b, n-2) second sub-diagonal N[i+2, i]; rhs: (b, n).
    """
    b, n = d0.shape
    l0 = np.zeros((b, n), dtype=complex)
    l1 = np.zeros((b, n), dtype=complex)  # L[i+1, i]
    l2 = np.zeros((b, n), dtype=complex)  # L[i+2, i]
    for i in range(n):
        piv = d0[:, i].astype(complex)
        if i >= 1:
            piv = piv - np.abs(l1[:, i - 1]) ** 2
        if i >= 2:
            piv = piv - np.abs(l2[:, i - 2]) ** 2
        if np.any(piv.real <= 0):
            raise NumericalError("normal-equation matrix is not positive definite")
        l0[:, i] = np.sqrt(piv.real)
        if i + 1 < n:
            t = d1[:, i].astype(complex)
            if i >= 1:
                t = t - l2[:, i - 1] * np.conj(l1[:, i - 1])
            l1[:, i] = t / l0[:, i]
        if i + 2 < n:
            l2[:, i] = d2[:, i] / l0[:, i]
    z = np.zeros((b, n), dtype=complex)
    for i in range(n):
        t = rhs[:, i].astype(complex)
        if i >= 1:
            t = t - l1[:, i - 1] * z[:, i - 1]
        if i >= 2:
            t = t - l2[:, i - 2] * z[:, i - 2]
        z[:, i] = t / l0[:, i]
    y = np.zeros((b, n), dtype=complex)
    for i in range(n - 1, -1, -1):
        t = z[:, i]
        if i + 1 < n:
            t = t - np.conj(l1[:, i]) * y[:, i + 1]
        if i + 2 < n:
            t = t - np.conj(l2[:, i]) * y[:, i + 2]
        y[:, i] = t / l0[:, i]
    return y


def _solve_separable(grid, qx, sigma, s, fvals, pmask, pvals, mu):
    """Minimum-norm Tikhonov solve using cross-section eigenmodes (q independent of x1)."""
    M = _modes(grid.disk, qx)
    n1, n2, dx = grid.n1, grid.disk.n_nodes, grid.dx1
    C, rim = M.C, M.rim
    P = pvals.reshape(grid.shape)
    # which cap is prescribed
    cap_p = 0 if sigma > 0 else n1
    pm = pmask.reshape(grid.shape)
    if not (pm[:, rim].all() and pm[cap_p].all()) or pm[1:-1][:, C].any() or pm[n1 - cap_p][C].any():
        raise NumericalError("unexpected prescribed set for the separable path")
    inner = slice(1, n1)
    r = fvals[inner][:, C] - (M.coupling @ P[inner][:, rim].T).T
    c = M.project(r)  # (n1-1, modes)
    ap = M.project(P[cap_p][C].astype(complex))  # (modes,)
    lam = M.lam
    ep, em = np.exp(s * sigma * dx), np.exp(-s * sigma * dx)
    up, lo = -ep / dx**2, -em / dx**2  # coefficients of a_{i+1}, a_{i-1}
    diag = 2 / dx**2 + lam  # (modes,)
    # free levels, ordered 0..n1 except cap_p
    free = [i for i in range(n1 + 1) if i != cap_p]
    w = grid.x1_weights[free]
    nf = len(free)
    neq = n1 - 1
    # dense-in-band representation of T_F: rows i=1..n1-1, cols = free index
    col_of = {lev: k for k, lev in enumerate(free)}
    d = c.T.astype(complex)  # (modes, neq)
    if cap_p == 0:
        d[:, 0] -= lo * ap
    else:
        d[:, -1] -= up * ap
    # rows: entries (row, col, value) with value possibly mode-dependent
    B = len(lam)
    T = np.zeros((B, 3), dtype=complex)  # coefficients of levels i-1, i, i+1 (same on every row)
    T[:, 0] = lo
    T[:, 1] = diag
    T[:, 2] = up
    # N = T W^{-1} T^H restricted to free columns
    Nd0 = np.zeros((B, neq))
    Nd1 = np.zeros((B, neq - 1), dtype=complex)
    Nd2 = np.zeros((B, neq - 2), dtype=complex)
    winv = {lev: 1 / grid.x1_weights[lev] for lev in free}

    def coef(row, lev):
        # coefficient of level lev in equation at level row (row in 1..n1-1)
        o = lev - row + 1
        return T[:, o]

    for k in range(neq):
        row = k + 1
        acc = np.zeros(B)
        for lev in (row - 1, row, row + 1):
            if lev in winv:
                acc = acc + np.abs(coef(row, lev)) ** 2 * winv[lev]
        Nd0[:, k] = acc + mu / dx
        if k + 1 < neq:
            acc = np.zeros(B, dtype=complex)
            for lev in (row, row + 1):
                if lev in winv:
                    acc = acc + coef(row + 1, lev) * np.conj(coef(row, lev)) * winv[lev]
            Nd1[:, k] = acc
        if k + 2 < neq:
            lev = row + 1
            Nd2[:, k] = coef(row + 2, lev) * np.conj(coef(row, lev)) * winv[lev]
    y = _penta_hermitian_solve(Nd0, Nd1, Nd2, d)  # (B, neq)
    a = np.zeros((B, n1 + 1), dtype=complex)
    for lev in free:
        acc = np.zeros(B, dtype=complex)
        for row in (lev - 1, lev, lev + 1):
            if 1 <= row <= n1 - 1:
                acc = acc + np.conj(coef(row, lev)) * y[:, row - 1]
        a[:, lev] = acc * winv[lev]
    a[:, cap_p] = ap
    u = P.astype(complex).copy()
    u[:, C] = M.synthesize(a).T
    u[cap_p] = P[cap_p]
    return u


def _solve_general(grid, L, fvals, pmask, pvals, mu):
    """Minimum-norm Tikhonov solve by sparse factorization of the normal equations."""
    bmask = grid.is_boundary.ravel()
    I = np.flatnonzero(~bmask)
    F = np.flatnonzero(~pmask)
    Pn = np.flatnonzero(pmask)
    V = grid.volumes.ravel()
    LI = L[I]
    LIF = LI[:, F]
    d = fvals.ravel()[I] - LI[:, Pn] @ pvals[Pn]
    Winv = sp.diags(1 / V[F])
    N = (LIF @ Winv @ LIF.conj().T + sp.diags(mu / V[I])).tocsc()
    y, _ = solve_linear(N, d.astype(complex), "direct", check_condition=False)
    u = pvals.astype(complex).copy()
    u[F] = Winv @ (LIF.conj().T @ y)
    return u.reshape(grid.shape)


def apply_conjugated(grid: CylinderGrid, phi_sign: int, s: complex, q, u: np.ndarray) -> np.ndarray:
    """``L u`` for ``phi = phi_sign * x1``; matrix-free when q does not depend on x1.

    Rows at boundary nodes are returned as computed by the operator and carry
    no equation.
    """
    u = np.asarray(u).reshape(grid.shape)
    sep, qx = _is_x1_independent(grid, q)
    if not sep:
        L = conjugated_operator(grid, phi_sign * grid.coords[0], s, q)
        return (L @ u.ravel()).reshape(grid.shape)
    disk, dx = grid.disk, grid.dx1
    out = (disk.stiffness @ u.T).T / disk.volumes + qx * u
    ep, em = np.exp(s * phi_sign * dx), np.exp(-s * phi_sign * dx)
    out = out.astype(complex)
    out[1:-1] += (2 * u[1:-1] - em * u[:-2] - ep * u[2:]) / dx**2
    return out


def solve_conjugated(
    dom,
    q,
    phi_sign: int,
    tau,
    delta: float,
    f: GridFunction | np.ndarray,
    f_minus: TraceFunction | None = None,
    C0: float | None = None,
    tau0: float | None = None,
    mu: float = TIKHONOV,
    method: str = "auto",
):
    """Minimum-norm solution of ``e^{-s phi}(-Delta+q)(e^{s phi} u) = f`` with
    ``u = f_minus`` on ``S_- U S_0`` for ``phi = phi_sign * x1``.

    ``tau`` may be complex (``s = tau + i lambda``); the boundary sets use its
    real part.  ``C0`` is the constant used in the reported norm bound.
    """
    grid = as_grid(dom)
    if phi_sign not in (1, -1):
        raise ValueError("phi_sign must be +1 or -1")
    s = complex(tau)
    t = s.real
    if t <= 0:
        raise PreconditionError("tau must be positive")
    if tau0 is not None and t < tau0:
        raise PreconditionError(f"tau={t} is below tau0={tau0}")
    samples = sample_set(grid)
    fvals = np.asarray(f.values if isinstance(f, GridFunction) else f).reshape(grid.shape)
    if f_minus is None:
        f_minus = TraceFunction.zeros(samples, complex)
    Sm, S0, Sp = conjugated_sets(grid, phi_sign, t, delta)
    presc = Sm | S0
    if np.any(np.abs(f_minus.values[~presc]) > 1e-12 * max(1.0, np.abs(f_minus.values).max())):
        raise PreconditionError("f_minus is not supported on S_minus U S_zero")
    pmask, pvals = _prescribed(grid, f_minus, presc)
    sep, qx = _is_x1_independent(grid, q)
    if method == "auto":
        method = "modes" if sep else "direct"
    if method == "modes":
        if not sep:
            raise ValueError("the modal path needs a real potential independent of x1")
        u = _solve_separable(grid, qx, phi_sign, s, fvals, pmask, pvals, mu)
    else:
        L = conjugated_operator(grid, phi_sign * grid.coords[0], s, q)
        u = _solve_general(grid, L, fvals, pmask, pvals, mu)
    # post-checks with the assembled operator
    Lu = apply_conjugated(grid, phi_sign, s, q, u).ravel()
    I = ~grid.is_boundary.ravel()
    res = (Lu - fvals.ravel())[I]
    V = grid.volumes.ravel()[I]
    nf = np.sqrt(np.sum(V * np.abs(fvals.ravel()[I]) ** 2))
    nui = np.sqrt(np.sum(V * np.abs(u.ravel()[I]) ** 2))
    # backward-error scaling: ||f|| + ||L|| ||u|| with a Gershgorin-type bound for ||L||
    qv = _q_values(grid, q)
    qmax = 0.0 if qv is None else float(np.abs(qv).max())
    dmax = float(np.max(np.abs(grid.disk.stiffness.diagonal()) / grid.disk.volumes))
    opn = 2 * dmax + 2 * np.cosh(t * grid.dx1) * 2 / grid.dx1**2 + qmax
    pde_res = float(np.sqrt(np.sum(V * np.abs(res) ** 2)) / max(nf + opn * nui, 1e-300))
    bres = np.abs(u.ravel()[pmask] - pvals[pmask])
    b_res = float(bres.max() / max(np.abs(pvals).max(), 1e-300)) if bres.size else 0.0
    uf = GridFunction(grid, u)
    nu = uf.norm()
    nF = float(np.sqrt(np.sum(grid.volumes * np.abs(fvals) ** 2)))
    nm = f_minus.norm(Sm)
    n0 = f_minus.norm(S0)
    bound = holds = None
    if C0 is not None:
        bound = C0 * (nF / t + nm / np.sqrt(delta * t) + n0)
        holds = bool(nu <= bound * (1 + 1e-12))
    report = NormReport(nu, nF, nm, n0, t, delta, C0, bound, holds, pde_res, b_res, method)
    return uf, report


def constants_json(C0, h0, epsilon=None) -> str:
    return json.dumps({"C0": C0, "h0": h0, "epsilon": epsilon}, sort_keys=True, indent=2)


def solvability_ratio(report: NormReport) -> float:
    """``||u||`` divided by the bracket of the solvability bound taken with C0 = 1."""
    t, d = report.tau, report.delta
    br = report.norm_f / t + report.norm_fminus_S_minus / np.sqrt(d * t) + report.norm_fminus_S_zero
    return float(report.norm_u / br)


def random_conjugated_problem(grid: CylinderGrid, rng: np.random.Generator, taus=(8.0, 16.0, 32.0), delta=0.3):
    """Random (phi_sign, tau, f, f_minus) with smooth Gaussian data.

    Each of the three data pieces (interior source, data on S_minus, data on
    S_zero) is switched on independently; at least one is always present.
    """
    phi_sign = int(rng.choice([-1, 1]))
    tau = float(rng.choice(taus))
    samples = sample_set(grid)
    Sm, S0, _ = conjugated_sets(grid, phi_sign, tau, delta)
    on = rng.uniform(size=3) < 0.6
    if not on.any():
        on[rng.integers(3)] = True
    lo = np.array([grid.a1, grid.disk.center[0] - grid.disk.radius, grid.disk.center[1] - grid.disk.radius])
    hi = np.array([grid.b1, grid.disk.center[0] + grid.disk.radius, grid.disk.center[1] + grid.disk.radius])
    diam = float(np.max(hi - lo))

    def gauss(points):
        c = rng.uniform(lo, hi)
        w = rng.uniform(0.1, 0.3) * diam
        amp = rng.standard_normal() + 1j * rng.standard_normal()
        return amp * np.exp(-np.sum((points - c) ** 2, axis=-1) / (2 * w * w))

    X = np.stack(grid.coords, axis=-1)
    f = gauss(X) if on[0] else np.zeros(grid.shape, dtype=complex)
    fm = np.zeros(len(samples.node), dtype=complex)
    if on[1]:
        fm += np.where(Sm, gauss(samples.points), 0)
    if on[2]:
        fm += np.where(S0, gauss(samples.points), 0)
    return phi_sign, tau, f, TraceFunction(samples, fm)


def solvability_runs(grid, q, n_runs, seed, delta=0.3, taus=(8.0, 16.0, 32.0)) -> list[NormReport]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_runs):
        sg, tau, f, fm = random_conjugated_problem(grid, rng, taus, delta)
        _, rep = solve_conjugated(grid, q, sg, tau, delta, f, fm)
        out.append(rep)
    return out


def fit_solvability_constant(reports: list[NormReport]) -> float:
    """Smallest C0 for which the solvability bound holds on every calibration run."""
    if not reports:
        raise DegenerateSweepError("no calibration runs")
    return max(solvability_ratio(r) for r in reports)
