"""Domains, limiting Carleman weights, boundary decomposition and the reachable set."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .grid import CylinderGrid, DiskGrid

TWO_PI = 2 * np.pi


class GeometryError(ValueError):
    pass


class SingularPointError(GeometryError):
    pass


class InconsistentPartitionError(GeometryError):
    pass


# ---------------------------------------------------------------------------
# angular intervals on the cross-section boundary


@dataclass(frozen=True)
class AngularIntervals:
    """Finite union of open arcs, stored as sorted disjoint pieces of [0, 2pi).

    ``full`` marks the whole circle, which a union of open pieces of [0, 2pi)
    cannot represent.
    """

    pieces: tuple[tuple[float, float], ...] = ()
    full: bool = False

    @classmethod
    def from_intervals(cls, intervals: Sequence[Sequence[float]], degrees: bool = False):
        raw = []
        for a, b in intervals:
            if degrees:
                a, b = np.deg2rad(a), np.deg2rad(b)
            a = float(a)
            b = float(b)
            length = (b - a) % TWO_PI
            if length == 0 and a != b:
                length = TWO_PI
            if length >= TWO_PI - 1e-12:
                return cls((), True)
            start = a % TWO_PI
            end = start + length
            if end > TWO_PI:
                raw.append((start, TWO_PI))
                raw.append((0.0, end - TWO_PI))
            else:
                raw.append((start, end))
        raw.sort()
        merged: list[list[float]] = []
        for a, b in raw:
            if merged and a <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], b)
            else:
                merged.append([a, b])
        if len(merged) == 1 and merged[0][0] <= 0 and merged[0][1] >= TWO_PI:
            return cls((), True)
        return cls(tuple((a, b) for a, b in merged), False)

    @classmethod
    def empty(cls):
        return cls((), False)

    @classmethod
    def whole(cls):
        return cls((), True)

    def contains(self, theta) -> np.ndarray:
        th = np.mod(np.asarray(theta, dtype=float), TWO_PI)
        if self.full:
            return np.ones(th.shape, dtype=bool)
        out = np.zeros(th.shape, dtype=bool)
        for a, b in self.pieces:
            inside = (th > a) & (th < b)
            # a piece touching 0 or 2pi continues across the seam
            if a == 0.0:
                inside |= (th == 0.0) & self.contains_seam_end()
            out |= inside
        return out

    def contains_seam_end(self) -> bool:
        return any(b >= TWO_PI for _, b in self.pieces)

    def total_length(self) -> float:
        return TWO_PI if self.full else float(sum(b - a for a, b in self.pieces))

    def issubset(self, other: "AngularIntervals") -> bool:
        if other.full:
            return True
        if self.full:
            return False
        return all(any(c <= a and b <= d for c, d in other.pieces) for a, b in self.pieces)

    def as_degrees(self) -> list[list[float]]:
        if self.full:
            return [[0.0, 360.0]]
        return [[float(np.rad2deg(a)), float(np.rad2deg(b))] for a, b in self.pieces]


# ---------------------------------------------------------------------------
# cross-section and product domains


@dataclass(frozen=True)
class StarDomain2D:
    """Star-shaped planar domain with boundary ``c + rho(theta) (cos, sin)``.

    ``rho`` is the trigonometric interpolant of ``radius_samples`` taken at
    uniform angles ``2 pi k / N``.
    """

    center: tuple[float, float]
    radius_samples: tuple[float, ...]
    check_points: int = 1024

    def __post_init__(self):
        rs = np.asarray(self.radius_samples, dtype=float)
        if rs.ndim != 1 or rs.size == 0:
            raise GeometryError("radius_samples must be a non-empty 1-d sequence")
        if np.any(rs <= 0):
            raise GeometryError("radius samples must be positive")
        th = np.linspace(0, TWO_PI, self.check_points, endpoint=False)
        rho = self.rho(th)
        if np.any(rho <= 0):
            raise GeometryError("interpolated radius is not positive")
        if _polygon_self_intersects(self.point(th)):
            raise GeometryError("boundary curve self-intersects")

    @classmethod
    def disk(cls, center=(0.0, 0.0), radius=1.0):
        return cls(tuple(map(float, center)), (float(radius),))

    @property
    def is_disk(self) -> bool:
        rs = np.asarray(self.radius_samples)
        return bool(np.allclose(rs, rs[0], rtol=0, atol=1e-14))

    @cached_property
    def _coefficients(self):
        rs = np.asarray(self.radius_samples, dtype=float)
        n = rs.size
        c = np.fft.rfft(rs) / n
        k = np.arange(c.size)
        scale = np.where((k == 0) | ((n % 2 == 0) & (k == n // 2)), 1.0, 2.0)
        return k, c * scale

    def rho(self, theta, derivative: int = 0) -> np.ndarray:
        th = np.asarray(theta, dtype=float)
        k, c = self._coefficients
        phase = np.exp(1j * np.multiply.outer(th, k))
        factor = (1j * k) ** derivative
        return np.real(phase @ (c * factor))

    def point(self, theta) -> np.ndarray:
        th = np.asarray(theta, dtype=float)
        rho = self.rho(th)
        return np.stack(
            [self.center[0] + rho * np.cos(th), self.center[1] + rho * np.sin(th)], axis=-1
        )

    def normal(self, theta) -> np.ndarray:
        """Outward unit normal at the boundary point of polar angle ``theta``."""
        th = np.asarray(theta, dtype=float)
        rho, drho = self.rho(th), self.rho(th, 1)
        # tangent is d/dtheta of the boundary point; rotate clockwise for outward
        tx = drho * np.cos(th) - rho * np.sin(th)
        ty = drho * np.sin(th) + rho * np.cos(th)
        nrm = np.hypot(tx, ty)
        return np.stack([ty / nrm, -tx / nrm], axis=-1)

    def angle_of(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return np.mod(np.arctan2(xy[..., 1] - self.center[1], xy[..., 0] - self.center[0]), TWO_PI)

    def level(self, xy) -> np.ndarray:
        """Boundary defining function ``|x - c| - rho(theta(x))`` (negative inside)."""
        xy = np.asarray(xy, dtype=float)
        d = np.hypot(xy[..., 0] - self.center[0], xy[..., 1] - self.center[1])
        return d - self.rho(self.angle_of(xy))

    def contains(self, xy, closed: bool = True) -> np.ndarray:
        lv = self.level(xy)
        return lv <= 1e-12 if closed else lv < -1e-12

    def max_radius(self) -> float:
        th = np.linspace(0, TWO_PI, self.check_points, endpoint=False)
        return float(self.rho(th).max())

    def diameter(self) -> float:
        pts = self.point(np.linspace(0, TWO_PI, 512, endpoint=False))
        hull = pts[ConvexHull(pts).vertices]
        d = hull[:, None, :] - hull[None, :, :]
        return float(np.sqrt((d**2).sum(-1)).max())

    def boundary_samples(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        th = np.linspace(0, TWO_PI, n, endpoint=False)
        return th, self.point(th)

    def to_dict(self) -> dict:
        return {"center": list(self.center), "radius_samples": list(self.radius_samples)}


def _polygon_self_intersects(pts: np.ndarray) -> bool:
    """Segment-intersection test for a closed polygon (non-adjacent pairs only)."""
    p = pts
    q = np.roll(pts, -1, axis=0)
    n = len(p)

    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (
            c[..., 0] - a[..., 0]
        )

    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    for start in range(0, len(i), 200_000):
        a, b = p[i[start : start + 200_000]], q[i[start : start + 200_000]]
        c, d = p[j[start : start + 200_000]], q[j[start : start + 200_000]]
        d1, d2 = orient(a, b, c), orient(a, b, d)
        d3, d4 = orient(c, d, a), orient(c, d, b)
        if np.any((d1 * d2 < 0) & (d3 * d4 < 0)):
            return True
    return False


@dataclass(frozen=True)
class CylinderDomain:
    x1_interval: tuple[float, float]
    cross_section: StarDomain2D
    grid_resolution: tuple[int, int, int] = (16, 8, 32)

    def __post_init__(self):
        a1, b1 = self.x1_interval
        if not a1 < b1:
            raise GeometryError("x1_interval must satisfy a1 < b1")
        if any(int(n) < 8 for n in self.grid_resolution):
            raise GeometryError("grid resolutions must be >= 8")

    @property
    def length(self) -> float:
        return self.x1_interval[1] - self.x1_interval[0]

    @cached_property
    def grid(self) -> CylinderGrid:
        if not self.cross_section.is_disk:
            raise GeometryError("the 3D solver requires a disk cross-section")
        n1, nr, nth = self.grid_resolution
        disk = DiskGrid(self.cross_section.center, self.cross_section.radius_samples[0], nr, nth)
        return CylinderGrid(self.x1_interval[0], self.x1_interval[1], n1, disk)

    def to_dict(self) -> dict:
        d = self.cross_section.to_dict()
        d["x1_interval"] = list(self.x1_interval)
        d["grid_resolution"] = list(self.grid_resolution)
        return d


def cylinder(x1_interval=(-0.5, 0.5), radius=0.5, center=(0.0, 0.0), resolution=(16, 8, 32)):
    return CylinderDomain(tuple(x1_interval), StarDomain2D.disk(center, radius), tuple(resolution))


# ---------------------------------------------------------------------------
# limiting Carleman weights

WEIGHT_VARIANTS = ("linear", "log", "inverted-linear", "arg-plane", "arg-quadric", "log-ratio")


def _arg(z):
    """Principal argument via ``2 arctan(Im z / (|z| + Re z))``."""
    return 2 * np.arctan2(np.imag(z), np.abs(z) + np.real(z))


@dataclass(frozen=True)
class CarlemanWeight:
    variant: str
    alpha: tuple[float, ...] | None = None
    beta: tuple[float, ...] | None = None
    theta: float = 0.0
    xi: tuple[float, ...] | None = None
    x0: tuple[float, ...] | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.variant not in WEIGHT_VARIANTS:
            raise GeometryError(f"unknown weight variant {self.variant!r}")
        if self.variant in ("linear", "inverted-linear", "arg-plane"):
            if self.alpha is None or abs(np.linalg.norm(self.alpha) - 1) > 1e-12:
                raise GeometryError("alpha must be a unit vector")
        if self.variant == "arg-plane":
            if self.beta is None or abs(np.linalg.norm(self.beta) - 1) > 1e-12:
                raise GeometryError("beta must be a unit vector")
            if abs(np.dot(self.alpha, self.beta)) > 1e-12:
                raise GeometryError("alpha and beta must be orthogonal")
        if self.variant in ("arg-quadric", "log-ratio"):
            if self.xi is None or np.linalg.norm(self.xi) == 0:
                raise GeometryError("xi must be nonzero")
        if self.scale <= 0:
            raise GeometryError("scale must be positive")

    @classmethod
    def linear(cls, alpha=(1.0, 0.0, 0.0)):
        return cls("linear", alpha=tuple(map(float, alpha)))

    @property
    def params(self) -> dict:
        out = {}
        for key in ("alpha", "beta", "xi", "x0"):
            v = getattr(self, key)
            if v is not None:
                out[key] = list(v)
        if self.variant == "arg-quadric":
            out["theta"] = self.theta
        if self.scale != 1.0:
            out["scale"] = self.scale
        return out

    def to_dict(self) -> dict:
        return {"variant": self.variant, "params": self.params}

    @classmethod
    def from_dict(cls, d: dict):
        p = dict(d.get("params", {}))
        kw = {k: tuple(p[k]) for k in ("alpha", "beta", "xi", "x0") if k in p}
        if "theta" in p:
            kw["theta"] = float(p["theta"])
        if "scale" in p:
            kw["scale"] = float(p["scale"])
        return cls(d["variant"], **kw)


def weight_eval(w: CarlemanWeight, x, tol: float = 1e-12):
    """Value and exact gradient of a limiting Carleman weight.

    ``x`` has shape (..., n).  Raises :class:`SingularPointError` when a point
    is within ``tol`` of the variant's singular set.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    shift = np.zeros(n) if w.x0 is None else np.asarray(w.x0, dtype=float)
    y = w.scale * (x - shift)
    c = w.scale

    def vec(v):
        return np.asarray(v, dtype=float)

    v = w.variant
    if v == "linear":
        a = vec(w.alpha)
        val = y @ a
        grad = np.broadcast_to(c * a, x.shape).copy()
    elif v == "log":
        r2 = (y**2).sum(-1)
        if np.any(np.sqrt(r2) <= tol):
            raise SingularPointError("log|x| is singular at the origin")
        val = 0.5 * np.log(r2)
        grad = c * y / r2[..., None]
    elif v == "inverted-linear":
        a = vec(w.alpha)
        r2 = (y**2).sum(-1)
        if np.any(np.sqrt(r2) <= tol):
            raise SingularPointError("alpha.x/|x|^2 is singular at the origin")
        ay = y @ a
        val = ay / r2
        grad = c * (a / r2[..., None] - 2 * (ay / r2**2)[..., None] * y)
    elif v == "arg-plane":
        a, b = vec(w.alpha), vec(w.beta)
        re, im = y @ a, y @ b
        _check_arg_cut(re, im, tol)
        val = _arg(re + 1j * im)
        m2 = re**2 + im**2
        grad = c * ((re / m2)[..., None] * b - (im / m2)[..., None] * a)
    elif v == "arg-quadric":
        xi = vec(w.xi)
        rot = np.exp(1j * w.theta)
        z = rot * ((y**2).sum(-1) - xi @ xi + 2j * (y @ xi))
        _check_arg_cut(z.real, z.imag, tol)
        val = _arg(z)
        dz = rot[..., None] * (2 * y + 2j * xi) if np.ndim(rot) else rot * (2 * y + 2j * xi)
        grad = c * np.imag(dz / z[..., None])
    else:  # log-ratio
        xi = vec(w.xi)
        p2 = ((y + xi) ** 2).sum(-1)
        m2 = ((y - xi) ** 2).sum(-1)
        if np.any(np.sqrt(p2) <= tol) or np.any(np.sqrt(m2) <= tol):
            raise SingularPointError("log-ratio weight is singular at +-xi")
        val = np.log(p2 / m2)
        grad = c * (2 * (y + xi) / p2[..., None] - 2 * (y - xi) / m2[..., None])
    return val, grad


def _check_arg_cut(re, im, tol):
    mag = np.hypot(re, im)
    on_cut = (mag <= tol) | ((np.abs(im) <= tol * np.maximum(1, mag)) & (re < 0))
    if np.any(on_cut):
        raise SingularPointError("arg weight evaluated on its branch cut (-inf, 0]")


# ---------------------------------------------------------------------------
# boundary samples and partitions


@dataclass(frozen=True)
class BoundarySamples:
    """Boundary sample set of a cylinder grid.

    Corner nodes appear twice, once as a cap sample and once as a lateral
    sample, each with its own face normal.  Weights are trapezoid-type and sum
    exactly to the boundary area.
    """

    node: np.ndarray  # flat node index into the cylinder grid
    face: np.ndarray  # 0 = cap x1 = a1, 1 = cap x1 = b1, 2 = lateral
    points: np.ndarray  # (m, 3)
    normals: np.ndarray  # (m, 3)
    weights: np.ndarray  # (m,)
    angle: np.ndarray  # polar angle of the cross-section point (nan on the axis)

    def __len__(self):
        return len(self.node)


def boundary_samples(grid: CylinderGrid) -> BoundarySamples:
    disk = grid.disk
    n2 = disk.n_nodes
    nodes, faces, pts, nrm, wts, ang = [], [], [], [], [], []
    for face, i, sign in ((0, 0, -1.0), (1, grid.n1, 1.0)):
        idx = i * n2 + np.arange(n2)
        nodes.append(idx)
        faces.append(np.full(n2, face))
        pts.append(np.column_stack([np.full(n2, grid.x1[i]), disk.xy]))
        nrm.append(np.tile([sign, 0.0, 0.0], (n2, 1)))
        wts.append(disk.volumes.copy())
        a = disk.theta.copy()
        a[0] = np.nan
        ang.append(a)
    rim = disk.rim
    th = disk.theta[rim]
    for i in range(grid.n1 + 1):
        nodes.append(i * n2 + rim)
        faces.append(np.full(rim.size, 2))
        pts.append(np.column_stack([np.full(rim.size, grid.x1[i]), disk.xy[rim]]))
        nrm.append(np.column_stack([np.zeros(rim.size), np.cos(th), np.sin(th)]))
        wts.append(grid.x1_weights[i] * disk.boundary_lengths)
        ang.append(th.copy())
    return BoundarySamples(
        np.concatenate(nodes),
        np.concatenate(faces),
        np.concatenate(pts),
        np.concatenate(nrm),
        np.concatenate(wts),
        np.concatenate(ang),
    )


PLUS, MINUS, TANGENTIAL = 1, -1, 0


@dataclass(frozen=True)
class BoundaryPartition:
    samples: BoundarySamples
    labels: np.ndarray  # +1, -1, 0 per sample
    dphi_dnu: np.ndarray
    E: AngularIntervals
    gamma_a: np.ndarray  # boolean masks over samples
    gamma_i: np.ndarray
    gamma_D: np.ndarray
    gamma_N: np.ndarray
    tangential_tolerance: float
    margins: tuple[float, float] = (0.0, 0.0)

    @property
    def plus(self) -> np.ndarray:
        return self.labels == PLUS

    @property
    def minus(self) -> np.ndarray:
        return self.labels == MINUS

    @property
    def tangential(self) -> np.ndarray:
        return self.labels == TANGENTIAL

    def check(self):
        t = self.tangential
        if not np.array_equal(self.gamma_a | self.gamma_i, t) or np.any(self.gamma_a & self.gamma_i):
            raise InconsistentPartitionError("gamma_a, gamma_i must split the tangential set")
        if np.any((self.minus | self.gamma_a) & ~self.gamma_D):
            raise InconsistentPartitionError("gamma_D must contain minus and gamma_a")
        if np.any((self.plus | self.gamma_a) & ~self.gamma_N):
            raise InconsistentPartitionError("gamma_N must contain plus and gamma_a")
        if np.any(self.gamma_i & self.E.contains(np.nan_to_num(self.samples.angle))):
            raise InconsistentPartitionError("gamma_i must lie over the complement of E")
        return self

    def to_dict(self) -> dict:
        return {
            "E_intervals": self.E.as_degrees(),
            "margins": list(self.margins),
            "tangential_tolerance": self.tangential_tolerance,
            "counts": {
                "plus": int(self.plus.sum()),
                "minus": int(self.minus.sum()),
                "tangential": int(self.tangential.sum()),
                "gamma_a": int(self.gamma_a.sum()),
                "gamma_i": int(self.gamma_i.sum()),
                "gamma_D": int(self.gamma_D.sum()),
                "gamma_N": int(self.gamma_N.sum()),
            },
        }


def _enlarge(mask: np.ndarray, points: np.ndarray, margin: float) -> np.ndarray:
    if margin <= 0 or not mask.any():
        return mask.copy()
    tree = cKDTree(points[mask])
    dist, _ = tree.query(points, k=1)
    return mask | (dist <= margin)


def partition_boundary(
    dom: CylinderDomain | CylinderGrid,
    w: CarlemanWeight,
    E: AngularIntervals,
    gamma_margins: tuple[float, float] = (0.0, 0.0),
    tangential_tolerance: float = 1e-8,
    gamma_i: np.ndarray | None = None,
    samples: BoundarySamples | None = None,
) -> BoundaryPartition:
    """Label boundary samples by the sign of ``grad(phi) . nu`` and build the
    accessible/inaccessible sets.

    ``gamma_i`` may be supplied explicitly; it must then consist of
    tangential samples only.
    """
    grid = dom.grid if isinstance(dom, CylinderDomain) else dom
    s = samples if samples is not None else boundary_samples(grid)
    _, grad = weight_eval(w, s.points)
    dn = np.einsum("ij,ij->i", grad, s.normals)
    labels = np.where(dn > tangential_tolerance, PLUS, np.where(dn < -tangential_tolerance, MINUS, TANGENTIAL))
    tan = labels == TANGENTIAL
    over_E = E.contains(np.nan_to_num(s.angle)) & ~np.isnan(s.angle)
    # tangential samples on caps (possible for exotic weights) are never over E's complement
    lateral = s.face == 2
    if gamma_i is None:
        g_i = tan & lateral & ~over_E
    else:
        g_i = np.asarray(gamma_i, dtype=bool)
        if np.any(g_i & ~tan):
            raise InconsistentPartitionError("gamma_i intersects a non-tangential sample")
    g_a = tan & ~g_i
    m_D, m_N = gamma_margins
    g_D = _enlarge((labels == MINUS) | g_a, s.points, m_D)
    g_N = _enlarge((labels == PLUS) | g_a, s.points, m_N)
    return BoundaryPartition(
        s, labels, dn, E, g_a, g_i, g_D, g_N, float(tangential_tolerance), (float(m_D), float(m_N))
    ).check()


# ---------------------------------------------------------------------------
# reachable set


@dataclass(frozen=True)
class ReachableSet:
    K_hull: np.ndarray  # (k, 2) hull vertices, counter-clockwise; empty if K is empty
    x: np.ndarray
    y: np.ndarray
    inside: np.ndarray  # grid points of the closed cross-section
    O_mask: np.ndarray
    boundary_flags: np.ndarray  # O cells with a non-O neighbour inside the domain
    K_interior_mask: np.ndarray

    @property
    def cell_area(self) -> float:
        return float((self.x[1] - self.x[0]) * (self.y[1] - self.y[0]))

    def area(self) -> float:
        return float(self.O_mask.sum()) * self.cell_area

    def to_csv(self, path):
        X, Y = np.meshgrid(self.x, self.y, indexing="ij")
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["x", "y", "flag"])
            for xx, yy, f in zip(X.ravel(), Y.ravel(), self.O_mask.ravel()):
                wr.writerow([f"{xx:.12e}", f"{yy:.12e}", int(f)])


def hull_of_complement(dom0: StarDomain2D, E: AngularIntervals, n_samples: int = 2048) -> np.ndarray:
    """Vertices of the convex hull of the boundary samples outside E."""
    th, pts = dom0.boundary_samples(n_samples)
    keep = ~E.contains(th)
    pts = pts[keep]
    if len(pts) == 0:
        return np.zeros((0, 2))
    if len(pts) < 3:
        return pts
    try:
        hull = ConvexHull(pts)
    except QhullError:  # collinear samples: K is a segment
        return pts
    return pts[hull.vertices]


def _support_interval(hull: np.ndarray, normal: np.ndarray):
    """min/max of ``v . normal`` over the hull vertices for each normal, (m,)"""
    proj = hull @ normal.T
    return proj.min(axis=0), proj.max(axis=0)


def points_in_hull_interior(hull: np.ndarray, pts: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    if len(hull) < 3:
        return np.zeros(len(pts), dtype=bool)
    inside = np.ones(len(pts), dtype=bool)
    for a, b in zip(hull, np.roll(hull, -1, axis=0)):
        e = b - a
        cross = e[0] * (pts[:, 1] - a[1]) - e[1] * (pts[:, 0] - a[0])
        inside &= cross > tol
    return inside


def reachable_set(
    dom0: StarDomain2D,
    E: AngularIntervals,
    n_grid: int = 129,
    n_directions: int = 512,
    n_boundary: int = 2048,
    tol: float = 1e-12,
) -> ReachableSet:
    """Grid mask of the part of the closed cross-section covered by lines that
    keep the inaccessible boundary arc on one side (touching allowed)."""
    hull = hull_of_complement(dom0, E, n_boundary)
    R = dom0.max_radius()
    x = np.linspace(dom0.center[0] - R, dom0.center[0] + R, n_grid)
    y = np.linspace(dom0.center[1] - R, dom0.center[1] + R, n_grid)
    X, Y = np.meshgrid(x, y, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    inside = dom0.contains(pts)
    k_int = points_in_hull_interior(hull, pts, tol)
    if len(hull) == 0:
        O = inside.copy()
    else:
        ang = np.pi * np.arange(n_directions) / n_directions
        perp = np.column_stack([-np.sin(ang), np.cos(ang)])
        lo, hi = _support_interval(hull, perp)
        O = np.zeros(len(pts), dtype=bool)
        cand = np.flatnonzero(inside)
        s = pts[cand] @ perp.T  # signed distance of the line through p with direction omega
        ok = (s <= lo[None, :] + tol) | (s >= hi[None, :] - tol)
        O[cand] = ok.any(axis=1)
        O &= ~k_int
    O = O.reshape(X.shape)
    inside = inside.reshape(X.shape)
    flags = np.zeros_like(O)
    pad = np.pad(O, 1, constant_values=False)
    pad_in = np.pad(inside, 1, constant_values=False)
    for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nb = pad[1 + dx : 1 + dx + O.shape[0], 1 + dy : 1 + dy + O.shape[1]]
        nb_in = pad_in[1 + dx : 1 + dx + O.shape[0], 1 + dy : 1 + dy + O.shape[1]]
        flags |= O & nb_in & ~nb
    return ReachableSet(hull, x, y, inside, O, flags, k_int.reshape(X.shape))


# ---------------------------------------------------------------------------
# serialization of domain + partition descriptions


def describe(dom: CylinderDomain, w: CarlemanWeight, E: AngularIntervals, margins=(0.0, 0.0)) -> dict:
    d = dom.to_dict()
    d["E_intervals"] = E.as_degrees()
    d["weight"] = w.to_dict()
    d["margins"] = list(margins)
    return d


def load_description(d: dict):
    allowed = {"center", "radius_samples", "x1_interval", "grid_resolution", "E_intervals", "weight", "margins"}
    unknown = set(d) - allowed
    if unknown:
        raise GeometryError(f"unknown keys in description: {sorted(unknown)}")
    cs = StarDomain2D(tuple(d["center"]), tuple(d["radius_samples"]))
    dom = CylinderDomain(tuple(d["x1_interval"]), cs, tuple(d.get("grid_resolution", (16, 8, 32))))
    E = AngularIntervals.from_intervals(d.get("E_intervals", []), degrees=True)
    w = CarlemanWeight.from_dict(d["weight"]) if "weight" in d else CarlemanWeight.linear()
    return dom, w, E, tuple(d.get("margins", (0.0, 0.0)))


def dumps_description(d: dict) -> str:
    return json.dumps(d, sort_keys=True, indent=2)
