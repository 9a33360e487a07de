"""Forward Schrödinger solves on cylinder grids, boundary traces and partial Cauchy data."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pyamg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import BoundaryPartition, BoundarySamples, CylinderDomain, boundary_samples
from .grid import CylinderGrid

DIRECT_LIMIT = 40_000
COND_LIMIT = 1e12


class NumericalError(RuntimeError):
    pass


class EigenvalueCollisionError(NumericalError):
    """0 is (numerically) a Dirichlet eigenvalue of the discrete operator."""


class DivergenceError(NumericalError):
    pass


class SupportViolationError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


def as_grid(dom) -> CylinderGrid:
    if isinstance(dom, CylinderDomain):
        return dom.grid
    if isinstance(dom, CylinderGrid):
        return dom
    if isinstance(dom, GridFunction):
        return dom.grid
    raise TypeError(f"cannot interpret {type(dom).__name__} as a cylinder grid")


def grid_hash(grid: CylinderGrid) -> str:
    d = grid.disk
    desc = json.dumps(
        [grid.a1, grid.b1, grid.n1, list(d.center), d.radius, d.nr, d.ntheta], sort_keys=True
    )
    return hashlib.sha256(desc.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# fields


@dataclass(frozen=True, eq=False)
class GridFunction:
    grid: CylinderGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != self.grid.shape:
            v = v.reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("grid function has non-finite entries")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_callable(cls, grid, func: Callable, **kw):
        X1, X2, X3 = grid.coords
        return cls(grid, np.asarray(func(X1, X2, X3), **kw) * np.ones(grid.shape))

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.grid.volumes * np.abs(self.values) ** 2)))

    def __add__(self, other):
        return GridFunction(self.grid, self.values + _vals(other))

    def __sub__(self, other):
        return GridFunction(self.grid, self.values - _vals(other))

    def __mul__(self, other):
        return GridFunction(self.grid, self.values * _vals(other))

    __rmul__ = __mul__

    def laplacian(self) -> np.ndarray:
        """Discrete Laplacian, meaningful at interior nodes."""
        return (self.grid.laplacian @ self.values.ravel()).reshape(self.grid.shape)

    def interpolate(self, x1, x2, x3, outside: float = 0.0) -> np.ndarray:
        return interpolate(self.grid, self.values, x1, x2, x3, outside)


def _vals(x):
    return x.values if isinstance(x, GridFunction) else x


@dataclass(frozen=True, eq=False)
class Potential(GridFunction):
    zero_extended: bool = True

    @classmethod
    def constant(cls, grid, c=0.0):
        return cls(grid, np.full(grid.shape, c))

    @classmethod
    def from_callable(cls, grid, func, zero_extended=True):
        X1, X2, X3 = grid.coords
        return cls(grid, np.asarray(func(X1, X2, X3)) * np.ones(grid.shape), zero_extended)

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max())

    def as_callable(self):
        """Pointwise evaluation (trilinear in x1, r, theta); zero off the closed cylinder."""

        def f(x1, x2, x3):
            return self.interpolate(x1, x2, x3, outside=0.0)

        return f

    @property
    def x1_range(self):
        return (self.grid.a1, self.grid.b1)

    @property
    def support_disk(self):
        return (self.grid.disk.center, self.grid.disk.radius)


def interpolate(grid: CylinderGrid, values, x1, x2, x3, outside=0.0):
    d = grid.disk
    x1, x2, x3 = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x1, x2, x3)))
    r = np.hypot(x2 - d.center[0], x3 - d.center[1])
    th = np.mod(np.arctan2(x3 - d.center[1], x2 - d.center[0]), 2 * np.pi)
    inside = (x1 >= grid.a1 - 1e-14) & (x1 <= grid.b1 + 1e-14) & (r <= d.radius * (1 + 1e-14))
    s1 = np.clip((x1 - grid.a1) / grid.dx1, 0, grid.n1)
    i0 = np.minimum(np.floor(s1).astype(int), grid.n1 - 1)
    t1 = s1 - i0
    sr = np.clip(r / d.dr, 0, d.nr)
    j0 = np.minimum(np.floor(sr).astype(int), d.nr - 1)
    tr = sr - j0
    sk = th / d.dtheta
    k0 = np.floor(sk).astype(int) % d.ntheta
    tk = sk - np.floor(sk)
    V = np.asarray(values).reshape(grid.shape)

    def at(i, j, k):
        return V[i, d.index(j, k)]

    out = 0
    for di, wi in ((0, 1 - t1), (1, t1)):
        for dj, wj in ((0, 1 - tr), (1, tr)):
            for dk, wk in ((0, 1 - tk), (1, tk)):
                out = out + wi * wj * wk * at(i0 + di, j0 + dj, k0 + dk)
    return np.where(inside, out, outside)


@dataclass(frozen=True, eq=False)
class TraceFunction:
    samples: BoundarySamples
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != (len(self.samples),):
            raise ValueError("trace values must match the sample set")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_callable(cls, samples: BoundarySamples, func):
        p = samples.points
        return cls(samples, np.asarray(func(p[:, 0], p[:, 1], p[:, 2])) * np.ones(len(samples)))

    @classmethod
    def zeros(cls, samples, dtype=float):
        return cls(samples, np.zeros(len(samples), dtype=dtype))

    def norm(self, mask=None) -> float:
        w = self.samples.weights
        a = np.abs(self.values) ** 2
        if mask is not None:
            w, a = w[mask], a[mask]
        return float(np.sqrt(np.sum(w * a)))

    def integrate(self, mask=None):
        w = self.samples.weights
        v = self.values
        if mask is not None:
            w, v = w[mask], v[mask]
        return np.sum(w * v)

    def restrict(self, mask) -> "TraceFunction":
        return TraceFunction(self.samples, np.where(mask, self.values, 0))

    def node_values(self, grid: CylinderGrid) -> np.ndarray:
        """Average sample values per boundary node (corners carry two samples)."""
        acc = np.zeros(grid.size, dtype=np.result_type(self.values, float))
        cnt = np.zeros(grid.size)
        np.add.at(acc, self.samples.node, self.values)
        np.add.at(cnt, self.samples.node, 1.0)
        out = np.zeros_like(acc)
        hit = cnt > 0
        out[hit] = acc[hit] / cnt[hit]
        return out.reshape(grid.shape)

    def to_csv(self, path):
        p = self.samples.points
        v = self.values.astype(complex)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["sample_index", "x", "y", "z", "re", "im"])
            for i in range(len(v)):
                wr.writerow([i] + [f"{c:.12e}" for c in (*p[i], v[i].real, v[i].imag)])


@dataclass(frozen=True, eq=False)
class CauchyPair:
    dirichlet: TraceFunction
    neumann: TraceFunction
    gamma_D: np.ndarray
    gamma_N: np.ndarray

    def distance(self, other: "CauchyPair") -> float:
        dd = self.dirichlet.values - other.dirichlet.values
        dn = self.neumann.values - other.neumann.values
        w = self.dirichlet.samples.weights
        return float(np.sqrt(np.sum(w * np.abs(dd) ** 2) + np.sum(w * np.abs(dn) ** 2)))


def sample_set(grid: CylinderGrid) -> BoundarySamples:
    return _SAMPLE_CACHE.setdefault(grid, boundary_samples(grid))


_SAMPLE_CACHE: dict = {}


def trace_of(u: GridFunction) -> TraceFunction:
    s = sample_set(u.grid)
    return TraceFunction(s, u.values.ravel()[s.node])


# ---------------------------------------------------------------------------
# linear algebra


@dataclass
class SolveInfo:
    method: str
    iterations: int = 0
    residual: float = 0.0
    condition: float = float("nan")


def _amg_solve(A, b, rtol=1e-12, maxiter=400, refinements=3):
    """AMG-preconditioned CG on the diagonally scaled SPD system, with a few
    rounds of residual correction to push below the CG stopping tolerance."""
    d = 1 / np.sqrt(A.diagonal())
    D = sp.diags(d)
    As = (D @ A @ D).tocsr()
    ml = pyamg.smoothed_aggregation_solver(As, symmetry="hermitian", max_coarse=500)
    M = ml.aspreconditioner(cycle="V")
    count = [0]

    def cb(_):
        count[0] += 1

    bs = d * b
    nb = np.linalg.norm(bs) or 1.0
    xs = np.zeros_like(bs)
    for _ in range(refinements + 1):
        r = bs - As @ xs
        if np.linalg.norm(r) <= 1e-15 * nb:
            break
        dx, info = spla.cg(As, r, rtol=rtol, atol=0.0, maxiter=maxiter, M=M, callback=cb)
        if info != 0:
            dx, info = spla.gmres(As, r, x0=dx, rtol=rtol, atol=0.0, restart=60, maxiter=20, M=M)
            if info != 0:
                raise DivergenceError(
                    "iterative solver did not converge; 0 may be close to a Dirichlet eigenvalue"
                )
        xs = xs + dx
    return d * xs, count[0]


def solve_linear(A: sp.spmatrix, b: np.ndarray, method: str = "auto", check_condition: bool = True):
    """Solve a sparse system, returning (x, SolveInfo).

    Small or complex systems use a sparse LU factorization with a 1-norm
    condition estimate; large real systems use AMG-preconditioned CG.
    """
    n = A.shape[0]
    cplx = np.iscomplexobj(A) or np.iscomplexobj(b)
    if method == "auto":
        method = "direct" if (n <= DIRECT_LIMIT or cplx) else "amg"
    if method == "direct":
        A = sp.csc_matrix(A)
        try:
            lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:  # exactly singular factor
            raise EigenvalueCollisionError(str(exc)) from exc
        cond = float("nan")
        if check_condition:
            inv = spla.LinearOperator(A.shape, matvec=lu.solve, rmatvec=lambda y: lu.solve(y, trans="H"), dtype=A.dtype)
            cond = spla.norm(A, 1) * spla.onenormest(inv)
            if not np.isfinite(cond) or cond > COND_LIMIT:
                raise EigenvalueCollisionError(
                    f"condition estimate {cond:.3e} exceeds {COND_LIMIT:.0e}; perturb q by +eps"
                )
        x = lu.solve(b.astype(A.dtype) if not cplx else b.astype(complex))
        # one step of iterative refinement
        x = x + lu.solve(b - A @ x)
        info = SolveInfo("direct", 1, 0.0, cond)
    elif method == "amg":
        if cplx:
            raise ValueError("AMG path requires a real system")
        x, it = _amg_solve(sp.csr_matrix(A), b)
        info = SolveInfo("amg-cg", it)
    else:
        raise ValueError(f"unknown method {method!r}")
    nb = np.linalg.norm(b)
    info.residual = float(np.linalg.norm(A @ x - b) / (nb if nb > 0 else 1.0))
    return x, info


def dirichlet_system(grid: CylinderGrid, K: sp.spmatrix, qv: np.ndarray | None):
    """Full-grid operator ``K + V q`` (V-weighted form of -Delta + q)."""
    A = K
    if qv is not None:
        vol = grid.volumes.ravel()
        qv = np.asarray(qv).ravel()
        if np.any(qv != 0):
            A = (K + sp.diags(vol * qv)).tocsr()
    return sp.csr_matrix(A)


def solve_with_boundary(grid, A, boundary_values, source=None, method="auto"):
    """Eliminate boundary nodes and solve ``A u = V source`` at interior nodes."""
    bmask = grid.is_boundary.ravel()
    I = np.flatnonzero(~bmask)
    B = np.flatnonzero(bmask)
    g = np.asarray(boundary_values).ravel()
    dtype = np.result_type(A.dtype, g.dtype, float if source is None else np.asarray(source).dtype)
    u = np.zeros(grid.size, dtype=dtype)
    u[B] = g[B]
    rhs = -(A[I][:, B] @ u[B])
    if source is not None:
        rhs = rhs + (grid.volumes.ravel() * np.asarray(source).ravel())[I]
    AII = A[I][:, I]
    x, info = solve_linear(AII, rhs.astype(dtype), method)
    u[I] = x
    return u.reshape(grid.shape), info


def interior_residual(grid, u, q=None, source=None) -> float:
    """Volume-weighted L2 norm of ``(-Delta_h + q) u - source`` over interior nodes."""
    uu = u.values if isinstance(u, GridFunction) else np.asarray(u)
    r = -(grid.laplacian @ uu.ravel())
    if q is not None:
        r = r + np.asarray(_vals(q)).ravel() * uu.ravel()
    if source is not None:
        r = r - np.asarray(_vals(source)).ravel()
    I = ~grid.is_boundary.ravel()
    return float(np.sqrt(np.sum(grid.volumes.ravel()[I] * np.abs(r[I]) ** 2)))


# ---------------------------------------------------------------------------
# public operations


def _q_values(grid, q):
    if q is None:
        return None
    if isinstance(q, GridFunction):
        return q.values
    return np.broadcast_to(np.asarray(q), grid.shape)


def solve_dirichlet(dom, q, g: TraceFunction | GridFunction | np.ndarray, source=None, method="auto", return_info=False):
    """Solve ``(-Delta_h + q) u = source`` with ``u = g`` on boundary nodes."""
    grid = as_grid(dom)
    if isinstance(g, TraceFunction):
        gv = g.node_values(grid)
    elif isinstance(g, GridFunction):
        gv = g.values
    else:
        gv = np.asarray(g).reshape(grid.shape)
    A = dirichlet_system(grid, grid.stiffness, _q_values(grid, q))
    u, info = solve_with_boundary(grid, A, gv, source, method)
    out = GridFunction(grid, u)
    return (out, info) if return_info else out


def neumann_trace(u: GridFunction) -> TraceFunction:
    """Second-order one-sided outward normal derivatives at every boundary sample."""
    grid = u.grid
    s = sample_set(grid)
    V = u.values
    n2 = grid.disk.n_nodes
    out = np.zeros(len(s), dtype=V.dtype if np.iscomplexobj(V) else float)
    h = grid.dx1
    for face, lv in ((0, (0, 1, 2)), (1, (grid.n1, grid.n1 - 1, grid.n1 - 2))):
        m = s.face == face
        col = s.node[m] % n2
        u0, u1, u2 = V[lv[0], col], V[lv[1], col], V[lv[2], col]
        out[m] = (3 * u0 - 4 * u1 + u2) / (2 * h)
    m = s.face == 2
    lat = grid.disk.normal_derivative(V)  # (n1+1, ntheta)
    lev = s.node[m] // n2
    kk = (s.node[m] % n2 - grid.disk.rim[0])
    out[m] = lat[lev, kk]
    return TraceFunction(s, out)


def cauchy_pair(dom, q, partition: BoundaryPartition, g: TraceFunction, tol=1e-12) -> CauchyPair:
    grid = as_grid(dom)
    off = ~partition.gamma_D
    if np.any(np.abs(g.values[off]) > tol):
        raise SupportViolationError("Dirichlet data is nonzero off gamma_D")
    # nodes touched by any sample outside gamma_D carry zero data
    gn = g.node_values(grid).ravel().copy()
    gn[g.samples.node[off]] = 0
    u = solve_dirichlet(grid, q, gn.reshape(grid.shape))
    dn = neumann_trace(u)
    return CauchyPair(
        g.restrict(partition.gamma_D),
        dn.restrict(partition.gamma_N),
        partition.gamma_D.copy(),
        partition.gamma_N.copy(),
    )


def greens_terms(q1, q2, u1: GridFunction, u2: GridFunction, u2_tilde: GridFunction, tol=1e-10):
    """Volume and boundary sides of the integration-by-parts identity."""
    grid = u1.grid
    diff = u1 - u2_tilde
    t = trace_of(diff)
    scale = max(np.abs(trace_of(u1).values).max(), 1e-300)
    if np.abs(t.values).max() > tol * scale:
        raise PreconditionError("u1 - u2_tilde does not vanish on the boundary")
    dq = np.asarray(_vals(q1)) - np.asarray(_vals(q2))
    vol = grid.integrate(dq * u1.values * u2.values)
    bnd = np.sum(
        t.samples.weights
        * (neumann_trace(diff).values * trace_of(u2).values - t.values * neumann_trace(u2).values)
    )
    return vol, bnd


def greens_residual(q1, q2, u1, u2, u2_tilde, tol=1e-10) -> float:
    vol, bnd = greens_terms(q1, q2, u1, u2, u2_tilde, tol)
    return float(abs(vol - bnd))


def _extrapolate_to_boundary(grid: CylinderGrid, v: np.ndarray) -> np.ndarray:
    """Fill boundary nodes by linear extrapolation from the two inner layers."""
    out = v.copy()
    d = grid.disk
    k = np.arange(d.ntheta)
    rim, r1, r2 = d.index(d.nr, k), d.index(d.nr - 1, k), d.index(d.nr - 2, k)
    out[:, rim] = 2 * out[:, r1] - out[:, r2]
    out[0] = 2 * out[1] - out[2]
    out[-1] = 2 * out[-2] - out[-3]
    return out


def conductivity_to_schrodinger(gamma: Potential | GridFunction, probes=None, method="auto"):
    """Return ``(q_gamma, relation_check)``.

    ``q_gamma = Delta_h(sqrt(gamma)) / sqrt(gamma)``; the check is the largest
    relative boundary-L2 defect of the DN-map relation over the probe traces.
    """
    grid = gamma.grid
    g = np.asarray(gamma.values)
    if np.iscomplexobj(g) or g.min() <= 0:
        raise ValueError("conductivity must be real and strictly positive")
    sg = np.sqrt(g)
    q = (grid.laplacian @ sg.ravel()).reshape(grid.shape) / sg
    q = _extrapolate_to_boundary(grid, q)
    q_gamma = Potential(grid, q)
    s = sample_set(grid)
    if probes is None:
        probes = [
            lambda x1, x2, x3: np.ones_like(x1),
            lambda x1, x2, x3: x1 + 0.5 * x2,
            lambda x1, x2, x3: np.exp(0.5 * x3 - 0.3 * x1),
        ]
    g_tr = trace_of(GridFunction(grid, g)).values
    dg = neumann_trace(GridFunction(grid, g)).values
    bmask = grid.is_boundary
    Kg = grid.weighted_stiffness(g)
    worst = 0.0
    for f in probes:
        fv = GridFunction.from_callable(grid, f).values
        v = solve_dirichlet(grid, q_gamma, np.where(bmask, fv, 0), method=method)
        lhs = neumann_trace(v).values
        u_vals, _ = solve_with_boundary(grid, Kg, np.where(bmask, fv / sg, 0), method=method)
        u = GridFunction(grid, u_vals)
        ft = trace_of(GridFunction(grid, fv)).values
        rhs = g_tr ** -0.5 * g_tr * neumann_trace(u).values + 0.5 * dg / g_tr * ft
        w = s.weights
        num = np.sqrt(np.sum(w * np.abs(lhs - rhs) ** 2))
        den = np.sqrt(np.sum(w * np.abs(lhs) ** 2)) + np.sqrt(np.sum(w * np.abs(ft) ** 2))
        worst = max(worst, float(num / den))
    return q_gamma, worst


# ---------------------------------------------------------------------------
# binary I/O


def save_field(f: GridFunction, path) -> dict:
    path = Path(path)
    v = np.asarray(f.values)
    cplx = np.iscomplexobj(v)
    data = v.astype("<c16" if cplx else "<f8")
    path.write_bytes(data.tobytes())
    meta = {
        "shape": list(v.shape),
        "dtype": "complex128" if cplx else "float64",
        "endianness": "little",
        "domain_hash": grid_hash(f.grid),
        "grid": {
            "x1_interval": [f.grid.a1, f.grid.b1],
            "n1": f.grid.n1,
            "center": list(f.grid.disk.center),
            "radius": f.grid.disk.radius,
            "nr": f.grid.disk.nr,
            "ntheta": f.grid.disk.ntheta,
        },
        "kind": "potential" if isinstance(f, Potential) else "grid_function",
    }
    if isinstance(f, Potential):
        meta["zero_extended"] = bool(f.zero_extended)
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True, indent=2))
    return meta


def load_field(path, grid: CylinderGrid | None = None) -> GridFunction:
    from .grid import DiskGrid

    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    gd = meta["grid"]
    if grid is None:
        grid = CylinderGrid(
            gd["x1_interval"][0], gd["x1_interval"][1], gd["n1"],
            DiskGrid(tuple(gd["center"]), gd["radius"], gd["nr"], gd["ntheta"]),
        )
    if grid_hash(grid) != meta["domain_hash"]:
        raise ValueError("field was saved on a different grid")
    dt = "<c16" if meta["dtype"] == "complex128" else "<f8"
    v = np.frombuffer(path.read_bytes(), dtype=dt).reshape(meta["shape"])
    if meta.get("kind") == "potential":
        return Potential(grid, v.copy(), bool(meta.get("zero_extended", True)))
    return GridFunction(grid, v.copy())
