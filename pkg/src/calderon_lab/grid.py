"""Finite-volume polar grids for disks and cylinders.

A disk of radius ``R`` is split into an axis cell (disc of radius dr/2),
annular sector cells around ring nodes ``r_j = j*dr`` (1 <= j < nr) and a
half-width rim cell at ``r = R``.  Cylinders are the tensor product of a
uniform x1 grid (half cells at the caps) with a disk grid.

With exact cell volumes ``V`` and face transmissibilities ``T`` the discrete
Laplacian is ``-V^{-1} G^T diag(T) G``; it is symmetric in the ``V``-weighted
inner product and reproduces quadratics exactly, including at the axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp


def _difference_matrix(rows, left, right, n_nodes):
    """Rows ``e_right - e_left`` for each face."""
    m = len(rows)
    data = np.concatenate([-np.ones(m), np.ones(m)])
    return sp.csr_matrix(
        (data, (np.concatenate([rows, rows]), np.concatenate([left, right]))),
        shape=(m, n_nodes),
    )


@dataclass(frozen=True)
class DiskGrid:
    center: tuple[float, float]
    radius: float
    nr: int
    ntheta: int

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.nr < 3 or self.ntheta < 4:
            raise ValueError("need nr >= 3 and ntheta >= 4")

    @property
    def dr(self) -> float:
        return self.radius / self.nr

    @property
    def dtheta(self) -> float:
        return 2 * np.pi / self.ntheta

    @property
    def n_nodes(self) -> int:
        return 1 + self.nr * self.ntheta

    def index(self, j, k):
        """Flat index of ring node (j, k); j = 0 maps to the axis."""
        j = np.asarray(j)
        k = np.asarray(k) % self.ntheta
        return np.where(j == 0, 0, 1 + (j - 1) * self.ntheta + k)

    @cached_property
    def r(self) -> np.ndarray:
        rr = np.zeros(self.n_nodes)
        rr[1:] = np.repeat(np.arange(1, self.nr + 1) * self.dr, self.ntheta)
        return rr

    @cached_property
    def theta(self) -> np.ndarray:
        th = np.zeros(self.n_nodes)
        th[1:] = np.tile(np.arange(self.ntheta) * self.dtheta, self.nr)
        return th

    @cached_property
    def xy(self) -> np.ndarray:
        """Node coordinates, shape (n_nodes, 2)."""
        cx, cy = self.center
        return np.stack(
            [cx + self.r * np.cos(self.theta), cy + self.r * np.sin(self.theta)], axis=1
        )

    @cached_property
    def volumes(self) -> np.ndarray:
        dr, dth, R = self.dr, self.dtheta, self.radius
        v = np.empty(self.n_nodes)
        v[0] = np.pi * dr**2 / 4
        v[1:] = self.r[1:] * dr * dth
        rim = self.rim
        v[rim] = 0.5 * (R**2 - (R - dr / 2) ** 2) * dth
        return v

    @cached_property
    def rim(self) -> np.ndarray:
        return self.index(self.nr, np.arange(self.ntheta))

    @cached_property
    def is_boundary(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[self.rim] = True
        return mask

    @cached_property
    def _faces(self):
        nr, nt, dr, dth = self.nr, self.ntheta, self.dr, self.dtheta
        k = np.arange(nt)
        left, right, trans = [], [], []
        # radial faces between level j and j+1
        for j in range(nr):
            left.append(self.index(np.full(nt, j), k))
            right.append(self.index(np.full(nt, j + 1), k))
            trans.append(np.full(nt, (j + 0.5) * dr * dth / dr))
        # angular faces on each ring
        for j in range(1, nr + 1):
            extent = dr if j < nr else dr / 2
            left.append(self.index(np.full(nt, j), k))
            right.append(self.index(np.full(nt, j), k + 1))
            trans.append(np.full(nt, extent / (j * dr * dth)))
        left = np.concatenate(left)
        right = np.concatenate(right)
        trans = np.concatenate(trans)
        G = _difference_matrix(np.arange(len(left)), left, right, self.n_nodes)
        return G, trans, left, right

    @property
    def gradient(self) -> sp.csr_matrix:
        return self._faces[0]

    @property
    def transmissibility(self) -> np.ndarray:
        return self._faces[1]

    @property
    def face_nodes(self) -> tuple[np.ndarray, np.ndarray]:
        return self._faces[2], self._faces[3]

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        G, T = self.gradient, self.transmissibility
        return (G.T @ sp.diags(T) @ G).tocsr()

    @cached_property
    def laplacian(self) -> sp.csr_matrix:
        return (-sp.diags(1 / self.volumes) @ self.stiffness).tocsr()

    @cached_property
    def boundary_lengths(self) -> np.ndarray:
        return np.full(self.ntheta, self.radius * self.dtheta)

    @cached_property
    def boundary_xy(self) -> np.ndarray:
        return self.xy[self.rim]

    @cached_property
    def boundary_normals(self) -> np.ndarray:
        th = self.theta[self.rim]
        return np.stack([np.cos(th), np.sin(th)], axis=1)

    def normal_derivative(self, values: np.ndarray) -> np.ndarray:
        """Second-order one-sided radial derivative at the rim, (..., n_nodes)."""
        k = np.arange(self.ntheta)
        u0 = values[..., self.index(np.full_like(k, self.nr), k)]
        u1 = values[..., self.index(np.full_like(k, self.nr - 1), k)]
        u2 = values[..., self.index(np.full_like(k, self.nr - 2), k)]
        return (3 * u0 - 4 * u1 + u2) / (2 * self.dr)

    def integrate(self, values: np.ndarray) -> complex:
        return np.sum(self.volumes * values)

    def area(self) -> float:
        return np.pi * self.radius**2

    def polar_view(self, values: np.ndarray) -> np.ndarray:
        """Reshape (..., n_nodes) to (..., nr + 1, ntheta) with the axis replicated."""
        lead = values.shape[:-1]
        out = np.empty(lead + (self.nr + 1, self.ntheta), dtype=values.dtype)
        out[..., 0, :] = values[..., :1]
        out[..., 1:, :] = values[..., 1:].reshape(lead + (self.nr, self.ntheta))
        return out


@dataclass(frozen=True)
class CylinderGrid:
    """Tensor grid on ``[a1, b1] x disk``; values are stored as (n1 + 1, disk nodes)."""

    a1: float
    b1: float
    n1: int
    disk: DiskGrid

    def __post_init__(self):
        if not self.a1 < self.b1:
            raise ValueError("need a1 < b1")
        if self.n1 < 3:
            raise ValueError("need n1 >= 3")

    @property
    def dx1(self) -> float:
        return (self.b1 - self.a1) / self.n1

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n1 + 1, self.disk.n_nodes)

    @property
    def size(self) -> int:
        return (self.n1 + 1) * self.disk.n_nodes

    @cached_property
    def x1(self) -> np.ndarray:
        return self.a1 + self.dx1 * np.arange(self.n1 + 1)

    @cached_property
    def x1_weights(self) -> np.ndarray:
        w = np.full(self.n1 + 1, self.dx1)
        w[[0, -1]] = self.dx1 / 2
        return w

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Broadcast coordinate arrays (x1, x2, x3), each of ``shape``."""
        X1 = np.repeat(self.x1[:, None], self.disk.n_nodes, axis=1)
        X2 = np.repeat(self.disk.xy[None, :, 0], self.n1 + 1, axis=0)
        X3 = np.repeat(self.disk.xy[None, :, 1], self.n1 + 1, axis=0)
        return X1, X2, X3

    @cached_property
    def volumes(self) -> np.ndarray:
        return np.outer(self.x1_weights, self.disk.volumes)

    @cached_property
    def is_boundary(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[[0, -1], :] = True
        mask[:, self.disk.rim] = True
        return mask

    @cached_property
    def _gradient_parts(self):
        n = self.n1 + 1
        faces = np.arange(self.n1)
        G1 = _difference_matrix(faces, faces, faces + 1, n)
        T1 = np.full(self.n1, 1 / self.dx1)
        I2 = sp.identity(self.disk.n_nodes, format="csr")
        I1 = sp.identity(n, format="csr")
        Gx = sp.kron(G1, I2, format="csr")
        Tx = np.kron(T1, self.disk.volumes)
        Gp = sp.kron(I1, self.disk.gradient, format="csr")
        Tp = np.kron(self.x1_weights, self.disk.transmissibility)
        return Gx, Tx, Gp, Tp

    @cached_property
    def gradient(self) -> sp.csr_matrix:
        Gx, _, Gp, _ = self._gradient_parts
        return sp.vstack([Gx, Gp], format="csr")

    @cached_property
    def transmissibility(self) -> np.ndarray:
        _, Tx, _, Tp = self._gradient_parts
        return np.concatenate([Tx, Tp])

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        n = self.n1 + 1
        faces = np.arange(self.n1)
        G1 = _difference_matrix(faces, faces, faces + 1, n)
        K1 = (G1.T @ sp.diags(np.full(self.n1, 1 / self.dx1)) @ G1).tocsr()
        return (
            sp.kron(K1, sp.diags(self.disk.volumes))
            + sp.kron(sp.diags(self.x1_weights), self.disk.stiffness)
        ).tocsr()

    @cached_property
    def laplacian(self) -> sp.csr_matrix:
        return (-sp.diags(1 / self.volumes.ravel()) @ self.stiffness).tocsr()

    def weighted_stiffness(self, coef: np.ndarray) -> sp.csr_matrix:
        """Stiffness of ``-div(coef grad)`` with arithmetic face averages of ``coef``."""
        G = self.gradient
        c = np.asarray(coef).ravel()
        face_coef = 0.5 * np.abs(G) @ c
        return (G.T @ sp.diags(self.transmissibility * face_coef) @ G).tocsr()

    def integrate(self, values: np.ndarray) -> complex:
        return np.sum(self.volumes * values)

    def volume(self) -> float:
        return (self.b1 - self.a1) * self.disk.area()

    def lateral_area(self) -> float:
        return 2 * np.pi * self.disk.radius * (self.b1 - self.a1)

    def boundary_area(self) -> float:
        return 2 * self.disk.area() + self.lateral_area()
