"""Compactly supported analytic test functions with declared supports."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class Phantom2D:
    """``func(x2, x3)`` vanishing outside the disk ``|x' - center| <= radius``."""

    func: Callable
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 1.0

    def __call__(self, x2, x3):
        x2, x3 = np.broadcast_arrays(np.asarray(x2, float), np.asarray(x3, float))
        inside = np.hypot(x2 - self.center[0], x3 - self.center[1]) <= self.radius
        return np.where(inside, self.func(x2, x3), 0.0)


@dataclass(frozen=True)
class Phantom3D:
    """``func(x1, x2, x3)`` vanishing outside ``x1_range x disk(center, radius)``."""

    func: Callable
    x1_range: tuple[float, float] = (-1.0, 1.0)
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 1.0
    zero_extended: bool = True

    def __call__(self, x1, x2, x3):
        x1, x2, x3 = np.broadcast_arrays(*(np.asarray(a, float) for a in (x1, x2, x3)))
        inside = (
            (x1 >= self.x1_range[0])
            & (x1 <= self.x1_range[1])
            & (np.hypot(x2 - self.center[0], x3 - self.center[1]) <= self.radius)
        )
        return np.where(inside, self.func(x1, x2, x3), 0.0)

    @property
    def support_disk(self):
        return self.center, self.radius


def smooth_bump(t):
    """``exp(-1/(1-t^2))`` on |t| < 1, zero outside."""
    t = np.asarray(t, dtype=float)
    inside = np.abs(t) < 1
    ts = np.where(inside, t, 0.0)
    return np.where(inside, np.exp(-1 / (1 - ts * ts)), 0.0)


def bump2d(center, width, amplitude=1.0) -> Phantom2D:
    c = np.asarray(center, dtype=float)

    def f(x2, x3):
        return amplitude * smooth_bump(np.hypot(x2 - c[0], x3 - c[1]) / width)

    return Phantom2D(f, (float(c[0]), float(c[1])), float(width))


def separable(g1: Callable, h2: Phantom2D, x1_range) -> Phantom3D:
    """``g1(x1) * h2(x')`` supported in ``x1_range x supp h2``."""

    def f(x1, x2, x3):
        return g1(x1) * h2.func(x2, x3)

    return Phantom3D(f, tuple(map(float, x1_range)), h2.center, h2.radius)


def gaussian_profile(center, width):
    return lambda t: np.exp(-((np.asarray(t) - center) ** 2) / (2 * width**2))


def support_params(f):
    """(x1_range, center, radius) of a 3D phantom or a zero-extended potential."""
    if hasattr(f, "grid"):
        g = f.grid
        if not getattr(f, "zero_extended", False):
            raise ValueError("the potential must be flagged as zero-extended")
        return (g.a1, g.b1), g.disk.center, g.disk.radius
    return f.x1_range, f.center, f.radius


def evaluator(f):
    """Pointwise callable ``(x1, x2, x3) -> values`` for phantoms and potentials."""
    if hasattr(f, "as_callable"):
        return f.as_callable()
    return f


def grid_step(f):
    """Half the finest grid spacing for gridded inputs, None for analytic ones."""
    if hasattr(f, "grid"):
        g = f.grid
        return 0.5 * min(g.dx1, g.disk.dr, g.disk.dr * g.disk.dtheta)
    return None
