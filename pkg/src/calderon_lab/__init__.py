"""Numerical laboratory for the partial-data Calderon problem on cylinders.

Modules: geometry (domains, Carleman weights, boundary partitions), pde
(forward solves and Cauchy data), carleman (weighted estimates and the
conjugated solver), cgo (complex geometrical optics solutions), transforms
(attenuated X-ray, broken-ray and Segal-Bargmann transforms), reconstruct
(vanishing checks and inversion on the reachable set), linearized (the
linearized-data classifier) and cli (batch experiments).
"""

__version__ = "0.1.0"
