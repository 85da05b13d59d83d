"""Distributed MPC for networks of coupled piecewise-affine subsystems.

The controller solves the nonconvex finite-horizon problem with a consensus
ADMM scheme in which each agent locally switches between convex pieces of
its feasible set. The package also ships polytope algebra, terminal-set
computation, Lyapunov checks and an exhaustive global oracle.
"""

__version__ = "0.1.0"
