"""Solver-agnostic convex QP / LP layer.

Every optimization in the package goes through :func:`solve_qp` or
:func:`solve_lp`. A QP is stated as::

    minimize    0.5 z'Pz + q'z + r0
    subject to  Aeq z == beq
                Ain z <= bin

Two QP backends are bundled:

``quadprog``
    Dense Goldfarb-Idnani active-set method. Very fast for the small,
    strictly convex problems produced by the ADMM local steps. Equality
    constraints are eliminated through an orthonormal null-space basis
    first, so only the reduced Hessian needs to be positive definite.
``clarabel``
    Interior-point conic solver. Handles PSD Hessians and returns
    infeasibility / unboundedness certificates.

``auto`` (the default) tries ``quadprog`` whenever the reduced Hessian is
positive definite and falls back to ``clarabel`` otherwise, or whenever the
active-set result fails the feasibility post-check. LPs use HiGHS through
:func:`scipy.optimize.linprog`.
"""

from __future__ import annotations

import enum
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import linprog

__all__ = [
    "QpStatus",
    "QpSpec",
    "QpSolution",
    "SolverSettings",
    "SolverError",
    "default_settings",
    "solve_qp",
    "solve_lp",
    "kkt_residual",
]

SOLVER_ENV_VAR = "PWADMPC_SOLVER"


class QpStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITER = "max_iter"
    NUMERICAL_FAILURE = "numerical_failure"


class SolverError(RuntimeError):
    """Raised when a backend fails in a way the caller cannot interpret."""


@dataclass(frozen=True)
class SolverSettings:
    backend: str = "auto"
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    max_iter: int = 200
    # re-check active-set infeasibility claims with the conic backend
    confirm_infeasible: bool = True


def default_settings(fallback: str = "auto") -> SolverSettings:
    """Settings with the backend optionally overridden by ``PWADMPC_SOLVER``.

    ``fallback`` is the backend used when the variable is unset.
    """
    backend = os.environ.get(SOLVER_ENV_VAR, fallback).strip().lower() or fallback
    if backend not in _BACKENDS and backend != "auto":
        raise ValueError(f"{SOLVER_ENV_VAR}={backend!r} is not a known backend")
    return SolverSettings(backend=backend)


@dataclass
class QpSpec:
    """Standard-form convex QP.

    ``layout`` maps block names to slices of the decision vector; it is
    optional but, when given, its blocks must be disjoint and cover ``z``.
    """

    P: np.ndarray
    q: np.ndarray
    r0: float = 0.0
    Aeq: np.ndarray | None = None
    beq: np.ndarray | None = None
    Ain: np.ndarray | None = None
    bin: np.ndarray | None = None
    layout: dict[str, slice] = field(default_factory=dict)

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        n = self.q.size
        if self.P.shape != (n, n):
            raise ValueError(f"P has shape {self.P.shape}, expected {(n, n)}")
        if not np.allclose(self.P, self.P.T, atol=1e-12, rtol=0.0):
            raise ValueError("P must be symmetric")
        self.Aeq, self.beq = _rows(self.Aeq, self.beq, n, "equality")
        self.Ain, self.bin = _rows(self.Ain, self.bin, n, "inequality")
        for arr in (self.P, self.q, self.Aeq, self.beq, self.Ain, self.bin):
            if not np.all(np.isfinite(arr)):
                raise ValueError("QP data must be finite")
        if self.layout:
            covered = np.zeros(n, dtype=int)
            for name, sl in self.layout.items():
                covered[sl] += 1
            if np.any(covered != 1):
                raise ValueError("layout blocks must be disjoint and cover the decision vector")

    @property
    def n(self) -> int:
        return self.q.size

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.P @ z + self.q @ z + self.r0)

    def block(self, z: np.ndarray, name: str) -> np.ndarray:
        return z[self.layout[name]]


@dataclass
class QpSolution:
    z: np.ndarray | None
    objective: float
    status: QpStatus
    y_eq: np.ndarray | None = None
    y_in: np.ndarray | None = None
    solver_stats: dict[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def _rows(A, b, n, what):
    if A is None or (hasattr(A, "size") and np.size(A) == 0):
        if b is not None and np.size(b) != 0:
            raise ValueError(f"{what} offsets given without a matrix")
        return np.zeros((0, n)), np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    if A.shape[1] != n or A.shape[0] != b.size:
        raise ValueError(f"{what} constraint dimensions {A.shape}/{b.shape} do not match n={n}")
    return A, b


def primal_residual(spec: QpSpec, z: np.ndarray) -> float:
    r = 0.0
    if spec.Aeq.shape[0]:
        r = max(r, float(np.max(np.abs(spec.Aeq @ z - spec.beq))))
    if spec.Ain.shape[0]:
        r = max(r, float(np.max(spec.Ain @ z - spec.bin, initial=0.0)))
    return r


def kkt_residual(spec: QpSpec, sol: QpSolution) -> float:
    """Infinity norm of ``Pz + q + Aeq'nu + Ain'mu`` at a returned solution."""
    if sol.z is None or sol.y_eq is None or sol.y_in is None:
        raise ValueError("solution carries no multipliers")
    g = spec.P @ sol.z + spec.q + spec.Aeq.T @ sol.y_eq + spec.Ain.T @ sol.y_in
    return float(np.max(np.abs(g), initial=0.0))


# --------------------------------------------------------------------- backends


def _solve_clarabel(spec: QpSpec, settings: SolverSettings) -> QpSolution:
    import clarabel

    me, mi = spec.Aeq.shape[0], spec.Ain.shape[0]
    A = sp.csc_matrix(np.vstack([spec.Aeq, spec.Ain]))
    b = np.concatenate([spec.beq, spec.bin])
    cones = []
    if me:
        cones.append(clarabel.ZeroConeT(me))
    if mi:
        cones.append(clarabel.NonnegativeConeT(mi))
    if not cones:
        # clarabel needs at least one cone; add a vacuous inequality
        A = sp.csc_matrix(np.zeros((1, spec.n)))
        b = np.ones(1)
        cones = [clarabel.NonnegativeConeT(1)]
    P = sp.csc_matrix(np.triu(spec.P))
    for equilibrate in (True, False):
        s = clarabel.DefaultSettings()
        s.verbose = False
        s.tol_feas = settings.feas_tol
        s.tol_gap_abs = settings.gap_tol
        s.tol_gap_rel = settings.gap_tol
        s.max_iter = settings.max_iter
        s.equilibrate_enable = equilibrate
        res = clarabel.DefaultSolver(P, spec.q, A, b, cones, s).solve()
        status = str(res.status)
        # the scaled iteration occasionally cycles on tiny well-posed problems;
        # one unscaled retry settles them
        if status not in ("MaxIterations", "NumericalError", "InsufficientProgress"):
            break
    stats = {"backend": "clarabel", "raw_status": status, "iterations": res.iterations,
             "equilibrated": equilibrate}
    if status in ("Solved", "AlmostSolved"):
        z = np.asarray(res.x, dtype=float)
        y = np.asarray(res.z, dtype=float)
        if me + mi == 0:
            y = np.zeros(0)
        return QpSolution(z, spec.objective(z), QpStatus.OPTIMAL, y[:me], y[me : me + mi], stats)
    if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return QpSolution(None, np.inf, QpStatus.INFEASIBLE, solver_stats=stats)
    if status in ("DualInfeasible", "AlmostDualInfeasible"):
        return QpSolution(None, -np.inf, QpStatus.UNBOUNDED, solver_stats=stats)
    if status in ("MaxIterations", "MaxTime"):
        return QpSolution(None, np.nan, QpStatus.MAX_ITER, solver_stats=stats)
    return QpSolution(None, np.nan, QpStatus.NUMERICAL_FAILURE, solver_stats=stats)


_REDUCTION_CACHE: "OrderedDict[bytes, tuple]" = OrderedDict()
_REDUCTION_CACHE_SIZE = 512


def _reduce_equalities(spec: QpSpec, tol: float):
    """Return (z0, Nbasis) with {z | Aeq z = beq} = z0 + range(Nbasis), or None if inconsistent.

    Results are memoized on the raw bytes of (Aeq, beq): the ADMM local
    problems reuse the same dynamics equalities for many iterations.
    """
    n = spec.n
    if spec.Aeq.shape[0] == 0:
        return np.zeros(n), np.eye(n)
    key = spec.Aeq.shape[0].to_bytes(4, "little") + spec.Aeq.tobytes() + spec.beq.tobytes()
    hit = _REDUCTION_CACHE.get(key)
    if hit is not None:
        _REDUCTION_CACHE.move_to_end(key)
        return hit
    z0, *_ = np.linalg.lstsq(spec.Aeq, spec.beq, rcond=None)
    scale = 1.0 + float(np.max(np.abs(spec.beq), initial=0.0))
    if np.max(np.abs(spec.Aeq @ z0 - spec.beq)) > tol * scale:
        out = None
    else:
        out = (z0, sla.null_space(spec.Aeq))
    _REDUCTION_CACHE[key] = out
    if len(_REDUCTION_CACHE) > _REDUCTION_CACHE_SIZE:
        _REDUCTION_CACHE.popitem(last=False)
    return out


def _solve_quadprog(spec: QpSpec, settings: SolverSettings) -> QpSolution | None:
    """Active-set path. Returns None when the problem is outside its remit."""
    import quadprog

    red = _reduce_equalities(spec, 1e-9)
    stats: dict[str, Any] = {"backend": "quadprog"}
    if red is None:
        return QpSolution(None, np.inf, QpStatus.INFEASIBLE, solver_stats=stats)
    z0, Nb = red
    k = Nb.shape[1]
    A_r = spec.Ain @ Nb
    b_r = spec.bin - spec.Ain @ z0
    if k == 0:
        z = z0
        if spec.Ain.shape[0] and np.max(spec.Ain @ z - spec.bin) > settings.feas_tol:
            return QpSolution(None, np.inf, QpStatus.INFEASIBLE, solver_stats=stats)
        return _with_multipliers(spec, z, np.zeros(spec.Ain.shape[0]), stats)
    G = Nb.T @ spec.P @ Nb
    G = 0.5 * (G + G.T)
    try:
        np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        return None
    if np.min(np.linalg.eigvalsh(G)) < 1e-10 * max(1.0, np.max(np.abs(G))):
        return None
    a = -(Nb.T @ (spec.P @ z0 + spec.q))
    row_norm = np.linalg.norm(A_r, axis=1) if A_r.size else np.zeros(0)
    keep = row_norm > 1e-12
    if np.any(~keep) and np.any(b_r[~keep] < -settings.feas_tol):
        return QpSolution(None, np.inf, QpStatus.INFEASIBLE, solver_stats=stats)
    try:
        if np.any(keep):
            out = quadprog.solve_qp(G, a, -A_r[keep].T, -b_r[keep], 0)
        else:
            out = quadprog.solve_qp(G, a)
    except ValueError as exc:
        if "inconsistent" in str(exc):
            stats["raw_status"] = "inconsistent"
            return QpSolution(None, np.inf, QpStatus.INFEASIBLE, solver_stats=stats)
        return None
    w = out[0]
    mu = np.zeros(spec.Ain.shape[0])
    if np.any(keep):
        mu[keep] = out[4]
    z = z0 + Nb @ w
    if primal_residual(spec, z) > max(settings.feas_tol, 1e-9) * (1.0 + np.max(np.abs(z), initial=0.0)):
        return None
    stats["iterations"] = int(out[3][0])
    return _with_multipliers(spec, z, mu, stats)


def _with_multipliers(spec, z, mu, stats):
    g = spec.P @ z + spec.q + spec.Ain.T @ mu
    if spec.Aeq.shape[0]:
        nu, *_ = np.linalg.lstsq(spec.Aeq.T, -g, rcond=None)
    else:
        nu = np.zeros(0)
    return QpSolution(z, spec.objective(z), QpStatus.OPTIMAL, nu, mu, stats)


_BACKENDS = {"clarabel": _solve_clarabel, "quadprog": _solve_quadprog}


def solve_qp(spec: QpSpec, settings: SolverSettings | None = None) -> QpSolution:
    """Solve a convex QP with the configured backend.

    Parameters
    ----------
    spec : QpSpec
        Problem data.
    settings : SolverSettings, optional
        Backend choice and tolerances; defaults to :func:`default_settings`.

    Returns
    -------
    QpSolution
        ``status`` is one of :class:`QpStatus`. Only ``OPTIMAL`` carries a
        solution vector.
    """
    settings = settings or default_settings()
    backend = settings.backend
    if backend == "clarabel":
        return _solve_clarabel(spec, settings)
    if backend not in ("auto", "quadprog"):
        raise ValueError(f"unknown QP backend {backend!r}")
    sol = _solve_quadprog(spec, settings)
    if sol is None:
        if backend == "quadprog":
            return QpSolution(None, np.nan, QpStatus.NUMERICAL_FAILURE,
                              solver_stats={"backend": "quadprog", "raw_status": "unsupported"})
        return _solve_clarabel(spec, settings)
    if sol.status is QpStatus.INFEASIBLE and backend == "auto" and settings.confirm_infeasible:
        confirmed = _solve_clarabel(spec, settings)
        if confirmed.status is not QpStatus.INFEASIBLE:
            return confirmed
    return sol


@dataclass
class LpSolution:
    x: np.ndarray | None
    objective: float
    status: QpStatus


LP_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


def solve_lp(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, bounds=None) -> LpSolution:
    """Minimize ``c'x`` subject to linear constraints (HiGHS).

    Variables are free unless ``bounds`` says otherwise. Unbounded and
    infeasible outcomes are reported through ``status``, never raised.
    """
    c = np.asarray(c, dtype=float).reshape(-1)
    if bounds is None:
        bounds = [(None, None)] * c.size
    kw = {}
    if A_ub is not None and np.size(A_ub):
        kw["A_ub"], kw["b_ub"] = np.atleast_2d(A_ub), np.asarray(b_ub, dtype=float).reshape(-1)
    if A_eq is not None and np.size(A_eq):
        kw["A_eq"], kw["b_eq"] = np.atleast_2d(A_eq), np.asarray(b_eq, dtype=float).reshape(-1)
    # HiGHS defaults to 1e-7 feasibility, coarser than the geometric tolerance
    res = linprog(c, bounds=bounds, method="highs", options=LP_OPTIONS, **kw)
    if res.status == 0:
        return LpSolution(np.asarray(res.x), float(res.fun), QpStatus.OPTIMAL)
    if res.status == 2:
        return LpSolution(None, np.inf, QpStatus.INFEASIBLE)
    if res.status == 3:
        return LpSolution(None, -np.inf, QpStatus.UNBOUNDED)
    if res.status == 1:
        return LpSolution(None, np.nan, QpStatus.MAX_ITER)
    raise SolverError(f"LP backend failed: {res.message}")
