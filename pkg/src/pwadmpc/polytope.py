"""Halfspace polytopes {x | Hx <= h} and the set algebra built on them.

All LP-based queries go through :func:`pwadmpc.qpcore.solve_lp`. Vertex
based operations (Minkowski sums, linear images) enumerate vertices by
brute force over facet combinations and are limited to ambient dimension
``MAX_VERTEX_DIM``; that is plenty for the 2-D subsystems this package
targets and keeps degenerate (flat) sets exact.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .qpcore import QpStatus, SolverError, solve_lp

__all__ = [
    "DEFAULT_TOL",
    "MAX_VERTEX_DIM",
    "PolytopeError",
    "EmptySetError",
    "UnboundedError",
    "UnsupportedDimensionError",
    "HPolytope",
    "box",
    "contains",
    "is_empty",
    "support",
    "pontryagin_diff",
    "minkowski_sum",
    "linear_preimage",
    "linear_image",
    "intersect",
    "is_subset",
    "set_equal",
    "remove_redundant",
    "vertices",
    "hull",
    "chebyshev_center",
    "sample_points",
]

DEFAULT_TOL = 1e-9
MAX_VERTEX_DIM = 3
ZERO_ROW_NORM = 1e-12


class PolytopeError(ValueError):
    pass


class EmptySetError(PolytopeError):
    pass


class UnboundedError(PolytopeError):
    pass


class UnsupportedDimensionError(PolytopeError):
    pass


@dataclass(frozen=True, eq=False)
class HPolytope:
    """Convex polytope in halfspace form ``{x | H x <= h}``.

    The set may be empty or even unbounded; use :func:`is_empty` and
    :func:`support` to find out. Instances are treated as immutable.
    """

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        h = np.asarray(self.h, dtype=float).reshape(-1)
        if H.ndim == 1:
            H = H.reshape(1, -1) if h.size == 1 else H.reshape(h.size, -1)
        if H.ndim != 2 or H.shape[0] != h.size:
            raise ValueError(f"H has shape {H.shape} but h has {h.size} entries")
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(h))):
            raise ValueError("polytope data must be finite")
        H.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def n_facets(self) -> int:
        return self.H.shape[0]

    @classmethod
    def universe(cls, dim: int) -> "HPolytope":
        return cls(np.zeros((0, dim)), np.zeros(0))

    @classmethod
    def empty(cls, dim: int) -> "HPolytope":
        # canonical infeasible system 0'x <= -1
        return cls(np.zeros((1, dim)), -np.ones(1))

    @classmethod
    def point(cls, p) -> "HPolytope":
        p = np.asarray(p, dtype=float).reshape(-1)
        return box(p, p)

    def __contains__(self, x) -> bool:
        return contains(self, x)

    def __repr__(self) -> str:
        return f"HPolytope(dim={self.dim}, facets={self.n_facets})"

    def to_dict(self) -> dict:
        return {"H": self.H.tolist(), "h": self.h.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "HPolytope":
        if "lo" in data or "hi" in data:
            return box(data["lo"], data["hi"])
        if "H" not in data or "h" not in data:
            raise ValueError("polytope JSON needs either H/h or lo/hi")
        H = np.asarray(data["H"], dtype=float)
        h = np.asarray(data["h"], dtype=float)
        if H.size == 0:
            dim = int(data.get("dim", 0))
            return cls(np.zeros((0, dim)), np.zeros(0))
        return cls(H, h)


def box(lo, hi) -> HPolytope:
    lo = np.asarray(lo, dtype=float).reshape(-1)
    hi = np.asarray(hi, dtype=float).reshape(-1)
    if lo.shape != hi.shape:
        raise ValueError("lo and hi must have the same length")
    if np.any(lo > hi):
        raise ValueError("box needs lo <= hi componentwise")
    n = lo.size
    return HPolytope(np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([hi, -lo]))


def _check_dims(P: HPolytope, Q: HPolytope):
    if P.dim != Q.dim:
        raise ValueError(f"dimension mismatch: {P.dim} vs {Q.dim}")


def contains(P: HPolytope, x, tol: float = DEFAULT_TOL) -> bool:
    """Closure membership ``Hx <= h + tol``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != P.dim:
        raise ValueError(f"point has dimension {x.size}, polytope {P.dim}")
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    if P.n_facets == 0:
        return True
    return bool(np.all(P.H @ x <= P.h + tol))


def contains_many(P: HPolytope, X: np.ndarray, tol: float = DEFAULT_TOL) -> np.ndarray:
    X = np.atleast_2d(X)
    if P.n_facets == 0:
        return np.ones(X.shape[0], dtype=bool)
    return np.all(X @ P.H.T <= P.h + tol, axis=1)


def _normalized(P: HPolytope):
    # rows this short carry no direction worth trusting; they act as 0'x <= h
    norms = np.linalg.norm(P.H, axis=1)
    nz = norms > ZERO_ROW_NORM
    return P.H[nz] / norms[nz, None], P.h[nz] / norms[nz], P.h[~nz]


def _max_slack(P: HPolytope):
    """Largest ``t <= 1`` with a point whose normalized slack is at least ``t`` on every facet."""
    Hn, hn, h_zero = _normalized(P)
    if np.any(h_zero < -DEFAULT_TOL):
        return -np.inf, None
    n = P.dim
    if Hn.shape[0] == 0:
        return 1.0, np.zeros(n)
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A = np.hstack([Hn, np.ones((Hn.shape[0], 1))])
    bounds = [(None, None)] * n + [(None, 1.0)]
    res = solve_lp(c, A, hn, bounds=bounds)
    if res.status is not QpStatus.OPTIMAL:
        raise SolverError(f"emptiness LP ended with status {res.status.value}")
    return -res.objective, res.x[:n]


def is_empty(P: HPolytope, tol: float = DEFAULT_TOL) -> bool:
    """True iff no point satisfies ``Hx <= h`` (within ``tol`` on normalized rows)."""
    t, _ = _max_slack(P)
    return bool(t < -tol)


def chebyshev_center(P: HPolytope) -> tuple[np.ndarray, float]:
    """Center and radius of the largest inscribed ball (radius capped at 1)."""
    t, x = _max_slack(P)
    if x is None or t < -DEFAULT_TOL:
        raise EmptySetError("polytope is empty")
    return x, t


def support(P: HPolytope, d) -> float:
    """Support function ``max_{x in P} d'x``."""
    d = np.asarray(d, dtype=float).reshape(-1)
    if d.size != P.dim:
        raise ValueError("direction has wrong dimension")
    res = solve_lp(-d, P.H, P.h)
    if res.status is QpStatus.INFEASIBLE and not is_empty(P):
        # empty by less than the emptiness tolerance: evaluate on the relaxed set
        slack = DEFAULT_TOL * np.linalg.norm(P.H, axis=1)
        res = solve_lp(-d, P.H, P.h + slack)
    if res.status is QpStatus.OPTIMAL:
        return -res.objective
    if res.status is QpStatus.INFEASIBLE:
        raise EmptySetError("support of an empty polytope")
    if res.status is QpStatus.UNBOUNDED:
        raise UnboundedError(f"polytope unbounded in direction {d}")
    raise SolverError(f"support LP ended with status {res.status.value}")


def pontryagin_diff(P: HPolytope, W: HPolytope) -> HPolytope:
    """Erosion ``P - W = {x | x + w in P for all w in W}``."""
    _check_dims(P, W)
    if is_empty(W):
        raise EmptySetError("cannot erode by an empty set")
    sigma = np.array([support(W, row) for row in P.H])
    return HPolytope(P.H.copy(), P.h - sigma)


def linear_preimage(P: HPolytope, A) -> HPolytope:
    """``{x | A x in P}``; exact and valid for singular ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != P.dim:
        raise ValueError(f"map has {A.shape[0]} outputs, polytope lives in R^{P.dim}")
    return HPolytope(P.H @ A, P.h.copy())


def intersect(P: HPolytope, Q: HPolytope, prune: bool = False) -> HPolytope:
    _check_dims(P, Q)
    R = HPolytope(np.vstack([P.H, Q.H]), np.concatenate([P.h, Q.h]))
    return remove_redundant(R) if prune else R


def is_subset(P: HPolytope, Q: HPolytope, tol: float = DEFAULT_TOL) -> bool:
    """``P subseteq Q`` checked facet by facet with one LP per facet of ``Q``."""
    _check_dims(P, Q)
    if is_empty(P):
        return True
    for row, off in zip(Q.H, Q.h):
        norm = np.linalg.norm(row)
        if norm == 0:
            if off < -tol:
                return False
            continue
        try:
            s = support(P, row)
        except UnboundedError:
            return False
        if s > off + tol * norm:
            return False
    return True


def set_equal(P: HPolytope, Q: HPolytope, tol: float = DEFAULT_TOL) -> bool:
    return is_subset(P, Q, tol) and is_subset(Q, P, tol)


def remove_redundant(P: HPolytope, tol: float = DEFAULT_TOL) -> HPolytope:
    """Drop facets implied by the others (one LP per facet).

    An empty polytope is returned in its canonical infeasible form.
    """
    if is_empty(P):
        return HPolytope.empty(P.dim)
    Hn, hn, _ = _normalized(P)
    # exact duplicates first
    key = np.round(np.hstack([Hn, hn[:, None]]), 12)
    _, first = np.unique(key, axis=0, return_index=True)
    Hn, hn = Hn[np.sort(first)], hn[np.sort(first)]
    keep = np.ones(Hn.shape[0], dtype=bool)
    for k in range(Hn.shape[0]):
        others = keep.copy()
        others[k] = False
        relaxed_h = hn.copy()
        relaxed_h[k] += 1.0
        mask = others.copy()
        mask[k] = True
        res = solve_lp(-Hn[k], Hn[mask], relaxed_h[mask])
        if res.status is QpStatus.OPTIMAL and -res.objective <= hn[k] + tol:
            keep[k] = False
    return HPolytope(Hn[keep], hn[keep])


def _bounded_or_raise(P: HPolytope):
    for k in range(P.dim):
        e = np.zeros(P.dim)
        e[k] = 1.0
        support(P, e)
        support(P, -e)


def vertices(P: HPolytope, tol: float = 1e-9) -> np.ndarray:
    """Vertex list of a bounded polytope by facet-combination enumeration.

    Returns an array of shape ``(n_vertices, dim)``; empty sets give zero rows.
    """
    n = P.dim
    if n > MAX_VERTEX_DIM:
        raise UnsupportedDimensionError(f"vertex enumeration limited to dim <= {MAX_VERTEX_DIM}")
    if is_empty(P):
        return np.zeros((0, n))
    _bounded_or_raise(P)
    Hn, hn, _ = _normalized(P)
    pts = []
    # a set that is empty by less than the emptiness tolerance still counts as
    # nonempty; its vertices are those of the slightly relaxed set
    for relax in (0.0, DEFAULT_TOL):
        hr = hn + relax
        for rows in itertools.combinations(range(Hn.shape[0]), n):
            M = Hn[list(rows)]
            if abs(np.linalg.det(M)) < 1e-12:
                continue
            x = np.linalg.solve(M, hr[list(rows)])
            if np.all(Hn @ x <= hr + tol * (1.0 + np.abs(hr))):
                pts.append(x)
        if pts:
            break
    if not pts:
        # a bounded nonempty set always has a vertex; only reachable through round-off
        raise SolverError("vertex enumeration found no vertex")
    pts = np.array(pts)
    scale = 1.0 + np.max(np.abs(pts))
    _, idx = np.unique(np.round(pts / scale, 9), axis=0, return_index=True)
    return _extreme_points(pts[np.sort(idx)], tol * scale)


def _extreme_points(pts: np.ndarray, tol: float) -> np.ndarray:
    """Drop candidates that are not extreme, working in the affine hull of ``pts``."""
    if len(pts) <= 2:
        return pts
    center = pts.mean(axis=0)
    _, s, Vt = np.linalg.svd(pts - center)
    r = int(np.sum(s > tol * max(1.0, s[0] if s.size else 0.0)))
    if r == 0:
        return pts[:1]
    Y = (pts - center) @ Vt[:r].T
    if r == 1:
        return pts[np.sort([int(np.argmin(Y[:, 0])), int(np.argmax(Y[:, 0]))])]
    try:
        keep = ConvexHull(Y).vertices
    except QhullError:  # precision trouble: keep the candidates
        return pts
    return pts[np.sort(keep)]


def hull(points, dim: int | None = None) -> HPolytope:
    """Halfspace form of the convex hull of finitely many points (any affine dimension)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        if dim is None:
            raise ValueError("dim is required for an empty point set")
        return HPolytope.empty(dim)
    n = pts.shape[1]
    if n > MAX_VERTEX_DIM:
        raise UnsupportedDimensionError(f"hull limited to dim <= {MAX_VERTEX_DIM}")
    center = pts.mean(axis=0)
    centered = pts - center
    scale = 1.0 + np.max(np.abs(pts))
    _, s, Vt = np.linalg.svd(centered, full_matrices=True)
    r = int(np.sum(s > 1e-10 * scale))
    U, Vc = Vt[:r].T, Vt[r:].T
    H_parts, h_parts = [], []
    if Vc.shape[1]:
        # flat set: pin the orthogonal complement
        H_parts += [Vc.T, -Vc.T]
        off = Vc.T @ center
        h_parts += [off, -off]
    if r == 1:
        y = centered @ U[:, 0]
        H_parts += [U.T, -U.T]
        h_parts += [np.array([y.max() + U[:, 0] @ center]), np.array([-(y.min() + U[:, 0] @ center)])]
    elif r >= 2:
        y = centered @ U
        eq = ConvexHull(y).equations
        Hy, hy = eq[:, :-1], -eq[:, -1]
        H_parts.append(Hy @ U.T)
        h_parts.append(hy + Hy @ U.T @ center)
    return HPolytope(np.vstack(H_parts), np.concatenate(h_parts))


def minkowski_sum(P: HPolytope, Q: HPolytope) -> HPolytope:
    """``P + Q`` via pairwise vertex sums (bounded operands, dim <= 3)."""
    _check_dims(P, Q)
    if P.dim > MAX_VERTEX_DIM:
        raise UnsupportedDimensionError(f"Minkowski sum limited to dim <= {MAX_VERTEX_DIM}")
    VP, VQ = vertices(P), vertices(Q)
    if len(VP) == 0 or len(VQ) == 0:
        return HPolytope.empty(P.dim)
    sums = (VP[:, None, :] + VQ[None, :, :]).reshape(-1, P.dim)
    return hull(sums)


def linear_image(P: HPolytope, A) -> HPolytope:
    """``{A x | x in P}`` for bounded ``P``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[1] != P.dim:
        raise ValueError("map input dimension does not match the polytope")
    V = vertices(P)
    if len(V) == 0:
        return HPolytope.empty(A.shape[0])
    return hull(V @ A.T)


def _ray_lengths(P: HPolytope, c: np.ndarray, D: np.ndarray) -> np.ndarray:
    HD = D @ P.H.T
    slack = P.h - P.H @ c
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(HD > 1e-14, slack / HD, np.inf)
    t = ratios.min(axis=1)
    if np.any(~np.isfinite(t)):
        raise UnboundedError("cannot sample an unbounded polytope")
    return np.maximum(t, 0.0)


def sample_points(P: HPolytope, n: int, rng: np.random.Generator,
                  boundary_fraction: float = 0.0) -> np.ndarray:
    """Random points of ``P``.

    Points are shot along uniformly random rays from the Chebyshev center;
    a ``boundary_fraction`` of them land exactly on the boundary and the
    rest uniformly along the ray. Vertices (dim <= 3) are always included
    when ``boundary_fraction > 0``.
    """
    c, _ = chebyshev_center(P)
    D = rng.normal(size=(n, P.dim))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    t = _ray_lengths(P, c, D)
    s = rng.uniform(size=n)
    on_boundary = rng.uniform(size=n) < boundary_fraction
    s[on_boundary] = 1.0
    pts = c + (t * s)[:, None] * D
    if boundary_fraction > 0 and P.dim <= MAX_VERTEX_DIM:
        pts = np.vstack([vertices(P), pts])[:n] if n > 0 else pts
    return pts
