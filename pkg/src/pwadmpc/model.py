"""Network of coupled piecewise-affine subsystems.

Subsystem ``i`` evolves as

    x_i+ = A_i^l x_i + B_i^l u_i + c_i^l + sum_{j in N_i} A_ij^l x_j

where ``l`` is the region of the partition of ``X_i`` that contains
``x_i``. Regions, subsystems and neighbor ids are 0-based everywhere in
this package (configs included).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .polytope import DEFAULT_TOL, HPolytope, contains, contains_many, support

__all__ = [
    "ConfigError",
    "OutOfPartitionError",
    "PwaMode",
    "CoupledIneq",
    "TerminalIngredients",
    "Subsystem",
    "PwaNetwork",
    "Rollout",
    "ValidationReport",
    "modes_containing",
    "find_mode",
    "step",
    "stage_cost",
    "terminal_cost",
    "local_cost",
    "rollout",
    "global_value",
    "validate",
    "network_from_dict",
    "network_to_dict",
    "load_network",
    "terminal_from_dict",
]


class ConfigError(ValueError):
    """Malformed network description. ``path`` locates the offending JSON node."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class OutOfPartitionError(RuntimeError):
    def __init__(self, subsystem: int, x, step: int | None = None):
        self.subsystem = subsystem
        self.step = step
        self.x = np.asarray(x, dtype=float)
        where = f" at step {step}" if step is not None else ""
        super().__init__(
            f"state {np.array2string(self.x, precision=6)} of subsystem {subsystem}{where} "
            "lies in no region closure"
        )


def _mat(a, shape=None, name="matrix") -> np.ndarray:
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if shape is not None and m.shape != shape:
        raise ConfigError(f"expected shape {shape}, got {m.shape}", name)
    if not np.all(np.isfinite(m)):
        raise ConfigError("non-finite entry", name)
    return m


def _vec(a, n=None, name="vector") -> np.ndarray:
    v = np.asarray(a, dtype=float).reshape(-1)
    if n is not None and v.size != n:
        raise ConfigError(f"expected length {n}, got {v.size}", name)
    if not np.all(np.isfinite(v)):
        raise ConfigError("non-finite entry", name)
    return v


@dataclass(frozen=True, eq=False)
class PwaMode:
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    A_ij: dict[int, np.ndarray]
    region: HPolytope


@dataclass(frozen=True, eq=False)
class CoupledIneq:
    """Linear coupled constraint ``G x_i + sum_j G_ij x_j <= g``."""

    G: np.ndarray
    G_ij: dict[int, np.ndarray]
    g: np.ndarray

    def value(self, x_i, x_nb: dict) -> np.ndarray:
        r = self.G @ x_i - self.g
        for j, Gj in self.G_ij.items():
            r = r + Gj @ x_nb[j]
        return r


@dataclass(frozen=True, eq=False)
class TerminalIngredients:
    """Terminal set, local gains ``u = K^l x`` per origin region, and cost ``x' Phi x``."""

    X_T: HPolytope
    gains: dict[int, np.ndarray]
    Phi: np.ndarray


@dataclass(frozen=True, eq=False)
class Subsystem:
    n: int
    m: int
    modes: list[PwaMode]
    X: HPolytope
    U: HPolytope
    Q: np.ndarray
    R: np.ndarray
    Q_ij: dict[int, np.ndarray] = field(default_factory=dict)
    coupled: CoupledIneq | None = None
    terminal: TerminalIngredients | None = None
    x_ref: np.ndarray | None = None
    u_ref: np.ndarray | None = None

    @property
    def L(self) -> int:
        return len(self.modes)

    def origin_modes(self, tol: float = DEFAULT_TOL) -> list[int]:
        """Regions whose closure contains the origin."""
        zero = np.zeros(self.n)
        return [l for l, md in enumerate(self.modes) if contains(md.region, zero, tol)]


@dataclass(frozen=True, eq=False)
class PwaNetwork:
    subsystems: list[Subsystem]
    neighbors: dict[int, list[int]]
    N: int

    @property
    def M(self) -> int:
        return len(self.subsystems)

    def nb(self, i: int) -> list[int]:
        return self.neighbors.get(i, [])

    def edges(self) -> list[tuple[int, int]]:
        """Directed neighbor pairs ``(i, j)`` with ``j in N_i``."""
        return [(i, j) for i in range(self.M) for j in self.nb(i)]

    def cost_owners(self, i: int) -> list[int]:
        """Agents ``j`` whose stage cost penalizes ``x_i`` through ``Q_ji``."""
        return [j for j in range(self.M) if i in self.subsystems[j].Q_ij]

    @property
    def has_terminal(self) -> bool:
        return all(s.terminal is not None for s in self.subsystems)

    def with_horizon(self, N: int) -> "PwaNetwork":
        return PwaNetwork(self.subsystems, self.neighbors, N)


def modes_containing(sub: Subsystem, x, tol: float = DEFAULT_TOL) -> list[int]:
    return [l for l, md in enumerate(sub.modes) if contains(md.region, x, tol)]


def find_mode(sub: Subsystem, x, tol: float = DEFAULT_TOL, i: int = -1, k: int | None = None) -> int:
    """Lowest-index region whose closure holds ``x``."""
    for l, md in enumerate(sub.modes):
        if contains(md.region, x, tol):
            return l
    raise OutOfPartitionError(i, x, k)


def step(net: PwaNetwork, i: int, x_i, u_i, x_nb: dict, mode: int | None = None,
         tol: float = DEFAULT_TOL) -> np.ndarray:
    sub = net.subsystems[i]
    x_i = np.asarray(x_i, dtype=float).reshape(-1)
    u_i = np.asarray(u_i, dtype=float).reshape(-1)
    if x_i.size != sub.n or u_i.size != sub.m:
        raise ValueError(f"subsystem {i}: expected x in R^{sub.n}, u in R^{sub.m}")
    l = find_mode(sub, x_i, tol, i) if mode is None else mode
    md = sub.modes[l]
    x_next = md.A @ x_i + md.B @ u_i + md.c
    for j, Aij in md.A_ij.items():
        if j not in x_nb:
            raise ValueError(f"subsystem {i}: state of neighbor {j} missing")
        x_next = x_next + Aij @ np.asarray(x_nb[j], dtype=float).reshape(-1)
    return x_next


def stage_cost(sub: Subsystem, x_i, u_i, x_nb: dict) -> float:
    dx = x_i if sub.x_ref is None else x_i - sub.x_ref
    du = u_i if sub.u_ref is None else u_i - sub.u_ref
    val = float(dx @ sub.Q @ dx + du @ sub.R @ du)
    for j, Qij in sub.Q_ij.items():
        val += float(x_nb[j] @ Qij @ x_nb[j])
    return val


def terminal_cost(sub: Subsystem, x_i) -> float:
    if sub.terminal is None:
        return 0.0
    return float(x_i @ sub.terminal.Phi @ x_i)


def local_cost(net: PwaNetwork, i: int, x_traj, u_seq, copies: dict) -> float:
    """``F_i``: stage costs for ``k < N`` plus the terminal cost at ``N``."""
    sub = net.subsystems[i]
    total = 0.0
    for k in range(net.N):
        total += stage_cost(sub, x_traj[k], u_seq[k], {j: copies[j][k] for j in sub.Q_ij})
    return total + terminal_cost(sub, x_traj[net.N])


@dataclass
class Rollout:
    x: list[np.ndarray]        # per agent, shape (N+1, n_i)
    modes: list[list[int]]     # per agent, realized region index for k < N


def rollout(net: PwaNetwork, x0, u, tol: float = DEFAULT_TOL) -> Rollout:
    """Simulate the true dynamics for ``N`` steps (lowest-index mode at boundaries)."""
    M, N = net.M, net.N
    xs = [np.zeros((N + 1, s.n)) for s in net.subsystems]
    modes = [[] for _ in range(M)]
    for i in range(M):
        xs[i][0] = np.asarray(x0[i], dtype=float).reshape(-1)
    for k in range(N):
        for i, sub in enumerate(net.subsystems):
            l = find_mode(sub, xs[i][k], tol, i, k)
            modes[i].append(l)
            nb = {j: xs[j][k] for j in net.nb(i)}
            xs[i][k + 1] = step(net, i, xs[i][k], np.asarray(u[i][k], dtype=float), nb, l)
    return Rollout(xs, modes)


def constraint_violation(net: PwaNetwork, xs, u, terminal_set: bool = True) -> float:
    """Largest violation of the local, coupled and terminal constraints along a trajectory."""
    worst = -math.inf
    N = net.N
    for i, sub in enumerate(net.subsystems):
        X = sub.X
        if X.n_facets:
            worst = max(worst, float(np.max(xs[i] @ X.H.T - X.h)))
        if sub.U.n_facets and N:
            ui = np.asarray(u[i], dtype=float).reshape(N, sub.m)
            worst = max(worst, float(np.max(ui @ sub.U.H.T - sub.U.h)))
        if sub.coupled is not None:
            for k in range(N + 1):
                r = sub.coupled.value(xs[i][k], {j: xs[j][k] for j in sub.coupled.G_ij})
                if r.size:
                    worst = max(worst, float(r.max()))
        if terminal_set and sub.terminal is not None and sub.terminal.X_T.n_facets:
            T = sub.terminal.X_T
            worst = max(worst, float(np.max(T.H @ xs[i][N] - T.h)))
    return worst if worst > -math.inf else 0.0


def global_value(net: PwaNetwork, x0, u, tol: float = DEFAULT_TOL, terminal_set: bool = True,
                 return_rollout: bool = False):
    """Global cost of applying ``u`` from ``x0``; ``inf`` if any constraint is violated.

    ``tol`` is the absolute slack allowed on every constraint row.
    Raises :class:`OutOfPartitionError` if the rollout leaves the partition.
    """
    ro = rollout(net, x0, u, tol)
    if constraint_violation(net, ro.x, u, terminal_set) > tol:
        val = math.inf
    else:
        val = 0.0
        for i in range(net.M):
            val += local_cost(net, i, ro.x[i], u[i], {j: ro.x[j] for j in range(net.M)})
    return (val, ro) if return_rollout else val


@dataclass
class ValidationReport:
    violations: list[tuple[str, str]] = field(default_factory=list)

    def add(self, kind: str, msg: str):
        self.violations.append((kind, msg))

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {k for k, _ in self.violations}

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violations": [{"kind": k, "message": m} for k, m in self.violations]}


def _psd(M, strict=False, tol=1e-10) -> bool:
    if not np.allclose(M, M.T, atol=1e-12):
        return False
    ev = np.linalg.eigvalsh(M)
    return bool(ev.min() > tol) if strict else bool(ev.min() >= -tol)


def _sample_box_rejection(P: HPolytope, n: int, rng) -> np.ndarray:
    lo = np.array([-support(P, -e) for e in np.eye(P.dim)])
    hi = np.array([support(P, e) for e in np.eye(P.dim)])
    pts = rng.uniform(lo, hi, size=(n, P.dim))
    return pts[contains_many(P, pts, 0.0)]


def validate(net: PwaNetwork, samples: int = 1000, seed: int = 0,
             tol: float = DEFAULT_TOL) -> ValidationReport:
    """Structural checks plus a sampled partition check of every ``X_i``.

    Violation kinds: ``dimension``, ``neighbors``, ``cost``, ``coverage``,
    ``overlap``, ``terminal``.
    """
    rep = ValidationReport()
    rng = np.random.default_rng(seed)
    dims = [s.n for s in net.subsystems]
    for i, sub in enumerate(net.subsystems):
        nbs = net.nb(i)
        if i in nbs:
            rep.add("neighbors", f"subsystem {i} lists itself as a neighbor")
        for j in nbs:
            if not 0 <= j < net.M:
                rep.add("neighbors", f"subsystem {i} has unknown neighbor {j}")
            elif i not in net.nb(j):
                rep.add("neighbors", f"neighbor lists asymmetric: {j} in N_{i} but {i} not in N_{j}")
        if sub.X.dim != sub.n or sub.U.dim != sub.m:
            rep.add("dimension", f"subsystem {i}: X or U has wrong dimension")
        for l, md in enumerate(sub.modes):
            tag = f"subsystem {i} mode {l}"
            if md.A.shape != (sub.n, sub.n) or md.B.shape != (sub.n, sub.m) or md.c.shape != (sub.n,):
                rep.add("dimension", f"{tag}: A/B/c shapes inconsistent")
            if md.region.dim != sub.n:
                rep.add("dimension", f"{tag}: region dimension {md.region.dim} != {sub.n}")
            for j, Aij in md.A_ij.items():
                if j not in nbs:
                    rep.add("neighbors", f"{tag}: coupling to {j} which is not in N_{i}")
                elif Aij.shape != (sub.n, dims[j]):
                    rep.add("dimension", f"{tag}: A_{i}{j} has shape {Aij.shape}")
        if not _psd(sub.Q) or not _psd(sub.R, strict=True):
            rep.add("cost", f"subsystem {i}: Q must be PSD and R PD")
        for j, Qij in sub.Q_ij.items():
            if j not in nbs:
                rep.add("neighbors", f"subsystem {i}: Q_{i}{j} for non-neighbor")
            elif Qij.shape != (dims[j], dims[j]) or not _psd(Qij):
                rep.add("cost", f"subsystem {i}: Q_{i}{j} must be PSD of size {dims[j]}")
        if sub.coupled is not None:
            for j in sub.coupled.G_ij:
                if j not in nbs:
                    rep.add("neighbors", f"subsystem {i}: coupled constraint on non-neighbor {j}")
        if sub.terminal is not None:
            T = sub.terminal
            if T.X_T.dim != sub.n:
                rep.add("terminal", f"subsystem {i}: terminal set dimension")
            elif not contains(T.X_T, np.zeros(sub.n), tol):
                rep.add("terminal", f"subsystem {i}: origin not in terminal set")
            if T.Phi.shape != (sub.n, sub.n) or not _psd(T.Phi, strict=True):
                rep.add("terminal", f"subsystem {i}: Phi must be symmetric PD")
            origin = sub.origin_modes(tol)
            for l in origin:
                if l not in T.gains:
                    rep.add("terminal", f"subsystem {i}: no gain for origin region {l}")
            for l, K in T.gains.items():
                if K.shape != (sub.m, sub.n):
                    rep.add("terminal", f"subsystem {i}: gain {l} has shape {K.shape}")
        if any("dimension" == k for k, _ in rep.violations) or samples <= 0:
            continue
        pts = _sample_box_rejection(sub.X, samples, rng)
        n_cover = np.zeros(len(pts), dtype=int)
        n_inner = np.zeros(len(pts), dtype=int)
        for md in sub.modes:
            n_cover += contains_many(md.region, pts, tol)
            if md.region.n_facets:
                n_inner += np.all(pts @ md.region.H.T < md.region.h - tol, axis=1)
            else:
                n_inner += 1
        for p in pts[n_cover == 0][:5]:
            rep.add("coverage", f"subsystem {i}: {p.tolist()} in X but in no region")
        for p in pts[n_inner >= 2][:5]:
            rep.add("overlap", f"subsystem {i}: {p.tolist()} interior to several regions")
    return rep


# ---------------------------------------------------------------- JSON I/O

def _poly(d, path) -> HPolytope:
    if not isinstance(d, dict):
        raise ConfigError("polytope must be an object with H/h or lo/hi", path)
    try:
        return HPolytope.from_dict(d)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc), path) from None


def _intkeys(d, path) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError("expected an object keyed by neighbor id", path)
    try:
        return {int(k): v for k, v in d.items()}
    except ValueError:
        raise ConfigError("keys must be integer ids", path) from None


def terminal_from_dict(d: dict, n: int, m: int, path: str = "terminal") -> TerminalIngredients:
    for key in ("X_T", "gains", "Phi"):
        if key not in d:
            raise ConfigError(f"missing '{key}'", path)
    gains = {l: _mat(K, (m, n), f"{path}.gains.{l}") for l, K in _intkeys(d["gains"], path + ".gains").items()}
    Phi = _mat(d["Phi"], (n, n), f"{path}.Phi")
    return TerminalIngredients(_poly(d["X_T"], f"{path}.X_T"), gains, Phi)


def network_from_dict(cfg: dict) -> PwaNetwork:
    if not isinstance(cfg, dict):
        raise ConfigError("top level must be an object")
    if "subsystems" not in cfg or "N" not in cfg:
        raise ConfigError("config needs 'N' and 'subsystems'")
    N = cfg["N"]
    if not isinstance(N, int) or N < 1:
        raise ConfigError("horizon must be a positive integer", "N")
    raw = cfg["subsystems"]
    M = len(raw)
    neighbors = {int(k): [int(j) for j in v] for k, v in _intkeys(cfg.get("neighbors", {}), "neighbors").items()}
    for i in range(M):
        neighbors.setdefault(i, [])
    dims = []
    for idx, s in enumerate(raw):
        try:
            dims.append((int(s["n"]), int(s["m"])))
        except (KeyError, TypeError, ValueError):
            raise ConfigError("needs integer 'n' and 'm'", f"subsystems[{idx}]") from None
    subs = []
    for i, s in enumerate(raw):
        p = f"subsystems[{i}]"
        n, m = dims[i]
        if not s.get("modes"):
            raise ConfigError("at least one mode required", p + ".modes")
        modes = []
        for l, md in enumerate(s["modes"]):
            mp = f"{p}.modes[{l}]"
            A = _mat(md.get("A"), (n, n), mp + ".A")
            B = _mat(md.get("B"), (n, m), mp + ".B")
            c = _vec(md.get("c", np.zeros(n)), n, mp + ".c")
            A_ij = {}
            for j, a in _intkeys(md.get("A_ij"), mp + ".A_ij").items():
                if not 0 <= j < M:
                    raise ConfigError(f"unknown neighbor {j}", mp + ".A_ij")
                A_ij[j] = _mat(a, (n, dims[j][0]), f"{mp}.A_ij.{j}")
            if "region" not in md:
                raise ConfigError("missing 'region'", mp)
            modes.append(PwaMode(A, B, c, A_ij, _poly(md["region"], mp + ".region")))
        for key in ("X", "U", "Q", "R"):
            if key not in s:
                raise ConfigError(f"missing '{key}'", p)
        Q_ij = {j: _mat(q, (dims[j][0], dims[j][0]), f"{p}.Q_ij.{j}")
                for j, q in _intkeys(s.get("Q_ij"), p + ".Q_ij").items()}
        coupled = None
        if s.get("h"):
            h = s["h"]
            G = _mat(h["G"], None, p + ".h.G")
            if G.shape[1] != n:
                raise ConfigError("G must have n columns", p + ".h.G")
            G_ij = {j: _mat(g, (G.shape[0], dims[j][0]), f"{p}.h.G_ij.{j}")
                    for j, g in _intkeys(h.get("G_ij"), p + ".h.G_ij").items()}
            coupled = CoupledIneq(G, G_ij, _vec(h["g"], G.shape[0], p + ".h.g"))
        terminal = terminal_from_dict(s["terminal"], n, m, p + ".terminal") if s.get("terminal") else None
        subs.append(Subsystem(
            n=n, m=m, modes=modes,
            X=_poly(s["X"], p + ".X"), U=_poly(s["U"], p + ".U"),
            Q=_mat(s["Q"], (n, n), p + ".Q"), R=_mat(s["R"], (m, m), p + ".R"),
            Q_ij=Q_ij, coupled=coupled, terminal=terminal,
            x_ref=_vec(s["x_ref"], n, p + ".x_ref") if s.get("x_ref") is not None else None,
            u_ref=_vec(s["u_ref"], m, p + ".u_ref") if s.get("u_ref") is not None else None,
        ))
    return PwaNetwork(subs, neighbors, N)


def network_to_dict(net: PwaNetwork) -> dict:
    out = {"N": net.N, "neighbors": {str(i): list(v) for i, v in net.neighbors.items()}, "subsystems": []}
    for sub in net.subsystems:
        d = {
            "n": sub.n, "m": sub.m,
            "modes": [{"A": md.A.tolist(), "B": md.B.tolist(), "c": md.c.tolist(),
                       "A_ij": {str(j): a.tolist() for j, a in md.A_ij.items()},
                       "region": md.region.to_dict()} for md in sub.modes],
            "X": sub.X.to_dict(), "U": sub.U.to_dict(),
            "Q": sub.Q.tolist(), "R": sub.R.tolist(),
            "Q_ij": {str(j): q.tolist() for j, q in sub.Q_ij.items()},
        }
        if sub.coupled is not None:
            d["h"] = {"G": sub.coupled.G.tolist(), "g": sub.coupled.g.tolist(),
                      "G_ij": {str(j): g.tolist() for j, g in sub.coupled.G_ij.items()}}
        if sub.terminal is not None:
            d["terminal"] = {"X_T": sub.terminal.X_T.to_dict(), "Phi": sub.terminal.Phi.tolist(),
                             "gains": {str(l): K.tolist() for l, K in sub.terminal.gains.items()}}
        if sub.x_ref is not None:
            d["x_ref"] = sub.x_ref.tolist()
        if sub.u_ref is not None:
            d["u_ref"] = sub.u_ref.tolist()
        out["subsystems"].append(d)
    return out


def load_network(path) -> PwaNetwork:
    """Read a network JSON file. Syntax errors are reported with line and column."""
    text = Path(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}", str(path)) from None
    return network_from_dict(cfg)
