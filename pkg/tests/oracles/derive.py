"""Independent reference values, frozen into tests/data/frozen.json.

Nothing here imports the package. Configs are read as plain JSON, dynamics
are hand-rolled loops, and the small QPs go through scipy's SLSQP instead of
the package's solver stack. Rerun after changing a bundled config:

    python tests/oracles/derive.py
"""

import itertools
import json
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

ROOT = Path(__file__).resolve().parents[2]
CONFIGS = ROOT / "src" / "pwadmpc" / "configs"
OUT = ROOT / "tests" / "data" / "frozen.json"


def region_of(x, sx_sy):
    # closed quadrant test written out by sign
    sx, sy = sx_sy
    return sx * x[0] >= 0 and sy * x[1] >= 0


QUADRANT_SIGNS = [(1, 1), (-1, 1), (-1, -1), (1, -1)]


def weak_rollout():
    cfg = json.loads((CONFIGS / "weakcoupling.json").read_text())
    x = [np.array(v, dtype=float) for v in cfg["experiment"]["x0"]]
    N = cfg["N"]
    subs = cfg["subsystems"]
    traj = [[xi.copy()] for xi in x]
    F = [0.0, 0.0, 0.0]
    for k in range(N + 1):
        for i, s in enumerate(subs):
            Q = np.array(s["Q"], dtype=float)
            if k < N:
                F[i] += float(x[i] @ Q @ x[i])  # zero inputs: no input cost
            else:
                Phi = np.array(s["terminal"]["Phi"], dtype=float)
                F[i] += float(x[i] @ Phi @ x[i])
        if k == N:
            break
        nxt = []
        for i, s in enumerate(subs):
            l = next(l for l, sg in enumerate(QUADRANT_SIGNS) if region_of(x[i], sg))
            md = s["modes"][l]
            v = np.array(md["A"], dtype=float) @ x[i]
            for j, Aij in md["A_ij"].items():
                v = v + np.array(Aij, dtype=float) @ x[int(j)]
            nxt.append(v)
        x = nxt
        for i in range(3):
            traj[i].append(x[i].copy())
    return {"F_dr": F, "x": [np.array(t).tolist() for t in traj]}


def toy_sequences(x0):
    cfg = json.loads((CONFIGS / "two-region-toy.json").read_text())
    subs = cfg["subsystems"]
    a = [[s["modes"][l]["A"][0][0] for l in range(2)] for s in subs]
    c = [s["modes"][0]["A_ij"][str(1 - i)][0][0] for i, s in enumerate(subs)]
    regs = [[(np.array(s["modes"][l]["region"]["H"])[:, 0], np.array(s["modes"][l]["region"]["h"]))
             for l in range(2)] for s in subs]

    def inside(i, l, v):
        H, h = regs[i][l]
        return bool(np.all(H * v <= h))
    out = {}
    total = 0
    for s0 in itertools.product(range(2), repeat=2):
        for s1 in itertools.product(range(2), repeat=2):
            total += 1
            seq = (s0, s1)  # per agent (s_i(0), s_i(1))
            if not all(inside(i, seq[i][0], x0[i]) for i in range(2)):
                continue

            def x1(u, i):
                return a[i][seq[i][0]] * x0[i] + u[i] + c[i] * x0[1 - i]

            cons = []
            for i in range(2):
                # x(1) in the closed region of step 1 and inside |x| <= 5
                for hrow, hval in zip(*regs[i][seq[i][1]]):
                    cons.append({"type": "ineq", "fun": lambda u, i=i, a=hrow, b=hval: b - a * x1(u, i)})
                cons.append({"type": "ineq", "fun": lambda u, i=i: 5.0 - x1(u, i)})
                cons.append({"type": "ineq", "fun": lambda u, i=i: 5.0 + x1(u, i)})
            res = minimize(lambda u: x0[0] ** 2 + x0[1] ** 2 + u[0] ** 2 + u[1] ** 2, np.zeros(2),
                           method="SLSQP", bounds=[(-1, 1), (-1, 1)], constraints=cons,
                           options={"ftol": 1e-14, "maxiter": 500})
            ok = res.success and all(cn["fun"](res.x) >= -1e-9 for cn in cons)
            if ok:
                out["-".join(f"{p[0]}{p[1]}" for p in seq)] = float(res.fun)
    return {"total": total, "values": out, "best": min(out.values()) if out else None}


def main():
    frozen = {
        "step_weak_mode0_x10": (np.array([[0.6324, 0.2785], [0.0975, 0.5469]]) @ np.array([1.0, 0.0])).tolist(),
        "weak_rollout_zero_guess": weak_rollout(),
        "toy_default_x0": toy_sequences([2.0, 1.5]),
        "toy_boundary_x0": toy_sequences([0.3, -0.2]),
        # (N+1)(n_i + sum_j n_j) + N m_i with N=5, n=2, two neighbors, m=1
        "local_qp_dim_two_neighbors": 6 * (2 + 2 + 2) + 5 * 1,
        "scalar_lyapunov": {"phi2": 0.25 * 2 - 2 + 1, "phi1": 0.25 * 1 - 1 + 1},
        "hand_value_single": 2.0 ** 2 * 1 + (-1.0) ** 2 * 1 + 1 * (-1.0) ** 2,
    }
    OUT.write_text(json.dumps(frozen, indent=1, sort_keys=True) + "\n")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
