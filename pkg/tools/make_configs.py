"""Regenerate the bundled network configs in src/pwadmpc/configs/."""

import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "pwadmpc" / "configs"

# closed quadrants, counterclockwise from the positive orthant
QUADRANT_SIGNS = [(1, 1), (-1, 1), (-1, -1), (1, -1)]


def quadrant_regions(bound):
    regs = []
    for sx, sy in QUADRANT_SIGNS:
        H = [[-sx, 0], [0, -sy], [sx, 0], [0, sy]]
        regs.append({"H": H, "h": [0.0, 0.0, bound, bound]})
    return regs


def three_agent(coupling, phis, name):
    A13 = [[0.6324, 0.2785], [0.0975, 0.5469]]
    A24 = [[0.6555, 0.7060], [0.1712, 0.0318]]
    K13 = [[-0.0544, -0.1398]]
    K24 = [[-0.1544, -0.0295]]
    P = np.array([[7.8514, 8.1971], [8.1957, -7.8503]])
    X_T = {"H": np.vstack([P, -P]).tolist(), "h": [47.0] * 4}
    # nonzero couplings 1<-2, 2<-1, 2<-3, 3<-1 (1-based agent names)
    couple = {0: [1], 1: [0, 2], 2: [0]}
    Cm = (coupling * np.eye(2)).tolist()
    subs = []
    for i in range(3):
        modes = []
        for l, reg in enumerate(quadrant_regions(20.0)):
            modes.append({
                "A": A13 if l in (0, 2) else A24,
                "B": [[1.0], [0.0]],
                "c": [0.0, 0.0],
                "A_ij": {str(j): Cm for j in couple[i]},
                "region": reg,
            })
        subs.append({
            "n": 2, "m": 1, "modes": modes,
            "X": {"lo": [-20, -20], "hi": [20, 20]},
            "U": {"lo": [-3], "hi": [3]},
            "Q": [[2, 0], [0, 2]], "R": [[0.2]],
            "terminal": {"X_T": X_T, "Phi": phis[i],
                         "gains": {"0": K13, "1": K24, "2": K13, "3": K24}},
        })
    cfg = {
        "N": 5,
        "neighbors": {"0": [1, 2], "1": [0, 2], "2": [0, 1]},
        "subsystems": subs,
        "experiment": {
            "x0": [[-11, -18], [2, -19], [15, 19]],
            "steps": 30,
            "admm": ADMM[name],
        },
    }
    (OUT / f"{name}.json").write_text(json.dumps(cfg, indent=1) + "\n")


ADMM = {
    "weakcoupling": {"rho": 0.5, "T_admm": 50, "T_cut": 50},
    "strongcoupling": {"rho": 5.0, "T_admm": 75, "T_cut": 50},
}


def weak_phis():
    base = np.array([[3.938, 1.262], [1.262, 4.346]])
    deltas = [[[12.67, 8.87], [8.87, 8.14]], [[10.58, 7.90], [7.90, 8.26]], [[8.53, 5.43], [5.43, 7.10]]]
    return [(base + 1e-4 * np.array(d)).tolist() for d in deltas]


STRONG_PHIS = [
    [[40.98, 28.29], [28.29, 43.73]],
    [[32.07, 20.90], [20.90, 35.91]],
    [[31.97, 20.83], [20.83, 35.07]],
]


def quadrant_toy():
    import sys
    sys.path.insert(0, str(OUT.parents[1]))
    from pwadmpc.model import network_to_dict
    from pwadmpc.oracle import random_quadrant_network

    net = random_quadrant_network(np.random.default_rng(2025), N=5)
    cfg = network_to_dict(net)
    cfg["experiment"] = {"x0": [[6.0, -4.0], [-3.0, 8.0]], "steps": 10,
                         "admm": {"rho": 1.0, "T_admm": 1000, "T_cut": 100}}
    (OUT / "quadrant-toy.json").write_text(json.dumps(cfg, indent=1) + "\n")


def two_region_toy():
    """Two scalar agents, two half-line regions each, horizon 1."""
    def sub(a, j):
        regs = [{"H": [[-1.0], [1.0]], "h": [0.0, 5.0]}, {"H": [[1.0], [-1.0]], "h": [0.0, 5.0]}]
        return {
            "n": 1, "m": 1,
            "modes": [{"A": [[a[l]]], "B": [[1.0]], "c": [0.0], "A_ij": {str(j): [[0.1]]}, "region": regs[l]}
                      for l in range(2)],
            "X": {"lo": [-5], "hi": [5]}, "U": {"lo": [-1], "hi": [1]},
            "Q": [[1.0]], "R": [[1.0]],
        }
    cfg = {"N": 1, "neighbors": {"0": [1], "1": [0]},
           "subsystems": [sub([0.9, 1.1], 1), sub([1.2, 0.8], 0)],
           "experiment": {"x0": [[2.0], [1.5]], "steps": 3,
                          "admm": {"rho": 1.0, "T_admm": 200, "T_cut": 50}}}
    (OUT / "two-region-toy.json").write_text(json.dumps(cfg, indent=1) + "\n")


def expanding_toy():
    """Decoupled 2-D system with closed loop 2I: the terminal iteration cannot converge."""
    sub = {
        "n": 2, "m": 1,
        "modes": [{"A": [[2.0, 0.0], [0.0, 2.0]], "B": [[1.0], [0.0]], "c": [0, 0],
                   "region": {"lo": [-10, -10], "hi": [10, 10]}}],
        "X": {"lo": [-10, -10], "hi": [10, 10]}, "U": {"lo": [-1], "hi": [1]},
        "Q": [[1, 0], [0, 1]], "R": [[1]],
        "terminal": {"X_T": {"lo": [-1, -1], "hi": [1, 1]}, "Phi": [[1, 0], [0, 1]],
                     "gains": {"0": [[0.0, 0.0]]}},
    }
    cfg = {"N": 3, "neighbors": {"0": []}, "subsystems": [sub]}
    (OUT / "expanding-toy.json").write_text(json.dumps(cfg, indent=1) + "\n")


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    three_agent(2e-3, weak_phis(), "weakcoupling")
    three_agent(0.16, STRONG_PHIS, "strongcoupling")
    two_region_toy()
    expanding_toy()
    quadrant_toy()
