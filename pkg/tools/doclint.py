"""Consistency checks for the markdown docs.

    python3 tools/doclint.py [--root DIR]

Exit codes follow the CLI: 0 clean, 1 unreadable input, 3 lint findings.
"""

import argparse
import importlib
import re
import sys
from collections import Counter
from pathlib import Path

DOCS = ("reproduction.md", "algorithm-map.md", "deviations.md")
MODULES = ("polytope", "model", "switching", "qpcore", "admm", "mpc", "terminal", "oracle", "cli")

# rows each module contributes to the decisions table
EXPECTED_ROWS = {
    "polytope": 4, "model": 4, "switching": 4, "qpcore": 2, "admm": 6,
    "mpc": 4, "terminal": 4, "oracle": 4, "cli": 2, "docs": 1,
}

# wording that points outside the repository instead of describing the code
BANNED = [r"\bpaper\b", r"arxiv", r"\bEq(uation)?\.?\s*\(?\d", r"§", r"\bAlgorithm\s+\d", r"\bAppendix\b",
          r"\bTheorem\b", r"\bLemma\b", r"\bspec(ification)?\b"]

SYMBOL = re.compile(r"`(\w+)\.(\w+)`")


def public_names(mod_name):
    mod = importlib.import_module(f"pwadmpc.{mod_name}")
    names = getattr(mod, "__all__", None)
    if names is None:  # the CLI module exposes its commands instead
        names = ["main"] + [n for n in vars(mod) if n.startswith("cmd_")]
    return mod, list(names)


def resolves(ref: str, root: Path) -> bool:
    ref = ref.strip("` ")
    m = re.fullmatch(r"(\w+)\.(\w+)", ref)
    if m and m.group(1) in MODULES:
        mod = importlib.import_module(f"pwadmpc.{m.group(1)}")
        return hasattr(mod, m.group(2))
    return (root / ref).exists()


def table_rows(text: str):
    rows = []
    for line in text.splitlines():
        if not line.startswith("|") or set(line) <= set("|- "):
            continue
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        if cells and cells[0] != "ID":
            rows.append(cells)
    return rows


def check_deviations(text, root):
    problems = []
    rows = table_rows(text)
    for r in rows:
        if len(r) != 4:
            problems.append(f"deviations: malformed row {r[:1]}")
    rows = [r for r in rows if len(r) == 4]
    for what, col in (("ID", 0), ("decision", 2)):
        for value, n in Counter(r[col] for r in rows).items():
            if n > 1:
                problems.append(f"deviations: {what} listed {n} times: {value[:60]}")
    counts = Counter(r[1] for r in rows)
    for mod in sorted(set(counts) | set(EXPECTED_ROWS)):
        if counts.get(mod, 0) != EXPECTED_ROWS.get(mod, 0):
            problems.append(f"deviations: {mod} has {counts.get(mod, 0)} rows, expected {EXPECTED_ROWS.get(mod, 0)}")
    for r in rows:
        if not resolves(r[3], root):
            problems.append(f"deviations: {r[0]} points at unknown {r[3]}")
    return problems


def check_map(text):
    problems = []
    seen = set(SYMBOL.findall(text))
    for mod_name in MODULES:
        mod, names = public_names(mod_name)
        for name in names:
            if (mod_name, name) not in seen:
                problems.append(f"algorithm map: {mod_name}.{name} is not listed")
    for mod_name, name in sorted(seen):
        if mod_name in MODULES and not hasattr(importlib.import_module(f"pwadmpc.{mod_name}"), name):
            problems.append(f"algorithm map: {mod_name}.{name} does not exist")
    return problems


def check_wording(path: Path, text: str):
    problems = []
    for n, line in enumerate(text.splitlines(), 1):
        for pat in BANNED:
            if re.search(pat, line, re.IGNORECASE):
                problems.append(f"{path.name}:{n}: external reference matching {pat!r}")
    return problems


def lint(root: Path) -> list[str]:
    docs = root / "docs"
    texts = {name: (docs / name).read_text(encoding="utf-8") for name in DOCS}
    problems = check_deviations(texts["deviations.md"], root) + check_map(texts["algorithm-map.md"])
    readme = root / "README.md"
    if readme.exists():
        texts["README.md"] = readme.read_text(encoding="utf-8")
    for name, text in texts.items():
        problems += check_wording(Path(name), text)
    return problems


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default=Path(__file__).resolve().parents[1], type=Path)
    args = ap.parse_args(argv)
    try:
        problems = lint(args.root)
    except (OSError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for p in problems:
        print(p)
    if problems:
        print(f"{len(problems)} problem(s)", file=sys.stderr)
        return 3
    print("docs ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
