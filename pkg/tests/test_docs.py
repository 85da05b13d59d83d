import importlib.util
import shutil
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]


def load_doclint():
    spec = importlib.util.spec_from_file_location("doclint", ROOT / "tools" / "doclint.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


doclint = load_doclint()


@pytest.fixture
def tree(tmp_path):
    shutil.copytree(ROOT / "docs", tmp_path / "docs")
    shutil.copytree(ROOT / "src", tmp_path / "src")
    shutil.copy(ROOT / "README.md", tmp_path / "README.md")
    return tmp_path


def edit(path, old, new):
    text = path.read_text()
    assert old in text
    path.write_text(text.replace(old, new, 1))


def test_shipped_docs_are_clean():
    assert doclint.lint(ROOT) == []
    assert doclint.main(["--root", str(ROOT)]) == 0


def test_every_decision_row_is_counted():
    rows = doclint.table_rows((ROOT / "docs" / "deviations.md").read_text())
    assert len(rows) == sum(doclint.EXPECTED_ROWS.values()) == 35


def test_duplicate_decision_is_reported(tree):
    dev = tree / "docs" / "deviations.md"
    line = next(l for l in dev.read_text().splitlines() if l.startswith("| POL-1 "))
    dev.write_text(dev.read_text() + line + "\n")
    problems = doclint.lint(tree)
    assert any("ID listed 2 times" in p for p in problems)
    assert any("polytope has 5 rows" in p for p in problems)
    assert doclint.main(["--root", str(tree)]) == 3


def test_dangling_symbol_is_reported(tree):
    edit(tree / "docs" / "deviations.md", "`polytope.is_empty`", "`polytope.is_hollow`")
    assert any("POL-4 points at unknown" in p for p in doclint.lint(tree))


def test_unlisted_public_name_is_reported(tree):
    edit(tree / "docs" / "algorithm-map.md", "| `admm.residual` | consensus residual |\n", "")
    assert "algorithm map: admm.residual is not listed" in doclint.lint(tree)


def test_external_references_are_reported(tree):
    edit(tree / "docs" / "reproduction.md", "## Experiments", "## Experiments (as in Eq. (12))")
    assert any("reproduction.md:" in p and "Eq" in p for p in doclint.lint(tree))


def test_missing_docs_is_an_input_error(tmp_path):
    assert doclint.main(["--root", str(tmp_path)]) == 1
