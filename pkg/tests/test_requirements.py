import re
from pathlib import Path

REQUIREMENTS = Path(__file__).resolve().parent.parent / "requirements.txt"


def _requirements():
    lines = REQUIREMENTS.read_text(encoding="utf-8").splitlines()
    return [line.strip() for line in lines if line.strip() and not line.lstrip().startswith("#")]


def test_every_dependency_is_pinned():
    entries = _requirements()
    assert entries
    for entry in entries:
        assert re.fullmatch(r"[A-Za-z0-9_.\-]+==\d+(\.\d+)*", entry), entry


def test_runtime_and_test_stacks_are_declared():
    names = {entry.split("==")[0].lower() for entry in _requirements()}
    assert names == {"numpy", "scipy", "pillow", "pytest", "pytest-cov", "hypothesis"}
