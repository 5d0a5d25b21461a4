from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
DATA_DIR = ROOT / "data"
FIXTURES = Path(__file__).parent / "fixtures"


def requires_data(name: str):
    return pytest.mark.skipif(
        not (DATA_DIR / name).exists(), reason=f"{name} missing; run scripts/prepare_datasets.py"
    )


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
