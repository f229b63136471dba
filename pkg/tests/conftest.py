from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]

# Filled by the acceptance tests: (criterion number, label, passed, detail, soft)
ACCEPTANCE_LINES: list[tuple[int, str, bool, str, bool]] = []


@pytest.fixture
def report_criterion():
    def record(number: int, label: str, passed: bool, detail: str = "", soft: bool = False) -> None:
        ACCEPTANCE_LINES.append((number, label, bool(passed), detail, soft))
        tag = "PASS" if passed else ("SOFT-FAIL" if soft else "FAIL")
        print(f"[{tag}] criterion {number}: {label} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, label, passed, detail, soft in sorted(ACCEPTANCE_LINES):
        tag = "PASS" if passed else ("SOFT-FAIL" if soft else "FAIL")
        terminalreporter.write_line(f"{tag:9s} {number:2d}. {label}  {detail}")
