import time

import pytest


class CriterionReporter:
    """Collects one PASS/FAIL line per acceptance criterion."""

    def __init__(self, lines):
        self.lines = lines

    def report(self, number, title, checks, started, budget_s):
        elapsed = time.perf_counter() - started
        checks = dict(checks)
        checks[f"runtime {elapsed:.1f}s < {budget_s:g}s"] = elapsed < budget_s
        ok = all(bool(v) for v in checks.values())
        detail = "; ".join(f"{k}{'' if v else ' [failed]'}" for k, v in checks.items())
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
        self.lines.append(line)
        print(line)
        failed = [k for k, v in checks.items() if not v]
        assert not failed, f"criterion {number} failed: {failed}"


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def criterion(request):
    return CriterionReporter(request.config._acceptance_lines)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
