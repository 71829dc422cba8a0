import contextlib
import time

import pytest


class Verdicts:
    """Collects one pass/fail line per acceptance criterion."""

    def __init__(self):
        self.lines = []

    @contextlib.contextmanager
    def __call__(self, number, title):
        note = {"detail": ""}
        start = time.perf_counter()
        try:
            yield note
        except BaseException as exc:
            self._add(number, title, False, note["detail"] or f"{type(exc).__name__}: {exc}".splitlines()[0], start)
            raise
        self._add(number, title, True, note["detail"], start)

    def _add(self, number, title, ok, detail, start):
        elapsed = time.perf_counter() - start
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title} ({elapsed:.1f}s)"
        if detail:
            line += f": {detail}"
        self.lines.append((number, line))
        print(line)


def pytest_configure(config):
    config._verdicts = Verdicts()


@pytest.fixture
def criterion(request):
    return request.config._verdicts


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_verdicts", None)
    if lines and lines.lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines.lines, key=lambda t: t[0]):
            terminalreporter.write_line(line)
