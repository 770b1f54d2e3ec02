import pytest

_VERDICTS: list[str] = []


class Verdict:
    """Collects the named sub-checks of one acceptance criterion and prints a PASS/FAIL line."""

    def __init__(self, number: int, title: str, budget: float, capsys):
        self.number, self.title, self.budget, self._capsys = number, title, budget, capsys
        self.checks: dict[str, bool] = {}
        self.notes: list[str] = []

    def check(self, name: str, ok) -> None:
        self.checks[name] = bool(ok)

    def note(self, text: str) -> None:
        self.notes.append(text)

    def finish(self, elapsed: float) -> None:
        self.check(f"runtime {elapsed:.1f}s < {self.budget:g}s", elapsed < self.budget)
        failed = [k for k, v in self.checks.items() if not v]
        line = f"{'PASS' if not failed else 'FAIL'} {self.number:2d} {self.title} ({elapsed:.1f}s)"
        if failed:
            line += " | failed: " + "; ".join(failed)
        if self.notes:
            line += " | " + "; ".join(self.notes)
        _VERDICTS.append(line)
        with self._capsys.disabled():
            print("\n" + line)
        assert not failed, line


@pytest.fixture
def verdict(capsys):
    def make(number, title, budget):
        return Verdict(number, title, budget, capsys)

    return make


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
