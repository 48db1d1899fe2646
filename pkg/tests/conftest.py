"""Collects acceptance verdicts and prints one line per criterion at the end of the run."""

import pytest

_VERDICTS: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.fixture
def verdict(request):
    number, title = request.node.get_closest_marker("criterion").args

    def record(ok: bool, detail: str) -> bool:
        _VERDICTS[number] = (title, bool(ok), detail)
        return bool(ok)

    yield record
    if number not in _VERDICTS:
        _VERDICTS[number] = (title, False, "test raised before reaching a verdict")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        title, ok, detail = _VERDICTS[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  [{number:2d}] {title}: {detail}")
