import pytest


def pytest_addoption(parser):
    parser.addoption("--no-learned", action="store_true", default=False,
                     help="skip tests that train the optional learned denoiser")


def pytest_collection_modifyitems(config, items):
    if not config.getoption("--no-learned"):
        return
    skip = pytest.mark.skip(reason="learned denoiser disabled with --no-learned")
    for item in items:
        if "learned" in item.keywords:
            item.add_marker(skip)


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def verdict(request):
    """Record one acceptance line: ``verdict(n, name, ok, detail)`` returns ``ok``.

    ``ok=None`` records a skipped criterion.
    """

    def record(number, name, ok, detail):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {number:>2} {status}  {name}: {detail}"
        request.config._acceptance[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config._acceptance
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
