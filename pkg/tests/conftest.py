import re

import pytest


@pytest.fixture
def verdict(request):
    """Record one acceptance line on the test report and echo it."""
    def record(criterion, ok, detail):
        line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.node.user_properties.append(("acceptance", (criterion, line)))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) != "call":
                continue
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: (int(re.match(r"\d+", str(x[0])).group()), str(x[0]))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_bench(tmp_path_factory):
    from spkcon.trends import ToyBench
    return ToyBench(tmp_path_factory.mktemp("toy-corpus"))


@pytest.fixture(scope="session")
def toy_runs(toy_bench, tmp_path_factory):
    """Lazily trained toy variants, shared by every test in the session."""
    out = tmp_path_factory.mktemp("toy-runs")
    cache = {}

    def get(name, seed=0):
        if (name, seed) not in cache:
            cache[name, seed] = toy_bench.run(name, out, seed)
        return cache[name, seed]
    return get
