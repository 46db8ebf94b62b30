import re
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nodalab.eigensolver import assemble_operator, lowest_eigenpairs  # noqa: E402
from nodalab.equipartition import hessian_of_lambda  # noqa: E402
from nodalab.geometry import DomainSpec, PerturbationBasis, build_grid, build_straight_partition  # noqa: E402

ASPECT = 0.618


@pytest.fixture(scope="session")
def oracle():
    import oracles

    return oracles.frozen()


@pytest.fixture(scope="session")
def rect_spec():
    return DomainSpec.rectangle(1.0, ASPECT)


@pytest.fixture(scope="session")
def grid64(rect_spec):
    return build_grid(rect_spec, 64)


@pytest.fixture(scope="session")
def grid128(rect_spec):
    return build_grid(rect_spec, 128)


@pytest.fixture(scope="session")
def grid256(rect_spec):
    return build_grid(rect_spec, 256)


@pytest.fixture(scope="session")
def spectrum128(grid128):
    return lowest_eigenpairs(assemble_operator(grid128), 12)


@pytest.fixture(scope="session")
def spectrum256(grid256):
    return lowest_eigenpairs(assemble_operator(grid256), 12)


@pytest.fixture(scope="session")
def disk_grid():
    return build_grid(DomainSpec.disk(1.0), 128)


@pytest.fixture(scope="session")
def disk_spectrum(disk_grid):
    return lowest_eigenpairs(assemble_operator(disk_grid), 6)


@pytest.fixture(scope="session")
def straight128(grid128):
    cache = {}

    def get(m, k):
        if (m, k) not in cache:
            cache[(m, k)] = build_straight_partition(grid128, m, k)
        return cache[(m, k)]

    return get


@pytest.fixture(scope="session")
def straight256(grid256):
    cache = {}

    def get(m, k):
        if (m, k) not in cache:
            cache[(m, k)] = build_straight_partition(grid256, m, k)
        return cache[(m, k)]

    return get


@pytest.fixture(scope="session")
def hessian256(straight256):
    """Cached ``(partition, basis, report)`` for straight seeds at res 256."""
    cache = {}

    def get(m, k, K=4, dt=1e-2):
        key = (m, k, K, dt)
        if key not in cache:
            p = straight256(m, k)
            b = PerturbationBasis.for_partition(p, K)
            cache[key] = (p, b, hessian_of_lambda(p, b, dt))
        return cache[key]

    return get


# -- acceptance summary -------------------------------------------------------

_CRITERIA: dict[int, list] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)(\[.*\])?", report.nodeid)
    if not m or not (report.when == "call" or report.failed):
        return
    detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
    _CRITERIA.setdefault(int(m.group(1)), []).append(
        (m.group(2) + (m.group(3) or ""), report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        items = _CRITERIA[k]
        ok = all(outcome == "passed" for _, outcome, _ in items)
        failed = [name for name, outcome, _ in items if outcome != "passed"]
        line = f"criterion {k}: {'PASS' if ok else 'FAIL'} ({len(items) - len(failed)}/{len(items)} checks)"
        if failed:
            line += " failed: " + ", ".join(failed)
        tr.write_line(line)
        for name, outcome, detail in items:
            if detail:
                tr.write_line(f"    {name}: {outcome}; {detail}")
