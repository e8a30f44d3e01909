import os

import pytest

from soafog.fixtures import FixtureSet
from soafog.security import PolicyStore, Role, SensitivityLabel

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")

# criterion id -> (title, [outcomes])
_ACCEPTANCE: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(cid, title): test backing one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    cid, title = marker.args
    entry = _ACCEPTANCE.setdefault(cid, (title, []))
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry[1].append("skipped" if rep.skipped else ("passed" if rep.passed else "failed"))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_ACCEPTANCE, key=lambda c: int(c[2:])):
        title, outcomes = _ACCEPTANCE[cid]
        ok = bool(outcomes) and all(o == "passed" for o in outcomes)
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}  {title}")


@pytest.fixture(scope="session")
def fx():
    """Four years, six districts, seed 7."""
    return FixtureSet([2011, 2012, 2013, 2014], 6, 7)


def make_store(**kw) -> PolicyStore:
    kw.setdefault("iterations", 1)
    return PolicyStore(**kw)


@pytest.fixture
def store():
    """Policy with one principal per role and matching clearances."""
    s = make_store()
    s.add_principal("admin", "admin-pw", [Role.ADMIN], clearance=SensitivityLabel.CONFIDENTIAL)
    s.add_principal("ana", "ana-pw", [Role.ANALYST], clearance=SensitivityLabel.RESTRICTED)
    s.add_principal("mo", "mo-pw", [Role.MOBILE_CLIENT])
    s.add_principal("thin", "thin-pw", [Role.THIN_CLIENT])
    s.add_principal("thick", "thick-pw", [Role.THICK_CLIENT], clearance=SensitivityLabel.RESTRICTED)
    return s
