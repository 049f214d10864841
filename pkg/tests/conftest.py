import numpy as np
import pytest

from chronocon.data import Cohort, Sample
from chronocon.synthetic import CohortConfig, generate


@pytest.fixture(scope="session")
def small_cohort():
    cohort, _ = generate(CohortConfig(n_patients=20, feature_dim=8, severity_dims=3, seed=3))
    return cohort


def make_batch(times_by_group, dim=3, seed=0, labels=None):
    """Samples for {group: [t, ...]} with random features."""
    rng = np.random.default_rng(seed)
    out, i = [], 0
    for g, times in times_by_group.items():
        for t in times:
            lab = {} if labels is None else {"s": labels[i]}
            out.append(Sample(i, g, float(t), rng.standard_normal(dim), lab))
            i += 1
    return out


_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA[name] = ("PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        verdict, detail = _CRITERIA[name]
        terminalreporter.write_line(f"{verdict} {name}: {detail}")
