import numpy as np
import pytest

from vitsim import staticprune, vitref


@pytest.fixture(scope="session")
def tiny_cfg():
    return vitref.tiny()


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    return vitref.random_model(tiny_cfg, seed=0)


@pytest.fixture(scope="session")
def tiny_scores(tiny_cfg):
    return vitref.random_scores(tiny_cfg, seed=1)


@pytest.fixture(scope="session")
def tiny_image(tiny_cfg):
    c = tiny_cfg
    return np.random.default_rng(7).normal(size=(c.image_size, c.image_size, c.in_chans))


@pytest.fixture(scope="session")
def tiny_pruned(tiny_model, tiny_scores):
    return staticprune.prune_model(tiny_model, tiny_scores, 0.5)


# -- acceptance summary ------------------------------------------------------

_criteria: dict[int, list[str]] = {}


def _criterion(item_name: str):
    if item_name.startswith("test_criterion_"):
        return int(item_name.split("_")[2])
    return None


def pytest_runtest_logreport(report):
    n = _criterion(report.nodeid.split("::")[-1].split("[")[0])
    if n is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        _criteria.setdefault(n, []).append(outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        res = _criteria[n]
        if "FAIL" in res:
            verdict = "FAIL"
        elif all(r == "SKIP" for r in res):
            verdict = "NOT REPRODUCIBLE (documented)" if n == 10 else "SKIP"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}")
