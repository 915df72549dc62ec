import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hiegnet import hetgraph as hg

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ORACLES = json.loads((Path(__file__).parent / "oracles" / "frozen_oracles.json").read_text())


@pytest.fixture(scope="session")
def oracles():
    return ORACLES


def toy_layout(seed=0, n_g=4, n_m=4, n_t=4, side=300.0, d_g=5, d_c=3):
    rng = np.random.default_rng(seed)
    g = rng.uniform(0, side, (n_g, 2))
    cells = {"m": (rng.uniform(0, side, (n_m, 2)), rng.random((n_m, d_c))),
             "t": (rng.uniform(0, side, (n_t, 2)), rng.random((n_t, d_c)))}
    labels = rng.integers(0, 3, n_g)
    return g, rng.random((n_g, d_g)), cells, labels


def toy_graph(seed=0, eps_glom=200.0, **kw) -> hg.HeteroGraph:
    g, gx, cells, y = toy_layout(seed, **kw)
    return hg.construct(g, gx, cells, y, hg.GraphConfig(eps_glom=eps_glom), name=f"toy{seed}")


@pytest.fixture
def toy():
    return toy_graph(0)


# acceptance criteria append (number, title, passed, detail); printed after the run
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
