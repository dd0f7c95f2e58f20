import sys

import numpy as np
import pandas as pd
import pytest

from staggerdid.panel import CohortTable, PanelDataset, WageIndex
from staggerdid.synth import DgpConfig, EffectFamily, simulate_panel


def long_frame(panel, cohorts):
    """Panel in long form with the event year as ``cohort`` (0 if excluded)."""
    df = panel.frame()
    g = dict(zip(panel.persons.tolist(), cohorts.event_years(panel).tolist()))
    df["cohort"] = df["person"].map(g)
    return df


def make_panel(rows, deaths=None):
    """PanelDataset from a list of dicts with at least person, year, wage,
    business_income, birth_year and transfer_amount."""
    df = pd.DataFrame(rows)
    if deaths is not None:
        df["parent_death_years"] = df["person"].map(
            lambda p: ";".join(str(d) for d in sorted(deaths.get(p, ()))))
    return PanelDataset.from_frame(df)


def flat_index(first, last, w=500.0):
    return WageIndex({y: w for y in range(first, last + 1)})


def cohort_table(assign):
    """CohortTable from {person: event year or None}."""
    rows = []
    for p, g in assign.items():
        if g is None:
            rows.append((p, None, None, "", False, "no_transfer"))
        else:
            rows.append((p, g, g, "I4", True, ""))
    return CohortTable(pd.DataFrame(rows, columns=[
        "person", "event_year", "death_year", "category", "included",
        "exclusion_reason"]))


@pytest.fixture(scope="session")
def small_sim():
    """Baseline-shaped years with small cohorts and a step effect."""
    cfg = DgpConfig(years=(1993, 2017),
                    cohorts={g: 30 for g in range(1996, 2018)},
                    tau=EffectFamily(level=-20), seed=123)
    return simulate_panel(cfg)


@pytest.fixture(scope="session")
def toy_sim():
    cfg = DgpConfig(years=(1995, 2008),
                    cohorts={g: 25 for g in (1999, 2001, 2003, 2005, 2008)},
                    tau=EffectFamily(level=-10, decay=0.1), seed=9)
    return simulate_panel(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance lines, one per criterion, after the run."""
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
