import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import flat_index, make_panel
from oracles import death_proximity
from staggerdid.errors import (
    DomainError,
    PanelValidationError,
    ParseError,
    SchemaError,
)
from staggerdid.panel import (
    CohortTable,
    Exclusion,
    FilterSpec,
    SizeCategory,
    WageIndex,
    assign_cohorts,
    categorize_transfer,
    death_proximity_table,
    load_panel,
    load_wage_index,
    sample_means,
    write_panel,
)

HEADER = "person,year,wage,business_income,birth_year,transfer_amount,sex"


def _rows(persons=3, years=range(2000, 2005), business=0.0):
    out = []
    for p in range(1, persons + 1):
        for y in years:
            out.append(dict(person=p, year=y, wage=100.0 + p + y % 7,
                            business_income=business, birth_year=1960 + p,
                            transfer_amount=0.0, sex=p % 2))
    return out


def _write_csv(path, rows):
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


# --------------------------------------------------------------------------
# load_panel
# --------------------------------------------------------------------------


def test_load_minimal_balanced_panel(tmp_path):
    panel = load_panel(_write_csv(tmp_path / "p.csv", _rows()))
    assert panel.n_persons == 3
    assert panel.n_years == 5
    assert len(panel) == 15
    assert (panel.column("age") == panel.years[None, :] - panel.birth_year[:, None]).all()


def test_missing_year_names_offending_person(tmp_path):
    rows = [r for r in _rows() if not (r["person"] == 2 and r["year"] == 2001)]
    with pytest.raises(PanelValidationError) as err:
        load_panel(_write_csv(tmp_path / "p.csv", rows))
    assert err.value.person == 2
    assert err.value.year == 2001
    assert "2" in str(err.value)


def test_zero_business_income_means_not_self_employed(tmp_path):
    panel = load_panel(_write_csv(tmp_path / "p.csv", _rows(business=0.0)))
    assert (panel.column("self_employed") == 0).all()
    assert np.allclose(panel.column("occupational_income"), panel.column("wage"), atol=1e-9)


def test_business_income_derivations(tmp_path):
    rows = _rows()
    rows[3]["business_income"] = 12.5
    panel = load_panel(_write_csv(tmp_path / "p.csv", rows))
    se = panel.column("self_employed")
    assert se.sum() == 1 and se[0, 3] == 1
    occ = panel.column("occupational_income")
    assert abs(occ[0, 3] - (rows[3]["wage"] + 12.5)) <= 1e-9


def test_missing_column_is_named(tmp_path):
    rows = [{k: v for k, v in r.items() if k != "business_income"} for r in _rows()]
    with pytest.raises(SchemaError) as err:
        load_panel(_write_csv(tmp_path / "p.csv", rows))
    assert err.value.column == "business_income"


def test_non_numeric_cell_reports_line(tmp_path):
    path = tmp_path / "p.csv"
    _write_csv(path, _rows())
    lines = path.read_text().splitlines()
    parts = lines[4].split(",")
    parts[2] = "abc"
    lines[4] = ",".join(parts)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as err:
        load_panel(path)
    assert err.value.row == 5
    assert err.value.column == "wage"


def test_schema_mapping_and_death_file(tmp_path):
    rows = _rows()
    for r in rows:
        r["income"] = r.pop("wage")
    path = _write_csv(tmp_path / "p.csv", rows)
    deaths = tmp_path / "d.csv"
    deaths.write_text("person,death_year\n1,2002\n1,2004\n3,2001\n")
    panel = load_panel(path, schema={"wage": "income"}, deaths_path=deaths)
    assert panel.parent_death_years[0] == frozenset({2002, 2004})
    assert panel.parent_death_years[1] == frozenset()
    assert panel.parent_death_years[2] == frozenset({2001})


def test_semicolon_and_delimiter(tmp_path):
    rows = _rows()
    for r in rows:
        r["parent_death_years"] = "2001;2003" if r["person"] == 1 else ""
    path = tmp_path / "p.tsv"
    pd.DataFrame(rows).to_csv(path, index=False, sep="\t")
    panel = load_panel(path, delimiter="\t")
    assert panel.parent_death_years[0] == frozenset({2001, 2003})


def test_write_then_load_round_trip(tmp_path, small_sim):
    path = tmp_path / "panel.csv"
    write_panel(small_sim.panel, path)
    back = load_panel(path)
    assert np.array_equal(back.persons, small_sim.panel.persons)
    for name in ("age", "birth_year", "sex"):
        assert np.array_equal(back.column(name), small_sim.panel.column(name))
    for name in ("wage", "transfer_amount"):
        assert np.allclose(back.column(name), small_sim.panel.column(name), rtol=1e-9)
    assert back.parent_death_years == small_sim.panel.parent_death_years


def test_panel_arrays_are_read_only(small_sim):
    with pytest.raises(ValueError):
        small_sim.panel.column("wage")[0, 0] = 1.0


def test_wage_index_file(tmp_path):
    path = tmp_path / "w.csv"
    path.write_text("year,W\n2000,480\n2001,500\n")
    idx = load_wage_index(path)
    assert idx[2001] == 500
    with pytest.raises(DomainError):
        idx[1999]


# --------------------------------------------------------------------------
# Size categories
# --------------------------------------------------------------------------


def test_category_examples():
    idx = WageIndex({2005: 500.0})
    assert categorize_transfer(548, 2005, idx) == SizeCategory.I3
    assert categorize_transfer(1691, 2005, idx) == SizeCategory.I4
    assert categorize_transfer(250, 2005, idx) == SizeCategory.I1
    assert categorize_transfer(0, 2005, idx) is None
    assert categorize_transfer(-3, 2005, idx) is None


def test_category_upper_boundaries_inclusive():
    idx = WageIndex({2005: 500.0})
    assert categorize_transfer(500, 2005, idx) == SizeCategory.I2
    assert categorize_transfer(1000, 2005, idx) == SizeCategory.I3
    assert categorize_transfer(1000.0001, 2005, idx) == SizeCategory.I4
    assert categorize_transfer(250.0001, 2005, idx) == SizeCategory.I2


def test_category_year_outside_index():
    with pytest.raises(DomainError):
        categorize_transfer(100, 1990, WageIndex({2005: 500.0}))


def test_category_partition_random_draws(rng):
    amounts = rng.exponential(800, 100_000) + 1e-9
    walls = rng.uniform(1, 2000, 100_000)
    bounds = {"I1": (0, 0.5), "I2": (0.5, 1), "I3": (1, 2), "I4": (2, math.inf)}
    for a, w in zip(amounts, walls):
        cat = categorize_transfer(a, 0, {0: w})
        hits = [k for k, (lo, hi) in bounds.items() if lo * w < a <= hi * w]
        assert hits == [str(cat)]


# --------------------------------------------------------------------------
# assign_cohorts
# --------------------------------------------------------------------------


def _person(pid, transfers, birth=1960, years=range(1998, 2013)):
    return [dict(person=pid, year=y, wage=400.0, business_income=0.0,
                 birth_year=birth, transfer_amount=transfers.get(y, 0.0))
            for y in years]


def test_transfer_within_window_is_included():
    panel = make_panel(_person(1, {2005: 1600}), deaths={1: {2003}})
    table = assign_cohorts(panel, flat_index(1998, 2012))
    row = table.frame.iloc[0]
    assert row["included"] and row["event_year"] == 2005
    assert row["death_year"] == 2003 and row["category"] == "I4"


def test_transfer_outside_window_is_excluded():
    panel = make_panel(_person(1, {2005: 1600}), deaths={1: {2000}})
    row = assign_cohorts(panel, flat_index(1998, 2012)).frame.iloc[0]
    assert not row["included"]
    assert row["exclusion_reason"] == Exclusion.NO_DEATH


def test_small_gift_allowance_admits_extra_gift():
    rows = _person(1, {2005: 1600, 2010: 0.3 * 500})
    panel = make_panel(rows, deaths={1: {2005}})
    idx = flat_index(1998, 2012)
    strict = assign_cohorts(panel, idx).frame.iloc[0]
    assert strict["exclusion_reason"] == Exclusion.MULTIPLE
    loose = assign_cohorts(panel, idx, FilterSpec(small_gift_allowance=True)).frame.iloc[0]
    assert loose["included"] and loose["event_year"] == 2005


def test_small_gifts_over_total_cap_excluded():
    rows = _person(1, {2005: 1600, 2008: 0.3 * 500, 2010: 0.3 * 500})
    panel = make_panel(rows, deaths={1: {2005}})
    row = assign_cohorts(panel, flat_index(1998, 2012),
                         FilterSpec(small_gift_allowance=True)).frame.iloc[0]
    assert row["exclusion_reason"] == Exclusion.MULTIPLE


def test_nearest_death_wins_and_ties_go_earlier():
    panel = make_panel(_person(1, {2005: 1600}) + _person(2, {2005: 1600}),
                       deaths={1: {2002, 2006}, 2: {2003, 2007}})
    fr = assign_cohorts(panel, flat_index(1998, 2012)).frame
    assert fr.loc[0, "death_year"] == 2006
    assert fr.loc[1, "death_year"] == 2003


def test_other_exclusion_reasons():
    rows = (_person(1, {}, birth=1940) + _person(2, {})
            + _person(3, {2004: 900, 2006: 900}))
    self_emp = _person(4, {2005: 1600})
    self_emp[3]["business_income"] = 5.0
    panel = make_panel(rows + self_emp, deaths={3: {2004}, 4: {2005}})
    fr = assign_cohorts(panel, flat_index(1998, 2012),
                        FilterSpec(exclude_ever_self_employed=True)).frame
    assert fr["exclusion_reason"].tolist() == [
        Exclusion.BIRTH_YEAR, Exclusion.NO_TRANSFER, Exclusion.MULTIPLE,
        Exclusion.SELF_EMPLOYED]
    # without one_off the earliest qualifying transfer becomes the event
    fr = assign_cohorts(panel, flat_index(1998, 2012), FilterSpec(one_off=False)).frame
    assert fr.loc[2, "event_year"] == 2004


def test_assign_cohorts_deterministic_and_csv_round_trip(tmp_path, small_sim):
    idx = small_sim.wage_index
    a = assign_cohorts(small_sim.panel, idx)
    b = assign_cohorts(small_sim.panel, idx)
    assert a == b
    path = tmp_path / "c.csv"
    a.to_csv(path)
    assert CohortTable.from_csv(path) == a


def test_simulated_cohorts_recovered_exactly(small_sim):
    table = assign_cohorts(small_sim.panel, small_sim.wage_index)
    assert table.cohort_sizes() == small_sim.cohorts.cohort_sizes()
    assert (table.event_years(small_sim.panel)
            == small_sim.cohorts.event_years(small_sim.panel)).all()


def _random_transfer_panel(rng, n=40, years=(2000, 2010)):
    rows, deaths = [], {}
    for p in range(1, n + 1):
        transfers = {}
        for _ in range(rng.integers(0, 3)):
            transfers[int(rng.integers(years[0], years[1] + 1))] = float(
                rng.choice([100, 400, 700, 1600]))
        rows += _person(p, transfers, birth=int(rng.integers(1945, 1980)),
                        years=range(years[0], years[1] + 1))
        deaths[p] = {int(d) for d in rng.integers(years[0] - 3, years[1] + 4,
                                                  rng.integers(0, 3))}
    return make_panel(rows, deaths), deaths


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), d1=st.integers(0, 5), extra=st.integers(0, 4))
def test_wider_window_never_shrinks_included_set(seed, d1, extra):
    panel, _ = _random_transfer_panel(np.random.default_rng(seed))
    idx = flat_index(2000, 2010)
    narrow = assign_cohorts(panel, idx, FilterSpec(death_window=d1)).frame
    wide = assign_cohorts(panel, idx, FilterSpec(death_window=d1 + extra)).frame
    assert set(narrow.loc[narrow["included"], "person"]) <= set(
        wide.loc[wide["included"], "person"])


# --------------------------------------------------------------------------
# Descriptive tables
# --------------------------------------------------------------------------


def test_proximity_all_at_death_gives_full_share():
    rows = _person(1, {2005: 1600}) + _person(2, {2007: 1600}) + _person(3, {})
    panel = make_panel(rows, deaths={1: {2005}, 2: {2007}})
    tab = death_proximity_table(panel, flat_index(1998, 2012), deltas=[0, 1])
    i4 = tab[(tab["delta"] == 0) & (tab["category"] == "I4")].iloc[0]
    assert i4["percent"] == 100.0 and i4["n_recipients"] == 2
    empty = tab[tab["category"] == "I1"]
    assert not empty["defined"].any() and empty["percent"].isna().all()


def test_proximity_matches_enumeration_uniform_gaps(rng):
    rows, deaths, people = [], {}, []
    for p in range(1, 161):
        gap = int(rng.integers(0, 8))
        year = 2003 + int(rng.integers(0, 3))
        amount = float(rng.choice([200, 450, 900, 1500]))
        d = year - gap if rng.random() < 0.5 else year + gap
        rows += _person(p, {year: amount})
        deaths[p] = {d}
        people.append({"transfers": {year: amount}, "deaths": {d}})
    panel = make_panel(rows, deaths)
    deltas = list(range(8))
    tab = death_proximity_table(panel, flat_index(1998, 2012), deltas)
    ref = death_proximity(people, deltas, {y: 500.0 for y in range(1998, 2013)})
    for _, r in tab.iterrows():
        n, k = ref[(r["delta"], r["category"])]
        assert (r["n_recipients"], r["n_within"]) == (n, k)
    for _, grp in tab.groupby("category"):
        assert (np.diff(grp.sort_values("delta")["percent"].dropna()) >= 0).all()


def test_sample_means_simple_cases():
    rows = _person(1, {2005: 1600}) + _person(2, {2005: 1600}) + _person(3, {2005: 450})
    for r in rows:
        if r["year"] == 2005:
            r["wage"] = {1: 400.0, 2: 432.0, 3: 416.0}[r["person"]]
    panel = make_panel(rows, deaths={1: {2005}, 2: {2005}, 3: {2005}})
    table = assign_cohorts(panel, flat_index(1998, 2012))
    means = sample_means(panel, table).set_index("group")
    assert means.loc["I4", "wage"] == 416.0
    assert means.loc["I2", "wage"] == 416.0 and means.loc["I2", "count"] == 1
    assert means.loc["I1", "count"] == 0 and math.isnan(means.loc["I1", "wage"])
    assert means.index[0] == "All"
