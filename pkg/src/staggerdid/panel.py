"""Panel data model, ingestion, cohort construction and descriptive tables.

The panel is held in wide form: every numeric field is a ``(persons, years)``
array, which keeps the per-cell regressions and the bootstrap cheap.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import (
    ConfigError,
    DomainError,
    PanelValidationError,
    ParseError,
    SchemaError,
)

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = (
    "person",
    "year",
    "wage",
    "business_income",
    "birth_year",
    "transfer_amount",
)
OPTIONAL_DEFAULTS = {"sex": 0.0, "education_level": 0.0}
DEATH_COLUMNS = ("parent_death_years", "relative_death_years")
CORE_FIELDS = (
    "wage",
    "business_income",
    "occupational_income",
    "self_employed",
    "age",
    "sex",
    "birth_year",
    "education_level",
    "transfer_amount",
)


# --------------------------------------------------------------------------
# Panel
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Strongly balanced person-by-year panel.

    Attributes
    ----------
    persons : ndarray
        Person ids in sorted order; row ``i`` of every field array belongs
        to ``persons[i]``.
    years : ndarray
        Contiguous calendar years, ``years[j]`` labels column ``j``.
    fields : mapping of str to ndarray
        Numeric fields of shape ``(len(persons), len(years))``. Always holds
        the core fields; extra numeric input columns ride along.
    parent_death_years, relative_death_years : tuple of frozenset
        Per-person sets of death years (possibly empty).
    """

    persons: np.ndarray
    years: np.ndarray
    fields: Mapping[str, np.ndarray]
    parent_death_years: tuple
    relative_death_years: tuple

    def __post_init__(self):
        for arr in (self.persons, self.years, *self.fields.values()):
            arr.setflags(write=False)

    @property
    def first_year(self) -> int:
        return int(self.years[0])

    @property
    def last_year(self) -> int:
        return int(self.years[-1])

    @property
    def n_persons(self) -> int:
        return len(self.persons)

    @property
    def n_years(self) -> int:
        return len(self.years)

    @property
    def birth_year(self) -> np.ndarray:
        return self.fields["birth_year"][:, 0]

    @property
    def sex(self) -> np.ndarray:
        return self.fields["sex"][:, 0]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.fields[name]
        except KeyError:
            raise SchemaError(name) from None

    def year_index(self, year: int) -> int:
        j = int(year) - self.first_year
        if not 0 <= j < self.n_years:
            raise DomainError(f"year {year} outside panel range "
                              f"[{self.first_year}, {self.last_year}]")
        return j

    def person_index(self) -> dict:
        return {p: i for i, p in enumerate(self.persons.tolist())}

    def death_years(self, selector: str = "parental") -> tuple:
        if selector == "parental":
            return self.parent_death_years
        if selector == "relative":
            return self.relative_death_years
        raise ConfigError(f"unknown death set selector {selector!r}")

    def __len__(self):
        return self.n_persons * self.n_years

    def frame(self) -> pd.DataFrame:
        """Long-format copy, one row per (person, year)."""
        P, T = self.n_persons, self.n_years
        out = {
            "person": np.repeat(self.persons, T),
            "year": np.tile(self.years, P),
        }
        for name, arr in self.fields.items():
            out[name] = arr.reshape(-1)
        df = pd.DataFrame(out)
        for col, sets in (("parent_death_years", self.parent_death_years),
                          ("relative_death_years", self.relative_death_years)):
            joined = [";".join(str(y) for y in sorted(s)) for s in sets]
            df[col] = np.repeat(np.asarray(joined, dtype=object), T)
        return df

    @classmethod
    def from_frame(cls, df: pd.DataFrame, deaths: Optional[pd.DataFrame] = None,
                   ) -> "PanelDataset":
        """Validate a long frame with canonical column names and build a panel.

        ``deaths`` optionally holds ``person``, ``death_year`` and ``kind``
        (``parental`` or ``relative``) rows that are merged with any death
        columns in ``df``.
        """
        for col in REQUIRED_COLUMNS:
            if col not in df.columns:
                raise SchemaError(col)
        df = df.copy()
        for col, default in OPTIONAL_DEFAULTS.items():
            if col not in df.columns:
                df[col] = default

        df = df.sort_values(["person", "year"], kind="mergesort")
        if df.duplicated(["person", "year"]).any():
            dup = df[df.duplicated(["person", "year"])].iloc[0]
            raise PanelValidationError(
                f"duplicate observation for person {dup['person']} "
                f"year {int(dup['year'])}", dup["person"], int(dup["year"]))

        years_all = df["year"].to_numpy(dtype=np.int64)
        first, last = int(years_all.min()), int(years_all.max())
        years = np.arange(first, last + 1, dtype=np.int64)
        persons = pd.unique(df["person"])
        T = len(years)
        counts = df.groupby("person", sort=False).size()
        if (counts != T).any() or len(df) != len(persons) * T:
            _raise_unbalanced(df, years)

        P = len(persons)
        fields = {}
        skip = set(DEATH_COLUMNS) | {"person", "year"}
        for col in df.columns:
            if col in skip:
                continue
            arr = df[col].to_numpy()
            if arr.dtype == object:
                continue
            fields[col] = arr.astype(np.float64).reshape(P, T)

        wage, business = fields["wage"], fields["business_income"]
        occ = wage + business
        if "occupational_income" in fields:
            bad = np.abs(fields["occupational_income"] - occ) > 1e-9
            if bad.any():
                i, j = np.argwhere(bad)[0]
                raise PanelValidationError(
                    f"occupational_income != wage + business_income for "
                    f"person {persons[i]} year {years[j]}", persons[i], years[j])
        fields["occupational_income"] = occ
        self_emp = (business != 0).astype(np.float64)
        if "self_employed" in fields:
            bad = fields["self_employed"] != self_emp
            if bad.any():
                i, j = np.argwhere(bad)[0]
                raise PanelValidationError(
                    f"self_employed inconsistent with business_income for "
                    f"person {persons[i]} year {years[j]}", persons[i], years[j])
        fields["self_employed"] = self_emp

        birth = fields["birth_year"]
        _check_constant(birth, "birth_year", persons)
        _check_constant(fields["sex"], "sex", persons)
        age = years[None, :] - birth
        if "age" in fields and (fields["age"] != age).any():
            i, j = np.argwhere(fields["age"] != age)[0]
            raise PanelValidationError(
                f"age != year - birth_year for person {persons[i]} "
                f"year {years[j]}", persons[i], years[j])
        fields["age"] = age.astype(np.float64)

        parent = _collect_deaths(df, "parent_death_years", persons)
        relative = _collect_deaths(df, "relative_death_years", persons)
        if deaths is not None and len(deaths):
            parent, relative = _merge_death_file(deaths, persons, parent, relative)

        return cls(
            persons=np.asarray(persons),
            years=years,
            fields={k: np.ascontiguousarray(v) for k, v in fields.items()},
            parent_death_years=tuple(frozenset(s) for s in parent),
            relative_death_years=tuple(frozenset(s) for s in relative),
        )


def _raise_unbalanced(df, years):
    have = set(zip(df["person"].tolist(), df["year"].astype(int).tolist()))
    for person in pd.unique(df["person"]):
        for y in years.tolist():
            if (person, y) not in have:
                raise PanelValidationError(
                    f"panel is not balanced: person {person} has no "
                    f"observation for year {y}", person, y)
    raise PanelValidationError("panel is not balanced")


def _check_constant(arr, name, persons):
    bad = (arr != arr[:, :1]).any(axis=1)
    if bad.any():
        i = int(np.argmax(bad))
        raise PanelValidationError(
            f"{name} varies over time for person {persons[i]}", persons[i])


def _parse_year_list(text):
    text = str(text).strip()
    if not text:
        return set()
    out = set()
    for part in text.split(";"):
        part = part.strip()
        if part:
            out.add(int(float(part)))
    return out


def _collect_deaths(df, col, persons):
    sets = [set() for _ in persons]
    if col not in df.columns:
        return sets
    pos = {p: i for i, p in enumerate(persons.tolist())}
    for person, text in zip(df["person"].tolist(), df[col].tolist()):
        sets[pos[person]] |= _parse_year_list(text)
    return sets


def _merge_death_file(deaths, persons, parent, relative):
    pos = {p: i for i, p in enumerate(persons.tolist())}
    kinds = deaths["kind"] if "kind" in deaths.columns else ["parental"] * len(deaths)
    for person, year, kind in zip(deaths["person"].tolist(),
                                  deaths["death_year"].tolist(), kinds):
        if person not in pos:
            continue
        target = relative if str(kind).strip() == "relative" else parent
        target[pos[person]].add(int(year))
    return parent, relative


def _coerce_ids(values: pd.Series) -> pd.Series:
    numeric = pd.to_numeric(values, errors="coerce")
    if numeric.notna().all() and (numeric == np.floor(numeric)).all():
        return numeric.astype(np.int64)
    return values.astype(str)


def _parse_numeric(df, col, source_col):
    raw = df[col]
    parsed = pd.to_numeric(raw.str.strip(), errors="coerce")
    bad = parsed.isna()
    if bad.any():
        k = int(np.argmax(bad.to_numpy()))
        # header is line 1, so data row k sits on line k + 2
        raise ParseError(source_col, k + 2, raw.iloc[k])
    return parsed.astype(np.float64)


def load_panel(path, schema: Optional[Mapping[str, str]] = None,
               deaths_path=None, delimiter: str = ",") -> PanelDataset:
    """Read a delimited panel file and validate it.

    Parameters
    ----------
    path : path-like
        One row per (person, year) with a header row.
    schema : mapping, optional
        Canonical column name -> column name in the file. Unmapped names are
        looked up verbatim.
    deaths_path : path-like, optional
        Two-column ``person, death_year`` file (optional third column
        ``kind`` = parental/relative) merged into the death sets.
    delimiter : str
        Field separator, comma by default.
    """
    schema = dict(schema or {})
    raw = pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=False)
    raw.columns = [c.strip() for c in raw.columns]
    rename = {}
    for canon in (*REQUIRED_COLUMNS, *OPTIONAL_DEFAULTS, *DEATH_COLUMNS,
                  "age", "occupational_income", "self_employed"):
        src = schema.get(canon, canon)
        if src in raw.columns:
            rename[src] = canon
        elif canon in REQUIRED_COLUMNS:
            raise SchemaError(src, path)
    sources = {v: k for k, v in rename.items()}
    df = raw.rename(columns=rename)

    out = pd.DataFrame({"person": _coerce_ids(df["person"].str.strip())})
    for col in df.columns:
        if col in ("person", *DEATH_COLUMNS):
            continue
        known = col in rename.values()
        if known:
            out[col] = _parse_numeric(df, col, sources.get(col, col))
        else:
            parsed = pd.to_numeric(df[col].str.strip(), errors="coerce")
            if parsed.notna().all():
                out[col] = parsed.astype(np.float64)
            else:
                log.debug("ignoring non-numeric extra column %s", col)
    for col in DEATH_COLUMNS:
        if col in df.columns:
            out[col] = df[col]
    out["year"] = out["year"].astype(np.int64)

    deaths = None
    if deaths_path is not None:
        deaths = pd.read_csv(deaths_path, sep=delimiter, dtype=str,
                             keep_default_na=False)
        deaths.columns = [c.strip() for c in deaths.columns]
        for col in ("person", "death_year"):
            if col not in deaths.columns:
                raise SchemaError(col, deaths_path)
        deaths["person"] = _coerce_ids(deaths["person"].str.strip())
        deaths["death_year"] = _parse_numeric(deaths, "death_year", "death_year")
    return PanelDataset.from_frame(out, deaths)


def write_panel(panel: PanelDataset, path, delimiter: str = ",") -> None:
    df = panel.frame()
    write_table(df, path, delimiter)


def write_table(df: pd.DataFrame, path, delimiter: str = ",") -> None:
    """Write a delimited table with a fixed float format (stable bytes)."""
    df.to_csv(path, sep=delimiter, index=False, float_format="%.10g",
              lineterminator="\n")


# --------------------------------------------------------------------------
# Wage index and size categories
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WageIndex:
    """National mean annual wage W_t by calendar year."""

    values: Mapping[int, float]

    def __post_init__(self):
        for year, w in self.values.items():
            if not w > 0:
                raise DomainError(f"wage index must be positive, got {w} for {year}")

    def __getitem__(self, year) -> float:
        try:
            return self.values[int(year)]
        except KeyError:
            raise DomainError(f"year {year} outside wage index domain") from None

    def __contains__(self, year):
        return int(year) in self.values

    def check_covers(self, first: int, last: int) -> None:
        missing = [y for y in range(first, last + 1) if y not in self.values]
        if missing:
            raise DomainError(f"wage index lacks years {missing[:5]}")

    def frame(self) -> pd.DataFrame:
        years = sorted(self.values)
        return pd.DataFrame({"year": years, "W": [self.values[y] for y in years]})


def load_wage_index(path, delimiter: str = ",") -> WageIndex:
    raw = pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=False)
    raw.columns = [c.strip() for c in raw.columns]
    if len(raw.columns) < 2:
        raise SchemaError("W", path)
    ycol = "year" if "year" in raw.columns else raw.columns[0]
    wcol = "W" if "W" in raw.columns else raw.columns[1]
    years = _parse_numeric(raw, ycol, ycol).astype(np.int64)
    w = _parse_numeric(raw, wcol, wcol)
    return WageIndex({int(y): float(v) for y, v in zip(years, w)})


class SizeCategory(str, enum.Enum):
    I1 = "I1"
    I2 = "I2"
    I3 = "I3"
    I4 = "I4"

    def __str__(self):
        return self.value


def categorize_transfer(amount: float, year: int,
                        index: WageIndex) -> Optional[SizeCategory]:
    """Size bin of a transfer relative to the national mean wage.

    Bins are (0, W/2], (W/2, W], (W, 2W] and (2W, inf): upper bounds are
    inclusive. Non-positive amounts have no category.
    """
    w = index[year]
    if not amount > 0:
        return None
    if 2.0 * amount <= w:
        return SizeCategory.I1
    if amount <= w:
        return SizeCategory.I2
    if amount <= 2.0 * w:
        return SizeCategory.I3
    return SizeCategory.I4


def parse_category(text) -> Optional[SizeCategory]:
    if text is None or isinstance(text, SizeCategory):
        return text
    text = str(text).strip()
    if text in ("", "all", "All", "none"):
        return None
    try:
        return SizeCategory(text.upper())
    except ValueError:
        raise ConfigError(f"unknown size category {text!r}") from None


# --------------------------------------------------------------------------
# Cohorts
# --------------------------------------------------------------------------


class Exclusion:
    BIRTH_YEAR = "birth_year_out_of_range"
    NO_TRANSFER = "no_transfer"
    MULTIPLE = "multiple_transfers"
    NO_DEATH = "no_qualifying_death"
    SELF_EMPLOYED = "ever_self_employed"

    ALL = (BIRTH_YEAR, NO_TRANSFER, MULTIPLE, NO_DEATH, SELF_EMPLOYED)


@dataclass(frozen=True)
class FilterSpec:
    birth_year_range: tuple = (1951, 1975)
    death_window: int = 3
    one_off: bool = True
    small_gift_allowance: bool = False
    death_set_selector: str = "parental"
    exclude_ever_self_employed: bool = False

    def __post_init__(self):
        lo, hi = self.birth_year_range
        if lo > hi:
            raise ConfigError(f"empty birth year range {self.birth_year_range}")
        if self.death_window < 0:
            raise ConfigError("death window must be non-negative")
        if self.death_set_selector not in ("parental", "relative"):
            raise ConfigError(
                f"death set selector must be parental or relative, "
                f"got {self.death_set_selector!r}")


COHORT_COLUMNS = ("person", "event_year", "death_year", "category",
                  "included", "exclusion_reason")


class CohortTable:
    """Person -> event year, size category and inclusion flag.

    Rows follow the panel's person order. ``event_year`` and ``death_year``
    are nullable integers; excluded persons carry an exclusion tag.
    """

    def __init__(self, frame: pd.DataFrame):
        missing = [c for c in COHORT_COLUMNS if c not in frame.columns]
        if missing:
            raise SchemaError(missing[0])
        if frame["person"].duplicated().any():
            raise PanelValidationError("cohort table lists a person twice")
        frame = frame.loc[:, list(COHORT_COLUMNS)].reset_index(drop=True)
        frame["event_year"] = frame["event_year"].astype("Int64")
        frame["death_year"] = frame["death_year"].astype("Int64")
        frame["category"] = frame["category"].fillna("").astype(str)
        frame["included"] = frame["included"].astype(bool)
        frame["exclusion_reason"] = frame["exclusion_reason"].fillna("").astype(str)
        self.frame = frame

    def __len__(self):
        return len(self.frame)

    def __eq__(self, other):
        return isinstance(other, CohortTable) and self.frame.equals(other.frame)

    def event_years(self, panel: PanelDataset,
                    category: Optional[SizeCategory] = None) -> np.ndarray:
        """Event year per panel person; 0 for persons outside the sample.

        The sample is included persons, optionally restricted to one size
        category.
        """
        fr = self.frame
        keep = fr["included"].to_numpy()
        if category is not None:
            keep &= (fr["category"] == str(category)).to_numpy()
        g = fr["event_year"].fillna(0).to_numpy(dtype=np.int64)
        g = np.where(keep, g, 0)
        lookup = dict(zip(fr["person"].tolist(), g.tolist()))
        return np.array([lookup.get(p, 0) for p in panel.persons.tolist()],
                        dtype=np.int64)

    def cohort_sizes(self, category: Optional[SizeCategory] = None) -> dict:
        fr = self.frame[self.frame["included"]]
        if category is not None:
            fr = fr[fr["category"] == str(category)]
        counts = fr.groupby("event_year").size()
        return {int(g): int(n) for g, n in counts.items()}

    def exclusion_report(self) -> pd.DataFrame:
        fr = self.frame
        rows = [("included", int(fr["included"].sum()))]
        for reason in Exclusion.ALL:
            rows.append((reason, int((fr["exclusion_reason"] == reason).sum())))
        rows.append(("total", len(fr)))
        return pd.DataFrame(rows, columns=["status", "count"])

    def to_csv(self, path, delimiter: str = ",") -> None:
        fr = self.frame.copy()
        fr["included"] = fr["included"].astype(int)
        write_table(fr, path, delimiter)

    @classmethod
    def from_csv(cls, path, delimiter: str = ",") -> "CohortTable":
        fr = pd.read_csv(path, sep=delimiter, keep_default_na=False, dtype=str)
        for col in COHORT_COLUMNS:
            if col not in fr.columns:
                raise SchemaError(col, path)
        fr["person"] = _coerce_ids(fr["person"])
        for col in ("event_year", "death_year"):
            fr[col] = pd.to_numeric(fr[col].replace("", None)).astype("Int64")
        fr["included"] = fr["included"].astype(int).astype(bool)
        return cls(fr)


def _nearest_death(year, deaths, window):
    best = None
    for d in sorted(deaths):
        gap = abs(year - d)
        if gap <= window and (best is None or gap < abs(year - best)):
            best = d
    return best


def assign_cohorts(panel: PanelDataset, index: WageIndex,
                   filt: FilterSpec = FilterSpec()) -> CohortTable:
    """Apply the sample filters and date each person's qualifying transfer.

    A transfer qualifies when some death year of the selected set lies within
    ``death_window`` years of it; the nearest death wins, earlier on ties.
    Under ``one_off`` a person with several transfers is excluded unless the
    small-gift allowance admits every extra transfer (each below W/2 of its
    own year, ratios summing to at most 1/2). With ``one_off`` off, the
    earliest qualifying transfer becomes the event.
    """
    index.check_covers(panel.first_year, panel.last_year)
    amounts = panel.fields["transfer_amount"]
    self_emp = panel.fields["self_employed"].any(axis=1)
    wages = np.array([index[y] for y in panel.years.tolist()])
    deaths_all = panel.death_years(filt.death_set_selector)
    lo, hi = filt.birth_year_range
    rows = []
    for i, person in enumerate(panel.persons.tolist()):
        b = int(panel.birth_year[i])
        event = death = None
        category = ""
        reason = ""
        transfers = np.flatnonzero(amounts[i] > 0)
        if not lo <= b <= hi:
            reason = Exclusion.BIRTH_YEAR
        elif len(transfers) == 0:
            reason = Exclusion.NO_TRANSFER
        else:
            candidates = transfers
            if len(transfers) > 1 and filt.one_off:
                candidates = None
                if filt.small_gift_allowance:
                    ratios = amounts[i, transfers] / wages[transfers]
                    small = ratios < 0.5
                    if (~small).sum() == 1 and ratios[small].sum() <= 0.5:
                        candidates = transfers[~small]
                if candidates is None:
                    reason = Exclusion.MULTIPLE
            if not reason:
                deaths = deaths_all[i]
                for j in candidates.tolist():
                    y = int(panel.years[j])
                    d = _nearest_death(y, deaths, filt.death_window)
                    if d is not None:
                        event, death = y, d
                        break
                if event is None:
                    reason = Exclusion.NO_DEATH
            if not reason and filt.exclude_ever_self_employed and self_emp[i]:
                reason = Exclusion.SELF_EMPLOYED
                event = death = None
        if event is not None:
            j = event - panel.first_year
            category = str(categorize_transfer(amounts[i, j], event, index))
        rows.append((person, event, death, category, not reason, reason))
    frame = pd.DataFrame(rows, columns=list(COHORT_COLUMNS))
    return CohortTable(frame)


# --------------------------------------------------------------------------
# Descriptive tables
# --------------------------------------------------------------------------

CATEGORY_LABELS = ("All", "I1", "I2", "I3", "I4")


def _representative_transfer(amount_row, wages):
    """Index of a person's largest transfer relative to W (earliest on ties)."""
    js = np.flatnonzero(amount_row > 0)
    if len(js) == 0:
        return None
    ratios = amount_row[js] / wages[js]
    return int(js[int(np.argmax(ratios))])


def death_proximity_table(panel: PanelDataset, index: WageIndex,
                          deltas: Sequence[int] = (0, 1, 3, 5, 7),
                          death_set: str = "parental") -> pd.DataFrame:
    """Share of recipients whose transfer lies within delta years of a death.

    Each recipient is represented by their largest transfer relative to the
    wage index. Rows are long format: one per (delta, category) with the
    recipient count, the count within the window, the percentage and the
    gain over the previous delta. Categories without recipients get NaN
    percentages and ``defined = False``.
    """
    index.check_covers(panel.first_year, panel.last_year)
    deltas = sorted(int(d) for d in deltas)
    if any(d < 0 for d in deltas):
        raise ConfigError("deltas must be non-negative")
    wages = np.array([index[y] for y in panel.years.tolist()])
    amounts = panel.fields["transfer_amount"]
    deaths = panel.death_years(death_set)
    gaps, cats = [], []
    for i in range(panel.n_persons):
        j = _representative_transfer(amounts[i], wages)
        if j is None:
            continue
        y = int(panel.years[j])
        gaps.append(min((abs(y - d) for d in deaths[i]), default=np.inf))
        cats.append(str(categorize_transfer(amounts[i, j], y, index)))
    gaps = np.asarray(gaps, dtype=float)
    cats = np.asarray(cats, dtype=object)

    rows = []
    for label in CATEGORY_LABELS:
        mask = np.ones(len(cats), bool) if label == "All" else cats == label
        n = int(mask.sum())
        prev = None
        for d in deltas:
            k = int((gaps[mask] <= d).sum())
            pct = 100.0 * k / n if n else np.nan
            gain = 0.0 if prev is None else pct - prev
            rows.append((d, label, n, k, pct, gain, n > 0))
            prev = pct
    return pd.DataFrame(rows, columns=["delta", "category", "n_recipients",
                                       "n_within", "percent", "gain", "defined"])


def _group_labels(grouping, cats, sex, age_at_event):
    if grouping == "category":
        return [("All", np.ones(len(cats), bool))] + [
            (c, cats == c) for c in CATEGORY_LABELS[1:]]
    if grouping == "sex":
        return [("All", np.ones(len(sex), bool)),
                ("sex=0", sex == 0), ("sex=1", sex == 1)]
    if grouping in ("age50", "age"):
        return [("All", np.ones(len(age_at_event), bool)),
                ("age<50", age_at_event < 50), ("age>=50", age_at_event >= 50)]
    raise ConfigError(f"unknown grouping {grouping!r}")


def sample_means(panel: PanelDataset, cohorts: CohortTable,
                 grouping: str = "category", at: str = "event_year",
                 ) -> pd.DataFrame:
    """Per-group means of every numeric field over included persons.

    ``at='event_year'`` evaluates each person at their own event year;
    ``at='full_period'`` averages over all person-years. Groups are by size
    category, sex, or age at the event (below 50 vs 50 and over); an
    ``All`` row is always first.
    """
    if at not in ("event_year", "full_period"):
        raise ConfigError(f"unknown evaluation point {at!r}")
    g = cohorts.event_years(panel)
    members = np.flatnonzero(g > 0)
    cat_of = dict(zip(cohorts.frame["person"].tolist(),
                      cohorts.frame["category"].tolist()))
    cats = np.asarray([cat_of[p] for p in panel.persons[members].tolist()],
                      dtype=object)
    cols = g[members] - panel.first_year
    age_at_event = panel.fields["age"][members, cols]
    sex = panel.sex[members]
    names = list(panel.fields)

    rows = []
    for label, mask in _group_labels(grouping, cats, sex, age_at_event):
        idx = members[mask]
        n = len(idx)
        row = {"group": label, "count": n,
               "event_year": g[idx].sum() / n if n else np.nan}
        for name in names:
            arr = panel.fields[name]
            if at == "event_year":
                vals = arr[idx, g[idx] - panel.first_year]
            else:
                vals = arr[idx].reshape(-1)
            row[name] = vals.sum() / len(vals) if len(vals) else np.nan
        rows.append(row)
    return pd.DataFrame(rows)
