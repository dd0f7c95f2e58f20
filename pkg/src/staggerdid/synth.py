"""Synthetic staggered-adoption panels with known cohort-time effects.

Untreated earnings follow ``base + person effect + year effect + f(age) +
observable effects + noise``; the effect ``tau(g, s)`` switches on at
``s = -anticipation``. Every recipient gets one transfer in their cohort year
and a parental death placed so that the default cohort filters recover the
intended cohort exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import pandas as pd

from .errors import ConfigError
from .panel import (
    COHORT_COLUMNS,
    CohortTable,
    PanelDataset,
    WageIndex,
    categorize_transfer,
)

# transfer size as a multiple of W_t, one representative value per bin
CATEGORY_MULTIPLE = {"I1": 0.3, "I2": 0.75, "I3": 1.5, "I4": 3.0}


@dataclass(frozen=True)
class EffectFamily:
    """Parametric tau(g, s).

    ``level * (1 + cohort_slope * (g - g_first)) * exp(-decay * max(s, 0))``
    for ``s >= onset`` and zero before. ``g_first`` is the earliest cohort.
    """

    level: float = 0.0
    onset: int = 0
    cohort_slope: float = 0.0
    decay: float = 0.0

    def __call__(self, g: int, s: int, g_first: int) -> float:
        if s < self.onset:
            return 0.0
        scale = 1.0 + self.cohort_slope * (g - g_first)
        return self.level * scale * math.exp(-self.decay * max(s, 0))


@dataclass(frozen=True)
class DgpConfig:
    """Data-generating process for :func:`simulate_panel`.

    Parameters
    ----------
    years : (int, int)
        Inclusive panel range.
    cohorts : mapping of int to int
        Cohort year -> number of recipients.
    never_treated : int
        Persons without any transfer.
    tau : EffectFamily or mapping
        Either a parametric family or an explicit ``{(g, s): tau}`` table that
        must cover every treated (g, s).
    anticipation : int
        Effects start at ``s = -anticipation`` (tau evaluated there).
    birth_years : (int, int)
        Birth years drawn uniformly; age at the event follows.
    age_peak, age_curvature : float
        Concave age profile ``-curvature * (age - peak)^2`` on integer ages.
    person_sd, noise_sd : float
        Person effect and idiosyncratic noise standard deviations.
    year_trend : float
        Linear year effect per year; ``year_sd`` adds seeded year shocks.
    base : float
        Mean earnings level.
    sex_effect, education_effect : float
        Earnings shift per unit of the observables.
    selection_sex, selection_education : float
        Logit slopes of recipient status on the observables; implemented by
        exponential tilting of the recipients' covariate distribution, which
        yields exactly this logistic propensity against the never-treated.
    category : str
        Size bin of every transfer.
    wage_index_level, wage_index_growth : float
        W_t = level * (1 + growth)^(t - first).
    death_offset : int
        Parental death placed at ``event + death_offset``.
    never_treated_death_share : float
        Share of never-treated persons given a parental death year.
    business_share, business_mean : float
        Person-year probability and mean of non-zero business income.
    seed : int
    """

    years: tuple = (1993, 2017)
    cohorts: Mapping = field(default_factory=lambda: {g: 100 for g in range(1996, 2018)})
    never_treated: int = 0
    tau: object = field(default_factory=EffectFamily)
    anticipation: int = 0
    birth_years: tuple = (1951, 1975)
    age_peak: float = 50.0
    age_curvature: float = 0.1
    person_sd: float = 50.0
    noise_sd: float = 20.0
    year_trend: float = 3.0
    year_sd: float = 0.0
    base: float = 400.0
    sex_effect: float = 30.0
    education_effect: float = 10.0
    selection_sex: float = 0.0
    selection_education: float = 0.0
    category: str = "I4"
    wage_index_level: float = 300.0
    wage_index_growth: float = 0.02
    death_offset: int = 0
    never_treated_death_share: float = 0.0
    business_share: float = 0.0
    business_mean: float = 50.0
    seed: int = 0

    def __post_init__(self):
        first, last = self.years
        if first > last:
            raise ConfigError(f"empty year range {self.years}")
        for g, n in self.cohorts.items():
            if n < 1:
                raise ConfigError(f"cohort {g} must have at least one person")
            if not first <= g <= last:
                raise ConfigError(f"cohort {g} outside year range {self.years}")
        if self.noise_sd < 0 or self.person_sd < 0 or self.year_sd < 0:
            raise ConfigError("standard deviations must be non-negative")
        if self.never_treated < 0 or self.anticipation < 0:
            raise ConfigError("never_treated and anticipation must be >= 0")
        if self.category not in CATEGORY_MULTIPLE:
            raise ConfigError(f"unknown category {self.category!r}")
        lo, hi = self.birth_years
        if lo > hi:
            raise ConfigError(f"empty birth year range {self.birth_years}")

    def wage_index(self) -> WageIndex:
        first, last = self.years
        return WageIndex({y: self.wage_index_level
                          * (1 + self.wage_index_growth) ** (y - first)
                          for y in range(first, last + 1)})

    def effect(self, g: int, s: int) -> float:
        if isinstance(self.tau, EffectFamily):
            return self.tau(g, s, min(self.cohorts))
        try:
            return float(self.tau[(g, s)])
        except KeyError:
            raise ConfigError(f"tau undefined for treated cell (g={g}, s={s})") from None


@dataclass
class Simulation:
    panel: PanelDataset
    cohorts: CohortTable
    truth: dict
    wage_index: WageIndex

    def truth_frame(self) -> pd.DataFrame:
        rows = sorted((g, s, tau) for (g, s), tau in self.truth.items())
        return pd.DataFrame(rows, columns=["g", "s", "tau"])


def _age_profile(age, peak, curvature):
    return -curvature * (age - peak) ** 2


def _tilted_cdf(values, base_probs, slope):
    """CDF of ``base_probs`` tilted by exp(slope * value)."""
    p = np.asarray(base_probs, float) * np.exp(slope * np.asarray(values, float))
    return np.cumsum(p / p.sum())


def _draw(rng, values, cdf):
    k = int(np.searchsorted(cdf, rng.random(), side="right"))
    return values[min(k, len(values) - 1)]


EDUCATION_LEVELS = np.arange(9)
EDUCATION_BASE = np.array([0.02, 0.03, 0.15, 0.1, 0.3, 0.1, 0.15, 0.1, 0.05])


def simulate_panel(config: DgpConfig) -> Simulation:
    """Draw a panel, its cohort table and the true tau(g, s) table.

    Person ``k`` (0-based, recipients first by cohort, then never-treated)
    gets id ``k + 1`` and an independent random stream seeded by
    ``(seed, k)``, so any subset of persons can be regenerated alone.
    The truth table covers every (g, s) observed in the panel, with zeros
    before the effect switches on.
    """
    first, last = config.years
    years = np.arange(first, last + 1)
    T = len(years)
    index = config.wage_index()

    assign = []
    for g in sorted(config.cohorts):
        assign += [g] * int(config.cohorts[g])
    assign += [0] * config.never_treated
    P = len(assign)
    g_arr = np.asarray(assign, dtype=np.int64)

    year_rng = np.random.default_rng([config.seed, 2**31 - 1])
    year_effect = config.year_trend * (years - first)
    if config.year_sd > 0:
        year_effect = year_effect + year_rng.normal(0, config.year_sd, T)

    tau_cache = {}
    truth = {}
    for g in sorted(config.cohorts):
        for y in years.tolist():
            s = y - g
            if y >= g - config.anticipation:
                tau_cache[(g, s)] = config.effect(g, s)
            truth[(g, s)] = tau_cache.get((g, s), 0.0)

    effect_path = {g: np.array([tau_cache.get((g, int(y) - g), 0.0) for y in years])
                   for g in config.cohorts}
    sex_values, edu_values = np.array([0.0, 1.0]), EDUCATION_LEVELS.astype(float)
    cdfs = {}
    for treated in (False, True):
        cdfs[treated] = (
            _tilted_cdf(sex_values, [0.5, 0.5],
                        config.selection_sex if treated else 0.0),
            _tilted_cdf(edu_values, EDUCATION_BASE,
                        config.selection_education if treated else 0.0))

    birth = np.empty(P, np.int64)
    sex = np.empty(P)
    edu = np.empty(P)
    wage = np.empty((P, T))
    business = np.zeros((P, T))
    transfer = np.zeros((P, T))
    parent_deaths = []
    lo, hi = config.birth_years
    for k in range(P):
        rng = np.random.default_rng([config.seed, k])
        g = int(g_arr[k])
        treated = g > 0
        birth[k] = rng.integers(lo, hi + 1)
        sex_cdf, edu_cdf = cdfs[treated]
        sex[k] = _draw(rng, sex_values, sex_cdf)
        edu[k] = _draw(rng, edu_values, edu_cdf)
        alpha = rng.normal(0, config.person_sd) if config.person_sd else 0.0
        noise = rng.normal(0, config.noise_sd, T) if config.noise_sd else np.zeros(T)
        age = years - birth[k]
        y0 = (config.base + alpha + year_effect
              + _age_profile(age, config.age_peak, config.age_curvature)
              + config.sex_effect * sex[k]
              + config.education_effect * (edu[k] - 4) + noise)
        if treated:
            y0 = y0 + effect_path[g]
            j = g - first
            transfer[k, j] = CATEGORY_MULTIPLE[config.category] * index[g]
            parent_deaths.append(frozenset({g + config.death_offset}))
        else:
            if rng.random() < config.never_treated_death_share:
                parent_deaths.append(frozenset({int(rng.integers(first, last + 1))}))
            else:
                parent_deaths.append(frozenset())
        if config.business_share > 0:
            on = rng.random(T) < config.business_share
            business[k] = np.where(on, rng.exponential(config.business_mean, T), 0.0)
        wage[k] = y0

    fields = {
        "wage": wage,
        "business_income": business,
        "occupational_income": wage + business,
        "self_employed": (business != 0).astype(float),
        "age": (years[None, :] - birth[:, None]).astype(float),
        "sex": np.repeat(sex[:, None], T, axis=1),
        "birth_year": np.repeat(birth[:, None].astype(float), T, axis=1),
        "education_level": np.repeat(edu[:, None], T, axis=1),
        "transfer_amount": transfer,
    }
    persons = np.arange(1, P + 1, dtype=np.int64)
    panel = PanelDataset(
        persons=persons, years=years, fields=fields,
        parent_death_years=tuple(parent_deaths),
        relative_death_years=tuple(frozenset() for _ in range(P)),
    )

    rows = []
    for k in range(P):
        g = int(g_arr[k])
        if g:
            cat = str(categorize_transfer(transfer[k, g - first], g, index))
            rows.append((k + 1, g, g + config.death_offset, cat, True, ""))
        else:
            rows.append((k + 1, None, None, "", False, "no_transfer"))
    cohorts = CohortTable(pd.DataFrame(rows, columns=list(COHORT_COLUMNS)))
    return Simulation(panel, cohorts, truth, index)


def true_att(truth: Mapping, scheme, cohort_sizes: Mapping,
             support: Optional[Mapping] = None) -> dict:
    """The event-time estimand: the aggregation weights applied to tau.

    ``support`` maps (g, s) to whether the cell is estimable; by default
    every truth entry of a cohort in ``cohort_sizes`` counts.
    """
    from .aggregate import event_time_weights

    if support is None:
        support = {(g, s): True for (g, s) in truth if g in cohort_sizes}
    weights = event_time_weights(support, cohort_sizes, scheme)
    out = {}
    for s, w in weights.items():
        out[s] = float(sum(wg * truth[(g, s)] for g, wg in w.items()))
    return out


def parse_effect(text: str) -> EffectFamily:
    """Parse ``family:key=value,...`` effect strings.

    Families: ``zero``; ``step`` (``level``); ``decay`` (``level``,
    ``decay``); ``hetero`` (``level``, ``slope``, ``decay``). ``onset``
    applies to all.
    """
    text = text.strip()
    name, _, rest = text.partition(":")
    params = {}
    for part in filter(None, (p.strip() for p in rest.split(","))):
        key, _, value = part.partition("=")
        try:
            params[key.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"bad effect parameter {part!r}") from None
    allowed = {"zero": set(), "step": {"level"}, "decay": {"level", "decay"},
               "hetero": {"level", "slope", "decay"}}
    if name not in allowed:
        raise ConfigError(f"unknown effect family {name!r}")
    extra = set(params) - allowed[name] - {"onset"}
    if extra:
        raise ConfigError(f"effect family {name} takes no {sorted(extra)}")
    return EffectFamily(level=params.get("level", 0.0),
                        onset=int(params.get("onset", 0)),
                        cohort_slope=params.get("slope", 0.0),
                        decay=params.get("decay", 0.0))
