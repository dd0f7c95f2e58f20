"""Event-time aggregation of cohort-year cells.

Both schemes weight cohorts by their size. The unbalanced scheme averages at
each relative time ``s`` over whichever cohorts have an estimable cell there;
the balanced scheme fixes one cohort set that is estimable over a whole
horizon ``[a, b]`` so that the composition cannot drift with ``s``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, InputError

CURVE_COLUMNS = ("s", "estimate", "ci_low", "ci_high", "n_cohorts",
                 "n_persons", "scheme_tag")


@dataclass(frozen=True)
class AggregationScheme:
    """Which cohorts enter each relative event time.

    Parameters
    ----------
    kind : {"unbalanced", "balanced"}
    a, b : int
        Balanced horizon; required (and ``a <= 0 <= b``) when balanced.
    display_range : (int, int)
        Relative times reported by the unbalanced scheme.
    reference : int
        The normalized slot ``-r``; reported as exactly zero.
    """

    kind: str = "unbalanced"
    a: Optional[int] = None
    b: Optional[int] = None
    display_range: tuple = (-15, 15)
    reference: int = -3

    def __post_init__(self):
        if self.kind not in ("unbalanced", "balanced"):
            raise ConfigError(f"unknown aggregation scheme {self.kind!r}")
        lo, hi = self.display_range
        if lo > hi:
            raise ConfigError(f"empty display range {self.display_range}")
        if self.kind == "balanced":
            if self.a is None or self.b is None:
                raise ConfigError("balanced scheme needs a horizon (a, b)")
            if not self.a <= 0 <= self.b:
                raise ConfigError(
                    f"balanced horizon must satisfy a <= 0 <= b, got "
                    f"({self.a}, {self.b})")

    @property
    def tag(self) -> str:
        if self.kind == "balanced":
            return f"balanced({self.a},{self.b})"
        return "unbalanced"

    def horizon(self) -> range:
        """Relative times the curve reports."""
        if self.kind == "balanced":
            return range(self.a, self.b + 1)
        return range(self.display_range[0], self.display_range[1] + 1)

    def check_display(self, years: tuple) -> None:
        span = years[1] - years[0]
        lo, hi = self.horizon()[0], self.horizon()[-1]
        if lo < -span or hi > span:
            raise ConfigError(
                f"relative-time range [{lo}, {hi}] exceeds the panel span "
                f"[-{span}, {span}]")


def to_relative_time(cells: Sequence) -> dict:
    """Key cell estimates by (g, s) with s = t - g.

    Raises
    ------
    InputError
        If a (g, t) cell occurs twice.
    """
    out = {}
    for est in cells:
        g, t = est.cell
        key = (int(g), int(t - g))
        if key in out:
            raise InputError(f"duplicate cell (g={g}, t={t})")
        out[key] = est
    return out


def _beta(value) -> float:
    return float(getattr(value, "beta", value))


def balanced_cohort_set(estimable: Mapping, a: int, b: int,
                        reference: int = -3) -> list:
    """Cohorts with an estimable cell at every s in [a, b] except the reference.

    ``estimable`` maps (g, s) to a flag; missing keys count as not estimable.
    """
    if a > b:
        raise ConfigError(f"balanced horizon needs a <= b, got ({a}, {b})")
    cohorts = sorted({g for g, _ in estimable})
    need = [s for s in range(a, b + 1) if s != reference]
    keep = [g for g in cohorts if all(estimable.get((g, s), False) for s in need)]
    if not keep:
        raise ConfigError(f"no cohort is estimable over the whole horizon [{a}, {b}]")
    return keep


def event_time_weights(estimable: Mapping, cohort_sizes: Mapping,
                       scheme: AggregationScheme) -> dict:
    """Cohort weights ``N_g / N_s`` per relative time.

    Returns ``{s: {g: weight}}`` for every supported non-reference s of the
    scheme's horizon; the weights at each s sum to one. Cohorts without a
    positive size never contribute.
    """
    sizes = {int(g): float(n) for g, n in cohort_sizes.items() if n > 0}
    if scheme.kind == "balanced":
        fixed = [g for g in balanced_cohort_set(estimable, scheme.a, scheme.b,
                                                scheme.reference) if g in sizes]
        if not fixed:
            raise ConfigError(
                f"balanced set for [{scheme.a}, {scheme.b}] has no sized cohort")
    out = {}
    for s in scheme.horizon():
        if s == scheme.reference:
            continue
        if scheme.kind == "balanced":
            members = fixed
        else:
            members = sorted(g for (g, ss), ok in estimable.items()
                             if ss == s and ok and g in sizes)
        if not members:
            continue
        total = sum(sizes[g] for g in members)
        out[s] = {g: sizes[g] / total for g in members}
    return out


@dataclass
class EventStudyCurve:
    """Aggregated estimates by relative event time.

    ``table`` has one row per reported s with columns ``s, estimate,
    ci_low, ci_high, n_cohorts, n_persons, scheme_tag`` plus ``supported``
    and, after bootstrapping, ``boot_se``, ``n_draws`` and ``unstable``.
    Unsupported rows carry NaN estimates. ``cohort_sets`` lists the cohorts
    behind each s.
    """

    table: pd.DataFrame
    scheme: AggregationScheme
    cohort_sets: dict = field(default_factory=dict)
    draws: Optional[np.ndarray] = field(default=None, repr=False)

    def estimates(self) -> dict:
        t = self.table[self.table["supported"]]
        return dict(zip(t["s"].astype(int), t["estimate"].astype(float)))

    def row(self, s: int) -> pd.Series:
        hit = self.table[self.table["s"] == s]
        if hit.empty:
            raise KeyError(s)
        return hit.iloc[0]

    def fixed_cohorts(self) -> Optional[list]:
        """The balanced scheme's cohort set, or None for unbalanced."""
        if self.scheme.kind != "balanced":
            return None
        return sorted(next(iter(self.cohort_sets.values()), ()))

    def to_frame(self, method: Optional[str] = None) -> pd.DataFrame:
        fr = self.table.copy()
        fr["supported"] = fr["supported"].astype(int)
        if "unstable" in fr:
            fr["unstable"] = fr["unstable"].astype(int)
        if method is not None:
            fr["method"] = method
        return fr


def _curve(values: Mapping, cohort_sizes: Mapping, scheme: AggregationScheme,
           weights: dict) -> EventStudyCurve:
    sizes = {int(g): int(n) for g, n in cohort_sizes.items()}
    rows, sets = [], {}
    for s in scheme.horizon():
        if s == scheme.reference:
            if scheme.kind == "balanced":
                members = next(iter(weights.values())).keys() if weights else []
            else:
                members = {g for g, _ in values if g in sizes and sizes[g] > 0}
            members = sorted(members)
            sets[s] = tuple(members)
            rows.append((s, 0.0, 0.0, 0.0, len(members),
                         sum(sizes[g] for g in members), scheme.tag, True))
            continue
        w = weights.get(s)
        if not w:
            rows.append((s, np.nan, np.nan, np.nan, 0, 0, scheme.tag, False))
            continue
        est = sum(wg * _beta(values[(g, s)]) for g, wg in w.items())
        sets[s] = tuple(sorted(w))
        rows.append((s, float(est), np.nan, np.nan, len(w),
                     sum(sizes[g] for g in w), scheme.tag, True))
    table = pd.DataFrame(rows, columns=list(CURVE_COLUMNS) + ["supported"])
    return EventStudyCurve(table, scheme, sets)


def aggregate_unbalanced(cells_by_s: Mapping, cohort_sizes: Mapping,
                         display_range: tuple = (-15, 15),
                         reference: int = -3) -> EventStudyCurve:
    """Size-weighted mean over the cohorts estimable at each s.

    ``cells_by_s`` maps (g, s) to a cell estimate (or a bare number). An s
    without contributing cohorts is marked unsupported.
    """
    scheme = AggregationScheme("unbalanced", display_range=display_range,
                               reference=reference)
    support = {k: True for k in cells_by_s}
    weights = event_time_weights(support, cohort_sizes, scheme)
    return _curve(cells_by_s, cohort_sizes, scheme, weights)


def aggregate_balanced(cells_by_s: Mapping, cohort_sizes: Mapping, a: int,
                       b: int, reference: int = -3,
                       estimable: Optional[Mapping] = None) -> EventStudyCurve:
    """Size-weighted mean over one cohort set fixed across [a, b].

    ``estimable`` defaults to the keys of ``cells_by_s``.
    """
    scheme = AggregationScheme("balanced", a=a, b=b, reference=reference)
    support = {k: True for k in cells_by_s} if estimable is None else estimable
    weights = event_time_weights(support, cohort_sizes, scheme)
    return _curve(cells_by_s, cohort_sizes, scheme, weights)


def aggregate(cells_by_s: Mapping, cohort_sizes: Mapping,
              scheme: AggregationScheme) -> EventStudyCurve:
    if scheme.kind == "balanced":
        return aggregate_balanced(cells_by_s, cohort_sizes, scheme.a, scheme.b,
                                  scheme.reference)
    return aggregate_unbalanced(cells_by_s, cohort_sizes, scheme.display_range,
                                scheme.reference)


def weight_matrix(weights: Mapping, cells: Sequence, horizon: Sequence[int]):
    """Dense (len(horizon), len(cells)) matrix mapping cell betas to curve
    values; rows of unsupported or reference s are zero.

    ``cells`` lists (g, s) keys in the column order of the beta vectors.
    """
    col = {tuple(c): j for j, c in enumerate(cells)}
    W = np.zeros((len(horizon), len(cells)))
    for i, s in enumerate(horizon):
        for g, w in weights.get(s, {}).items():
            W[i, col[(g, s)]] = w
    return W
