"""Dynamic two-way fixed-effects event study, kept as a comparator.

One pooled regression of the outcome on person and year effects (absorbed by
within-demeaning), event-time indicators and the same age indicators as the
cell regression. Already-treated cohorts act as implicit controls for later
ones, which is what biases the leads once effects differ across cohorts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from .aggregate import EventStudyCurve
from .errors import ConfigError, EstimationError
from .ols import inverse_gram, normal_p_value, priority_qr, small_sample_factor
from .panel import CohortTable, PanelDataset, parse_category

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TwfeSpec:
    """Settings of the dynamic TWFE comparator.

    Parameters
    ----------
    omitted : tuple of int
        Relative periods left out; at least two, since one omission leaves the
        linear event-time trend collinear with person and year effects.
    s_range : (int, int) or None
        Relative times with their own indicator; periods beyond the range are
        pooled into the end bins. None keeps every observed period.
    outcome : str
    covariates : tuple of str
        Indicator profiles, matching the cell regression's default.
    category : optional size category of the treated persons.
    include_never_treated : bool
        Add persons without a transfer as a never-treated group.
    """

    omitted: tuple = (-4, -3)
    s_range: Optional[tuple] = None
    outcome: str = "wage"
    covariates: tuple = ("age",)
    category: Optional[str] = None
    include_never_treated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "omitted", tuple(sorted(set(self.omitted))))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "category", parse_category(self.category))
        if len(self.omitted) < 2:
            raise ConfigError(
                "dynamic TWFE needs at least two omitted relative periods")
        if self.s_range is not None:
            lo, hi = self.s_range
            if lo > hi:
                raise ConfigError(f"empty relative-time range {self.s_range}")
            if not all(lo <= s <= hi for s in self.omitted):
                raise ConfigError("omitted periods must lie inside s_range")


def demean_two_way(values: np.ndarray, weights: Optional[np.ndarray] = None
                   ) -> np.ndarray:
    """Remove row and column effects from a balanced (rows, T, ...) array.

    With row weights (counts of identical persons) the result equals
    demeaning the expanded panel. The operation is a projection, so applying
    it twice changes nothing beyond rounding.
    """
    x = np.asarray(values, dtype=np.float64)
    w = np.ones(x.shape[0]) if weights is None else np.asarray(weights, np.float64)
    row = x.mean(axis=1, keepdims=True)
    col = np.tensordot(w, x, axes=(0, 0)) / w.sum()
    grand = col.mean(axis=0)
    return x - row - col[None] + grand


@dataclass
class TwfeResult:
    """Event-time coefficients keyed by s, with person-clustered SEs."""

    table: pd.DataFrame
    spec: TwfeSpec
    dropped_columns: int
    n_persons: int

    def coefficients(self) -> dict:
        t = self.table[~self.table["omitted"]]
        return {int(s): (float(b), float(se))
                for s, b, se in zip(t["s"], t["estimate"], t["se"])}

    def to_frame(self, z: float = 1.959963984540054) -> pd.DataFrame:
        """Event-plot rows tagged ``method=twfe`` with normal intervals."""
        t = self.table
        fr = pd.DataFrame({
            "s": t["s"],
            "estimate": t["estimate"],
            "ci_low": t["estimate"] - z * t["se"],
            "ci_high": t["estimate"] + z * t["se"],
            "n_cohorts": t["n_cohorts"],
            "n_persons": t["n_persons"],
            "scheme_tag": "twfe",
            "se": t["se"],
            "p_value": t["p_value"],
            "omitted": t["omitted"].astype(int),
            "method": "twfe",
        })
        return fr


def estimate_dynamic_twfe(panel: PanelDataset, cohorts: CohortTable,
                          spec: TwfeSpec = TwfeSpec()) -> TwfeResult:
    """Pooled dynamic TWFE regression.

    Regressors depend on a person only through (event year, birth year), so
    the demeaned design is built once per such group and year; the outcome
    is demeaned person by person. The fit equals the regression on the full
    person-year panel.

    Raises
    ------
    EstimationError
        If an event-time indicator is collinear with the fixed effects and
        age profile (the age-period-cohort identity).
    """
    g_all = cohorts.event_years(panel, spec.category)
    keep = g_all > 0
    if spec.include_never_treated:
        fr = cohorts.frame
        never = dict(zip(fr["person"].tolist(),
                         (fr["exclusion_reason"] == "no_transfer").tolist()))
        keep |= np.array([never.get(p, False) for p in panel.persons.tolist()])
    rows = np.flatnonzero(keep)
    if len(rows) == 0:
        raise EstimationError("no persons in the TWFE sample")
    g = g_all[rows]
    if not (g > 0).any():
        raise EstimationError("TWFE sample has no treated cohort")
    years = panel.years.astype(np.int64)
    T = len(years)
    y = np.asarray(panel.column(spec.outcome)[rows], dtype=np.float64)

    covs = [np.asarray(panel.column(c)[rows]) for c in spec.covariates]
    # persons with identical regressor rows share one group
    flat = np.column_stack([g[:, None].repeat(T, 1)] + covs) if covs else g[:, None]
    _, first_idx, inv = np.unique(flat, axis=0, return_index=True,
                                  return_inverse=True)
    inv = inv.ravel()
    counts = np.bincount(inv).astype(np.float64)
    n_groups = len(first_idx)
    g_grp = g[first_idx]

    s_grid = years[None, :] - g_grp[:, None]
    treated_grp = g_grp > 0
    observed = np.unique(s_grid[treated_grp])
    if spec.s_range is None:
        s_lo, s_hi = int(observed.min()), int(observed.max())
    else:
        s_lo, s_hi = spec.s_range
    s_bin = np.clip(s_grid, s_lo, s_hi)
    s_cols = [int(s) for s in np.unique(s_bin[treated_grp]) if s not in spec.omitted]
    missing = [s for s in spec.omitted if not (s_bin[treated_grp] == s).any()]
    if missing:
        raise ConfigError(f"omitted periods {missing} are not observed")

    cols, names = [], []
    for s in s_cols:
        cols.append(((s_bin == s) & treated_grp[:, None]).astype(np.float64))
        names.append(f"s={s}")
    for name, c in zip(spec.covariates, covs):
        cg = c[first_idx]
        levels = np.unique(cg)
        for lev in levels[1:]:
            cols.append((cg == lev).astype(np.float64))
            names.append(f"{name}={lev:g}")
    X = np.stack(cols, axis=2) if cols else np.zeros((n_groups, T, 0))
    Xd = demean_two_way(X, counts)
    yd = demean_two_way(y)

    # group-level normal equations: X'y sums person outcomes per group
    ysum = np.zeros((n_groups, T))
    np.add.at(ysum, inv, yd)
    sw = np.sqrt(counts)
    Xw = (Xd * sw[:, None, None]).reshape(n_groups * T, -1)
    kept, Q, R = priority_qr(Xw)
    n_event = len(s_cols)
    lost = [s_cols[j] for j in range(n_event) if j not in kept]
    if lost:
        raise EstimationError(
            f"event-time indicators {lost} are collinear with person and year "
            f"effects and the age profile (age = period - cohort identity); "
            f"omit more periods or restrict s_range")
    rhs = (ysum / sw[:, None]).reshape(-1)
    coef = np.linalg.solve(R, Q.T @ rhs) if len(kept) else np.zeros(0)

    Xk = Xd[:, :, kept]
    resid = yd - np.einsum("gtk,k->gt", Xk, coef)[inv]
    scores = np.einsum("itk,it->ik", Xk[inv], resid)
    meat = scores.T @ scores
    bread = inverse_gram(R)
    P = len(rows)
    factor = small_sample_factor(P, P * T, len(kept))
    cov = factor * bread @ meat @ bread

    sizes = {}
    for c in np.unique(g[g > 0]):
        sizes[int(c)] = int((g == c).sum())
    out = []
    for s in range(s_lo, s_hi + 1):
        contrib = [c for c in sizes if years[0] <= c + s <= years[-1]]
        n_c, n_p = len(contrib), sum(sizes[c] for c in contrib)
        if s in spec.omitted:
            out.append((s, 0.0, 0.0, np.nan, True, n_c, n_p))
        elif s in s_cols:
            j = kept.index(s_cols.index(s))
            b, se = float(coef[j]), float(np.sqrt(cov[j, j]))
            out.append((s, b, se, normal_p_value(b, se), False, n_c, n_p))
    table = pd.DataFrame(out, columns=["s", "estimate", "se", "p_value",
                                       "omitted", "n_cohorts", "n_persons"])
    return TwfeResult(table, spec, X.shape[2] - len(kept), P)


def _staggered_significant(row, alpha):
    if "boot_se" in row and np.isfinite(row.get("ci_low", np.nan)):
        return not (row["ci_low"] <= 0 <= row["ci_high"])
    return False


def compare_pretrends(twfe, staggered: EventStudyCurve, alpha: float = 0.05,
                      ) -> tuple:
    """Leads of both methods side by side.

    ``twfe`` is a :class:`TwfeResult` or a mapping ``s -> (coef, se)``. A
    staggered lead counts as significant when its percentile band excludes
    zero. Only leads present in both (excluding omitted and reference slots)
    are reported; a warning is logged when the ranges differ.

    Returns
    -------
    table : DataFrame
        ``s, twfe_estimate, twfe_se, twfe_p_value, twfe_significant,
        staggered_estimate, staggered_ci_low, staggered_ci_high,
        staggered_significant``.
    summary : dict
        ``max_abs_lead`` and ``n_significant`` per method.
    """
    coefs = twfe.coefficients() if isinstance(twfe, TwfeResult) else dict(twfe)
    t_leads = {s for s in coefs if s < 0}
    st = staggered.table
    st_rows = {int(r["s"]): r for _, r in st.iterrows()
               if r["s"] < 0 and r["supported"] and r["s"] != staggered.scheme.reference}
    common = sorted(t_leads & set(st_rows))
    if t_leads != set(st_rows):
        log.warning("lead ranges differ; comparing %d common leads", len(common))
    rows = []
    for s in common:
        b, se = coefs[s]
        p = normal_p_value(b, se)
        r = st_rows[s]
        rows.append((s, b, se, p, bool(p < alpha), float(r["estimate"]),
                     float(r["ci_low"]), float(r["ci_high"]),
                     _staggered_significant(r, alpha)))
    table = pd.DataFrame(rows, columns=[
        "s", "twfe_estimate", "twfe_se", "twfe_p_value", "twfe_significant",
        "staggered_estimate", "staggered_ci_low", "staggered_ci_high",
        "staggered_significant"])
    summary = {
        "twfe": {"max_abs_lead": float(table["twfe_estimate"].abs().max())
                 if len(table) else np.nan,
                 "n_significant": int(table["twfe_significant"].sum())},
        "staggered": {"max_abs_lead": float(table["staggered_estimate"].abs().max())
                      if len(table) else np.nan,
                      "n_significant": int(table["staggered_significant"].sum())},
    }
    return table, summary
