"""Treatment timing, not-yet-treated control sets and the cohort-year 2x2 cells.

Each cell (g, t) stacks the treated cohort g and its control cohorts at the
reference year g - r and at t, then regresses the outcome on an intercept, a
period indicator, a cohort indicator, their interaction and indicator
profiles of the covariates (age by default). The interaction coefficient is
the cell estimate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.linalg import solve_triangular

from .errors import ConfigError, EstimationError
from .ols import (
    inverse_gram,
    normal_p_value,
    priority_qr,
    small_sample_factor,
)
from .panel import CohortTable, PanelDataset, SizeCategory, parse_category

log = logging.getLogger(__name__)

TREATED = "treated"
UNTREATED = "untreated"
# design column order doubles as drop priority: the interaction must survive
BASE_COLUMNS = ("intercept", "period", "cohort", "interaction")
INTERACTION = 3


@dataclass(frozen=True)
class TreatmentSpec:
    """Estimator settings.

    Parameters
    ----------
    delta : int
        Anticipation years; a cohort-g person counts as treated from g - delta.
    ref_offset : int
        Reference period sits at g - ref_offset. Must exceed ``delta``.
    control_strategy : {"all", "nearest"}
        All not-yet-treated cohorts, or only those within ``nearest_n`` years
        after the treated cohort.
    nearest_n : int
    category : SizeCategory or None
        Restrict treated and control cohorts to one size category.
    covariates : tuple of str
        Panel columns entered as one indicator per observed value.
    """

    delta: int = 2
    ref_offset: int = 3
    control_strategy: str = "all"
    nearest_n: int = 10
    category: Optional[SizeCategory] = None
    covariates: tuple = ("age",)

    def __post_init__(self):
        object.__setattr__(self, "category", parse_category(self.category))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.delta < 0:
            raise ConfigError("anticipation delta must be non-negative")
        if self.ref_offset <= self.delta:
            raise ConfigError(
                f"reference offset r={self.ref_offset} must exceed the "
                f"anticipation delta={self.delta}")
        if self.control_strategy not in ("all", "nearest"):
            raise ConfigError(
                f"unknown control strategy {self.control_strategy!r}")
        if self.control_strategy == "nearest" and self.nearest_n < 1:
            raise ConfigError("nearest_n must be at least 1")

    @property
    def reference(self) -> int:
        """Relative event time of the reference period."""
        return -self.ref_offset


class CellIndex(NamedTuple):
    g: int
    t: int

    @property
    def s(self) -> int:
        return self.t - self.g


@dataclass(frozen=True)
class CellEstimate:
    cell: CellIndex
    beta: float
    se: float
    p_value: float
    n_treated: int
    n_control: int
    dropped_columns: int = 0

    @property
    def degenerate(self) -> bool:
        """Zero standard error with a non-zero estimate."""
        return self.se == 0 and self.beta != 0


@dataclass(frozen=True)
class InestimableCell:
    cell: CellIndex
    reason: str


def treatment_status(g: int, t: int, spec: TreatmentSpec) -> str:
    return TREATED if t >= g - spec.delta else UNTREATED


def valid_cohort_range(panel_years: Sequence[int], spec: TreatmentSpec) -> tuple:
    """Treatment cohorts whose reference year is observed and whose controls
    stay clean through the last year."""
    first, last = panel_years[0], panel_years[-1]
    g_min = first + spec.ref_offset
    g_max = last - spec.delta - 1
    if g_min > g_max:
        raise ConfigError(
            f"window too short: cohorts [{g_min}, {g_max}] for years "
            f"[{first}, {last}]")
    return g_min, g_max


def control_cohorts(g: int, t: int, available: Sequence[int],
                    spec: TreatmentSpec) -> list:
    """Cohorts other than g untreated at both t and the reference year g - r.

    For leads (t < g - delta) cohort g itself passes the status test; it is
    the treated group and never its own control.
    """
    threshold = max(t, g - spec.ref_offset)
    out = [c for c in sorted(available) if c - spec.delta > threshold and c != g]
    if spec.control_strategy == "nearest":
        out = [c for c in out if g <= c <= g + spec.nearest_n]
    return out


def control_set(g: int, t: int, cohorts: CohortTable,
                spec: TreatmentSpec) -> set:
    """Persons serving as not-yet-treated controls for cell (g, t).

    Persons without an event are never used. An empty set means the cell is
    inestimable.
    """
    fr = cohorts.frame[cohorts.frame["included"]]
    if spec.category is not None:
        fr = fr[fr["category"] == str(spec.category)]
    available = sorted(int(c) for c in fr["event_year"].dropna().unique())
    keep = control_cohorts(g, t, available, spec)
    return set(fr.loc[fr["event_year"].isin(keep), "person"].tolist())


# --------------------------------------------------------------------------
# Estimation sample
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EstimationSample:
    """Panel rows of included persons (in the chosen category), wide form."""

    persons: np.ndarray
    event_year: np.ndarray
    birth_year: np.ndarray
    outcome: np.ndarray
    covariates: dict
    first_year: int
    last_year: int

    @property
    def cohorts(self) -> list:
        return sorted(set(self.event_year.tolist()))

    def cohort_sizes(self) -> dict:
        g, n = np.unique(self.event_year, return_counts=True)
        return {int(a): int(b) for a, b in zip(g, n)}


def prepare_sample(panel: PanelDataset, cohorts: CohortTable,
                   spec: TreatmentSpec, outcome: str = "wage") -> EstimationSample:
    g = cohorts.event_years(panel, spec.category)
    rows = np.flatnonzero(g > 0)
    covs = {name: panel.column(name)[rows] for name in spec.covariates}
    return EstimationSample(
        persons=panel.persons[rows],
        event_year=g[rows],
        birth_year=panel.birth_year[rows].astype(np.int64),
        outcome=np.ascontiguousarray(panel.column(outcome)[rows]),
        covariates=covs,
        first_year=panel.first_year,
        last_year=panel.last_year,
    )


def _check_cell(sample: EstimationSample, cell: CellIndex, spec: TreatmentSpec):
    g, t = cell
    ref = g - spec.ref_offset
    if t == ref:
        raise EstimationError(f"cell {tuple(cell)} is the reference period")
    for year in (t, ref):
        if not sample.first_year <= year <= sample.last_year:
            raise EstimationError(
                f"cell {tuple(cell)}: year {year} outside the panel")
    return ref


def _cell_members(sample, cell, spec):
    g, t = cell
    ctrl = control_cohorts(g, t, sample.cohorts, spec)
    treated = np.flatnonzero(sample.event_year == g)
    control = np.flatnonzero(np.isin(sample.event_year, ctrl))
    return treated, control


def _indicator_codes(values):
    """Map covariate values to codes 0..k-1 (sorted, lowest = baseline)."""
    uniq, codes = np.unique(values, return_inverse=True)
    return uniq, codes


def _cell_regression(sample: EstimationSample, cell: CellIndex,
                     spec: TreatmentSpec, weights: Optional[np.ndarray] = None,
                     with_se: bool = True):
    """Weighted compressed least squares for one cell.

    Observations sharing (period, cohort indicator, covariate values) have
    identical design rows, so the regression runs on the distinct rows with
    their counts as frequency weights; the normal equations are those of the
    full stacked regression.
    """
    ref = _check_cell(sample, cell, spec)
    treated, control = _cell_members(sample, cell, spec)
    if weights is not None:
        treated = treated[weights[treated] > 0]
        control = control[weights[control] > 0]
    if len(treated) == 0:
        return None, "empty treated cohort"
    if len(control) == 0:
        return None, "empty control set"

    idx = np.concatenate([treated, control])
    m = len(idx)
    jr = ref - sample.first_year
    jt = cell.t - sample.first_year
    w = np.ones(m) if weights is None else weights[idx].astype(np.float64)
    treat = np.concatenate([np.ones(len(treated), np.int64),
                            np.zeros(len(control), np.int64)])
    y = np.concatenate([sample.outcome[idx, jr], sample.outcome[idx, jt]])
    period = np.repeat([0, 1], m)
    grp = np.tile(treat, 2)
    key = period * 2 + grp
    levels = []
    for name in spec.covariates:
        arr = sample.covariates[name]
        vals = np.concatenate([arr[idx, jr], arr[idx, jt]])
        uniq, codes = _indicator_codes(vals)
        key = key * len(uniq) + codes
        levels.append((name, uniq, codes))
    ukey, inv = np.unique(key, return_inverse=True)
    ww = np.tile(w, 2)
    counts = np.bincount(inv, weights=ww)
    sums = np.bincount(inv, weights=ww * y)

    first = np.zeros(len(ukey), np.int64)
    first[inv[::-1]] = np.arange(len(inv))[::-1]
    cols = [np.ones(len(ukey)), period[first].astype(float),
            grp[first].astype(float), (period[first] * grp[first]).astype(float)]
    names = list(BASE_COLUMNS)
    for name, uniq, codes in levels:
        c = codes[first]
        for level in range(1, len(uniq)):
            cols.append((c == level).astype(float))
            names.append(f"{name}={uniq[level]:g}")
    Xu = np.column_stack(cols)
    sw = np.sqrt(counts)
    kept, Q, R = priority_qr(Xu * sw[:, None])
    if INTERACTION not in kept:
        raise EstimationError(
            f"cell (g={cell.g}, t={cell.t}): interaction term is collinear "
            f"with the covariate profile")
    coef = solve_triangular(R, Q.T @ (sums / sw))
    pos = kept.index(INTERACTION)
    beta = float(coef[pos])
    info = dict(n_treated=len(treated), n_control=len(control),
                dropped=Xu.shape[1] - len(kept))
    if not with_se:
        return beta, info

    a = inverse_gram(R)[:, pos]
    h = Xu[:, kept] @ a
    fitted = Xu[:, kept] @ coef
    score = (y - fitted[inv]) * h[inv]
    per_person = score[:m] + score[m:]
    factor = small_sample_factor(m, 2 * m, len(kept))
    se = float(np.sqrt(factor * (per_person @ per_person)))
    info["se"] = se
    return beta, info


def _estimate(sample, cell, spec):
    beta, info = _cell_regression(sample, cell, spec)
    if beta is None:
        raise EstimationError(f"cell (g={cell.g}, t={cell.t}): {info}")
    se = info["se"]
    return CellEstimate(cell=cell, beta=beta, se=se,
                        p_value=normal_p_value(beta, se),
                        n_treated=info["n_treated"], n_control=info["n_control"],
                        dropped_columns=info["dropped"])


def estimate_cell(panel: PanelDataset, cohorts: CohortTable, cell,
                  spec: TreatmentSpec = TreatmentSpec(),
                  outcome: str = "wage") -> CellEstimate:
    """2x2 DiD estimate for one cohort-year cell with person-clustered SE.

    Raises
    ------
    EstimationError
        If the treated cohort or control set is empty, or the interaction
        column is collinear with the covariate indicators.
    """
    cell = CellIndex(*cell)
    sample = prepare_sample(panel, cohorts, spec, outcome)
    return _estimate(sample, cell, spec)


# --------------------------------------------------------------------------
# Full grid
# --------------------------------------------------------------------------


@dataclass
class CellGrid:
    """All cohort-year cells of one specification."""

    estimates: list
    inestimable: list
    spec: TreatmentSpec
    years: tuple
    cohort_range: tuple
    cohort_sizes: dict = field(default_factory=dict)

    def by_cell(self) -> dict:
        return {e.cell: e for e in self.estimates}

    def estimable(self) -> dict:
        out = {(e.cell.g, e.cell.s): True for e in self.estimates}
        out.update({(c.cell.g, c.cell.s): False for c in self.inestimable})
        return out

    def to_frame(self, display_years: Optional[tuple] = None,
                 alpha: Optional[float] = None) -> pd.DataFrame:
        """Heatmap rows (g, t, s, beta, se, p_value, n_treated, n_control,
        estimable).

        Covers every treatment cohort and every year in ``display_years``
        (default: first valid cohort through the last panel year). Reference
        cells are listed with ``estimable = 0``. With ``alpha`` set, betas
        with p >= alpha are zeroed (significance mask).
        """
        g_lo, g_hi = self.cohort_range
        if display_years is None:
            display_years = (g_lo, self.years[1])
        est = self.by_cell()
        rows = []
        for g in range(g_lo, g_hi + 1):
            for t in range(display_years[0], display_years[1] + 1):
                e = est.get(CellIndex(g, t))
                if e is None:
                    rows.append((g, t, t - g, np.nan, np.nan, np.nan, 0, 0, 0))
                    continue
                beta = e.beta
                if alpha is not None and not e.p_value < alpha:
                    beta = 0.0
                rows.append((g, t, t - g, beta, e.se, e.p_value,
                             e.n_treated, e.n_control, 1))
        return pd.DataFrame(rows, columns=[
            "g", "t", "s", "beta", "se", "p_value", "n_treated", "n_control",
            "estimable"])

    def display_matrix(self, display_years: Optional[tuple] = None) -> pd.DataFrame:
        fr = self.to_frame(display_years)
        return fr.pivot(index="g", columns="t", values="beta")


def candidate_cells(years: tuple, spec: TreatmentSpec) -> list:
    g_lo, g_hi = valid_cohort_range(years, spec)
    out = []
    for g in range(g_lo, g_hi + 1):
        for t in range(years[0], years[1] + 1):
            if t != g - spec.ref_offset:
                out.append(CellIndex(g, t))
    return out


def _estimate_chunk(sample, cells, spec):
    out = []
    for cell in cells:
        try:
            beta, info = _cell_regression(sample, cell, spec)
        except EstimationError as exc:
            out.append(InestimableCell(cell, str(exc)))
            continue
        if beta is None:
            out.append(InestimableCell(cell, info))
            continue
        out.append(CellEstimate(
            cell=cell, beta=beta, se=info["se"],
            p_value=normal_p_value(beta, info["se"]),
            n_treated=info["n_treated"], n_control=info["n_control"],
            dropped_columns=info["dropped"]))
    return out


def estimate_all_cells(panel: PanelDataset, cohorts: CohortTable,
                       spec: TreatmentSpec = TreatmentSpec(),
                       outcome: str = "wage", workers: int = 1) -> CellGrid:
    """Every cell (g, t) with g in the valid cohort range and t != g - r.

    Cells with an empty treated cohort or control set, or a collinear
    interaction, are listed as inestimable with a reason. With ``workers``
    above one the cells are split into contiguous chunks evaluated by joblib
    processes; results keep (g, t) order and do not depend on the split.
    """
    years = (panel.first_year, panel.last_year)
    sample = prepare_sample(panel, cohorts, spec, outcome)
    cells = candidate_cells(years, spec)
    if workers > 1 and len(cells) > 1:
        from joblib import Parallel, delayed

        chunks = [c.tolist() for c in np.array_split(np.arange(len(cells)), workers)]
        parts = Parallel(n_jobs=workers)(
            delayed(_estimate_chunk)(sample, [cells[i] for i in idx], spec)
            for idx in chunks if idx)
        results = [r for part in parts for r in part]
    else:
        results = _estimate_chunk(sample, cells, spec)
    estimates = [r for r in results if isinstance(r, CellEstimate)]
    inestimable = [r for r in results if isinstance(r, InestimableCell)]
    return CellGrid(estimates, inestimable, spec, years,
                    valid_cohort_range(years, spec), sample.cohort_sizes())


# --------------------------------------------------------------------------
# Vectorised cell system (bootstrap workhorse)
# --------------------------------------------------------------------------


class CellSystem:
    """Interaction coefficients of every cell for arbitrary person weights.

    With no covariates the estimate is the difference of weighted group
    means. With the age profile the age indicators are absorbed analytically:
    the four (period, cohort) groups and the age factor form an additive
    two-way layout, so after sweeping out age each cell reduces to a 4x4
    system whose interaction contrast is the estimate. Both reductions give
    the same coefficient as the stacked regression. Other covariate sets fall
    back to the per-cell regression with weights.
    """

    def __init__(self, sample: EstimationSample, spec: TreatmentSpec,
                 cells: Optional[Sequence[CellIndex]] = None):
        self.sample = sample
        self.spec = spec
        years = (sample.first_year, sample.last_year)
        cells = list(cells) if cells is not None else candidate_cells(years, spec)
        self.cells = cells
        self.mode = {(): "means", ("age",): "age"}.get(spec.covariates, "general")

        cohorts = np.array(sample.cohorts, dtype=np.int64)
        births = np.unique(sample.birth_year)
        self.cohort_list = cohorts
        nc, nb = len(cohorts), len(births)
        ci = np.searchsorted(cohorts, sample.event_year)
        bi = np.searchsorted(births, sample.birth_year)
        P = len(sample.event_year)
        self._group = sparse.csr_matrix(
            (np.ones(P), (ci * nb + bi, np.arange(P))), shape=(nc * nb, P))
        self._nc, self._nb = nc, nb
        self._births = births

        kg, lo, hi, jt, jr = [], [], [], [], []
        for cell in cells:
            g, t = cell
            ref = g - spec.ref_offset
            ctrl = control_cohorts(g, t, cohorts.tolist(), spec)
            k = int(np.searchsorted(cohorts, g))
            has_g = k < nc and cohorts[k] == g
            kg.append(k if has_g else -1)
            if ctrl:
                lo.append(int(np.searchsorted(cohorts, ctrl[0])))
                hi.append(int(np.searchsorted(cohorts, ctrl[-1])) + 1)
            else:
                lo.append(0)
                hi.append(0)
            jt.append(t - sample.first_year)
            jr.append(ref - sample.first_year)
        self._kg = np.array(kg)
        self._lo, self._hi = np.array(lo), np.array(hi)
        self._jt, self._jr = np.array(jt), np.array(jr)
        T = sample.last_year - sample.first_year + 1
        self._n_age = T + nb - 1
        # age index of birth-year column k in year column j: j - k + nb - 1
        bk = np.arange(nb)
        self._age_t = self._jt[:, None] - bk[None, :] + nb - 1
        self._age_r = self._jr[:, None] - bk[None, :] + nb - 1

    def betas(self, weights: Optional[np.ndarray] = None) -> np.ndarray:
        """Cell estimates in ``self.cells`` order; NaN where inestimable."""
        if self.mode == "general":
            return self._betas_general(weights)
        sample = self.sample
        P = len(sample.event_year)
        w = np.ones(P) if weights is None else np.asarray(weights, np.float64)
        nc, nb = self._nc, self._nb
        NC = (self._group @ w).reshape(nc, nb)
        SC = (self._group @ (w[:, None] * sample.outcome)).reshape(nc, nb, -1)
        CN = np.concatenate([np.zeros((1, nb)), np.cumsum(NC, axis=0)])
        CS = np.concatenate([np.zeros((1,) + SC.shape[1:]), np.cumsum(SC, axis=0)])

        ok = self._kg >= 0
        kg = np.where(ok, self._kg, 0)
        n1 = np.where(ok[:, None], NC[kg], 0.0)
        s1t = np.where(ok[:, None], SC[kg, :, self._jt], 0.0)
        s1r = np.where(ok[:, None], SC[kg, :, self._jr], 0.0)
        n0 = CN[self._hi] - CN[self._lo]
        s0t = CS[self._hi, :, self._jt] - CS[self._lo, :, self._jt]
        s0r = CS[self._hi, :, self._jr] - CS[self._lo, :, self._jr]
        if self.mode == "means":
            return self._means(n1, n0, s1t, s1r, s0t, s0r)
        return self._age_absorbed(n1, n0, s1t, s1r, s0t, s0r)

    @staticmethod
    def _means(n1, n0, s1t, s1r, s0t, s0r):
        N1, N0 = n1.sum(1), n0.sum(1)
        out = np.full(len(N1), np.nan)
        ok = (N1 > 0) & (N0 > 0)
        out[ok] = ((s1t.sum(1)[ok] - s1r.sum(1)[ok]) / N1[ok]
                   - (s0t.sum(1)[ok] - s0r.sum(1)[ok]) / N0[ok])
        return out

    def _age_absorbed(self, n1, n0, s1t, s1r, s0t, s0r):
        K, A = len(self.cells), self._n_age
        rows = np.arange(K)[:, None]
        N4 = np.zeros((K, 4, A))
        S4 = np.zeros((K, 4, A))
        # group order: (ref, control), (ref, treated), (t, control), (t, treated)
        for c, (n, s, age) in enumerate(((n0, s0r, self._age_r),
                                         (n1, s1r, self._age_r),
                                         (n0, s0t, self._age_t),
                                         (n1, s1t, self._age_t))):
            N4[rows, c, age] = n
            S4[rows, c, age] = s
        n_age = N4.sum(1)
        s_age = S4.sum(1)
        inv_age = np.divide(1.0, n_age, out=np.zeros_like(n_age), where=n_age > 0)
        n_grp = N4.sum(2)
        s_grp = S4.sum(2)
        M = -np.einsum("kca,ka,kda->kcd", N4, inv_age, N4)
        M[:, np.arange(4), np.arange(4)] += n_grp
        r = s_grp - np.einsum("kca,ka->kc", N4, s_age * inv_age)

        out = np.full(K, np.nan)
        ok = (n_grp[:, 1] > 0) & (n_grp[:, 0] > 0)
        if not ok.any():
            return out
        Mp = np.linalg.pinv(M[ok], rcond=1e-10, hermitian=True)
        contrast = np.array([1.0, -1.0, -1.0, 1.0])
        theta = np.einsum("kcd,kd->kc", Mp, r[ok])
        proj = np.einsum("kcd,kde,e->kc", Mp, M[ok], contrast)
        estimable = np.abs(proj - contrast).max(1) <= 1e-8
        vals = theta @ contrast
        vals[~estimable] = np.nan
        out[ok] = vals
        return out

    def _betas_general(self, weights):
        out = np.full(len(self.cells), np.nan)
        for k, cell in enumerate(self.cells):
            try:
                beta, _ = _cell_regression(self.sample, cell, self.spec,
                                           weights=weights, with_se=False)
            except EstimationError:
                continue
            if beta is not None:
                out[k] = beta
        return out
