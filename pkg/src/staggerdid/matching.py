"""Nearest-one propensity score matching baseline.

Recipients of a cohort window are matched, cohort by cohort, to persons who
received nothing over a surrounding clean window. The propensity model is a
logistic regression fitted by iteratively reweighted least squares on the
covariates observed a few years before the event.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit, log_expit

from .errors import ConfigError, EstimationError
from .ols import normal_p_value
from .panel import CohortTable, PanelDataset, parse_category

log = logging.getLogger(__name__)

POOLS = ("all_nonrecipients", "nonrecipients_with_death")
TRANSFORMS = ("ihs", "none")


@dataclass(frozen=True)
class MatchSpec:
    """Design of the matching comparison.

    Parameters
    ----------
    cohort_window : (int, int)
        Treated cohorts, inclusive.
    clean_before, clean_after : int
        Pool members have no transfer in
        ``[window start - clean_before, window end + clean_after]``.
    match_offset : int
        Covariates are taken at ``g - match_offset``.
    covariates : tuple of str
        Panel columns at the match year; ``name@-k`` reads the column ``k``
        years before the match year.
    pool : {"all_nonrecipients", "nonrecipients_with_death"}
        The second option keeps pool members with a death year (of the
        selected set) inside the cohort window.
    event_window : (int, int)
    caliper : float or None
        Maximum absolute score gap of a kept pair.
    replacement : bool
    outcome : str
    transform : {"ihs", "none"}
    category : size category filter for the treated.
    death_set : {"parental", "relative"}
    """

    cohort_window: tuple = (2000, 2004)
    clean_before: int = 6
    clean_after: int = 6
    match_offset: int = 3
    covariates: tuple = ("age", "sex", "wage")
    pool: str = "all_nonrecipients"
    event_window: tuple = (-6, 6)
    caliper: Optional[float] = None
    replacement: bool = True
    outcome: str = "wage"
    transform: str = "ihs"
    category: Optional[str] = None
    death_set: str = "parental"

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "category", parse_category(self.category))
        if self.cohort_window[0] > self.cohort_window[1]:
            raise ConfigError(f"empty cohort window {self.cohort_window}")
        if self.clean_before < 0 or self.clean_after < 0:
            raise ConfigError("clean-window offsets must be non-negative")
        if self.match_offset < 1:
            raise ConfigError("match offset must be positive")
        if self.pool not in POOLS:
            raise ConfigError(f"unknown control pool {self.pool!r}")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"unknown outcome transform {self.transform!r}")
        if self.event_window[0] > self.event_window[1]:
            raise ConfigError(f"empty event window {self.event_window}")
        if self.caliper is not None and self.caliper <= 0:
            raise ConfigError("caliper must be positive")
        if not self.covariates:
            raise ConfigError("matching needs at least one covariate")
        if self.death_set not in ("parental", "relative"):
            raise ConfigError(f"unknown death set {self.death_set!r}")

    def check_panel(self, years: tuple) -> None:
        lo, hi = self.cohort_window
        if lo - self.match_offset < years[0] or hi > years[1]:
            raise ConfigError(
                f"cohort window {self.cohort_window} with match offset "
                f"{self.match_offset} does not fit the panel {years}")


def ihs(x):
    """Inverse hyperbolic sine, ``log(x + sqrt(x^2 + 1))``."""
    return np.arcsinh(x)


# --------------------------------------------------------------------------
# Logistic propensity model
# --------------------------------------------------------------------------


@dataclass
class PropensityFit:
    """Logistic regression fitted by IRLS.

    ``coefficients`` starts with the intercept, followed by ``names``.
    ``loglik_path`` records the log-likelihood after every iteration
    (first entry: starting values).
    """

    coefficients: np.ndarray
    names: tuple
    converged: bool
    iterations: int
    loglik: float
    loglik_path: list = field(default_factory=list)

    def linear_predictor(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return self.coefficients[0] + X @ self.coefficients[1:]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return expit(self.linear_predictor(X))


def _loglik(eta, y):
    return float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))


def _check_separation(Xt, Xp, names):
    for j, name in enumerate(names):
        t, p = Xt[:, j], Xp[:, j]
        lo, hi = min(t.min(), p.min()), max(t.max(), p.max())
        if lo == hi:
            raise EstimationError(f"propensity covariate '{name}' is constant")
        if t.max() <= p.min() or t.min() >= p.max():
            raise EstimationError(
                f"perfect separation: covariate '{name}' separates treated "
                f"from pool")


def fit_propensity(X_treated: np.ndarray, X_pool: np.ndarray,
                   names: Optional[Sequence[str]] = None, max_iter: int = 25,
                   tol: float = 1e-8) -> PropensityFit:
    """Logistic MLE of treated (1) versus pool (0) membership.

    Newton-Raphson steps in IRLS form, halved until the log-likelihood does
    not fall, so the path is monotone. Stops when the largest coefficient
    change is below ``tol`` or after ``max_iter`` iterations (then flagged as
    not converged).

    Raises
    ------
    EstimationError
        On an empty group, a constant covariate or separation; the message
        names the covariate.
    """
    Xt = np.atleast_2d(np.asarray(X_treated, dtype=np.float64))
    Xp = np.atleast_2d(np.asarray(X_pool, dtype=np.float64))
    if len(Xt) == 0 or len(Xp) == 0:
        raise EstimationError("propensity model needs treated and pool persons")
    k = Xt.shape[1]
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(k))
    _check_separation(Xt, Xp, names)

    X = np.column_stack([np.ones(len(Xt) + len(Xp)), np.vstack([Xt, Xp])])
    y = np.concatenate([np.ones(len(Xt)), np.zeros(len(Xp))])
    # centre and scale internally; map back at the end
    mu = X[:, 1:].mean(0)
    sd = X[:, 1:].std(0)
    Z = X.copy()
    Z[:, 1:] = (X[:, 1:] - mu) / sd
    beta = np.zeros(k + 1)
    beta[0] = np.log(y.mean() / (1 - y.mean()))
    ll = _loglik(Z @ beta, y)
    path = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(Z @ beta)
        w = p * (1 - p)
        H = Z.T @ (Z * w[:, None])
        grad = Z.T @ (y - p)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise EstimationError("propensity design is singular") from None
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = _loglik(Z @ cand, y)
            if ll_new >= ll or t < 1e-12:
                break
            t /= 2
        if ll_new < ll:
            # no ascent possible along the Newton direction: at the optimum
            cand, ll_new = beta, ll
        change = np.max(np.abs(cand - beta))
        beta, ll = cand, ll_new
        path.append(ll)
        if change < tol:
            converged = True
            break
    slopes = beta[1:] / sd
    intercept = beta[0] - slopes @ mu
    coef = np.concatenate([[intercept], slopes])
    eta = X @ coef
    if np.max(np.abs(beta[1:])) > 25 or np.min(np.abs(eta)) > 30:
        worst = names[int(np.argmax(np.abs(beta[1:])))]
        raise EstimationError(
            f"perfect separation: covariate '{worst}' drives fitted "
            f"probabilities to 0 or 1")
    if not converged:
        log.warning("propensity IRLS did not converge in %d iterations", max_iter)
    return PropensityFit(coef, names, converged, it, ll, path)


# --------------------------------------------------------------------------
# Matching
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Candidates:
    """Person ids with their covariate rows."""

    ids: np.ndarray
    X: np.ndarray


def match_scores(treated_scores, treated_ids, pool_scores, pool_ids,
                 caliper: Optional[float] = None, replacement: bool = True):
    """Nearest-one matching on scalar scores.

    Ties between equally distant pool members go to the smaller id. Without
    replacement treated persons are served in id order and each pool member
    is used once.

    Returns
    -------
    pairs : DataFrame
        ``treated, control, score_gap`` in treated-id order.
    n_dropped : int
        Pairs removed by the caliper (or unmatched without replacement).
    """
    ts = np.asarray(treated_scores, np.float64)
    tid = np.asarray(treated_ids)
    ps = np.asarray(pool_scores, np.float64)
    pid = np.asarray(pool_ids)
    if len(ps) == 0:
        raise EstimationError("empty control pool")
    order = np.lexsort((pid, ps))
    ps, pid = ps[order], pid[order]
    t_order = np.argsort(tid, kind="stable")
    ts, tid = ts[t_order], tid[t_order]

    if replacement:
        # first index of each run of equal scores holds the smallest id
        run_start = np.r_[0, np.flatnonzero(np.diff(ps) != 0) + 1]
        run_of = np.repeat(np.arange(len(run_start)),
                           np.diff(np.r_[run_start, len(ps)]))
        right = np.searchsorted(ps, ts, side="left")
        right_c = np.minimum(right, len(ps) - 1)
        left_c = np.maximum(right - 1, 0)
        right_c = run_start[run_of[right_c]]
        left_c = run_start[run_of[left_c]]
        dl = np.abs(ts - ps[left_c])
        dr = np.abs(ps[right_c] - ts)
        pick_left = (dl < dr) | ((dl == dr) & (pid[left_c] <= pid[right_c]))
        choice = np.where(pick_left, left_c, right_c)
        ctrl = pid[choice]
        gap = np.abs(ts - ps[choice])
        keep = np.ones(len(ts), bool)
    else:
        used = np.zeros(len(ps), bool)
        ctrl = np.empty(len(ts), dtype=pid.dtype)
        gap = np.full(len(ts), np.nan)
        keep = np.zeros(len(ts), bool)
        for i, x in enumerate(ts):
            avail = np.flatnonzero(~used)
            if len(avail) == 0:
                break
            d = np.abs(ps[avail] - x)
            j = avail[np.lexsort((pid[avail], d))[0]]
            used[j] = True
            ctrl[i], gap[i], keep[i] = pid[j], d[avail == j][0], True
    if caliper is not None:
        keep &= gap <= caliper
    pairs = pd.DataFrame({"treated": tid[keep], "control": ctrl[keep],
                          "score_gap": gap[keep]})
    return pairs, int((~keep).sum())


def nearest_one_match(fit: PropensityFit, treated: Candidates, pool: Candidates,
                      caliper: Optional[float] = None, replacement: bool = True):
    """Match every treated person to the pool member with the closest score.

    See :func:`match_scores` for the tie rule and return values.
    """
    return match_scores(fit.predict(treated.X), treated.ids,
                        fit.predict(pool.X), pool.ids, caliper, replacement)


# --------------------------------------------------------------------------
# Full design
# --------------------------------------------------------------------------


def _parse_covariate(name):
    base, _, lag = name.partition("@")
    if not lag:
        return base, 0
    try:
        k = int(lag)
    except ValueError:
        raise ConfigError(f"bad covariate lag in {name!r}") from None
    if k > 0:
        raise ConfigError(f"covariate {name!r} would look past the match year")
    return base, k


def covariate_matrix(panel: PanelDataset, rows: np.ndarray, year: int,
                     covariates: Sequence[str]) -> np.ndarray:
    cols = []
    for name in covariates:
        base, lag = _parse_covariate(name)
        j = panel.year_index(year + lag)
        cols.append(np.asarray(panel.column(base)[rows, j], dtype=np.float64))
    return np.column_stack(cols)


def control_pool(panel: PanelDataset, spec: MatchSpec) -> np.ndarray:
    """Row indices of clean non-recipients."""
    lo, hi = spec.cohort_window
    a = max(lo - spec.clean_before, panel.first_year)
    b = min(hi + spec.clean_after, panel.last_year)
    amounts = panel.column("transfer_amount")[:, panel.year_index(a):panel.year_index(b) + 1]
    clean = ~(amounts != 0).any(axis=1)
    if spec.pool == "nonrecipients_with_death":
        deaths = panel.death_years(spec.death_set)
        clean &= np.array([any(lo <= d <= hi for d in ds) for ds in deaths])
    return np.flatnonzero(clean)


@dataclass
class MatchingResult:
    pairs: pd.DataFrame
    fits: dict
    balance: pd.DataFrame
    n_dropped: int
    spec: MatchSpec


def balance_report(panel: PanelDataset, pairs: pd.DataFrame,
                   pool_rows_by_cohort: dict, spec: MatchSpec) -> pd.DataFrame:
    """One row per covariate: treated, matched-control and pool means and the
    standardized differences before and after matching."""
    pos = panel.person_index()
    out = []
    for j, name in enumerate(spec.covariates):
        t_vals, c_vals, p_vals = [], [], []
        for g, grp in pairs.groupby("cohort"):
            year = int(g) - spec.match_offset
            tr = np.array([pos[p] for p in grp["treated"]])
            cr = np.array([pos[p] for p in grp["control"]])
            t_vals.append(covariate_matrix(panel, tr, year, [name])[:, 0])
            c_vals.append(covariate_matrix(panel, cr, year, [name])[:, 0])
            p_vals.append(covariate_matrix(panel, pool_rows_by_cohort[int(g)],
                                           year, [name])[:, 0])
        t = np.concatenate(t_vals) if t_vals else np.zeros(0)
        c = np.concatenate(c_vals) if c_vals else np.zeros(0)
        p = np.concatenate(p_vals) if p_vals else np.zeros(0)

        def sdiff(a, b):
            if len(a) < 2 or len(b) < 2:
                return np.nan
            s = np.sqrt((a.var(ddof=1) + b.var(ddof=1)) / 2)
            return (a.mean() - b.mean()) / s if s > 0 else 0.0

        out.append((name, t.mean() if len(t) else np.nan,
                    c.mean() if len(c) else np.nan,
                    p.mean() if len(p) else np.nan,
                    sdiff(t, p), sdiff(t, c)))
    return pd.DataFrame(out, columns=["covariate", "mean_treated",
                                      "mean_matched", "mean_pool",
                                      "std_diff_before", "std_diff_after"])


def run_matching(panel: PanelDataset, cohorts: CohortTable,
                 spec: MatchSpec = MatchSpec()) -> MatchingResult:
    """Fit, match and check balance for every cohort in the window.

    Returns pairs with columns ``cohort, treated, control, score_gap``.
    """
    spec.check_panel((panel.first_year, panel.last_year))
    g = cohorts.event_years(panel, spec.category)
    pool_rows = control_pool(panel, spec)
    if len(pool_rows) == 0:
        raise EstimationError("empty control pool")
    lo, hi = spec.cohort_window
    frames, fits, dropped = [], {}, 0
    pools = {}
    for c in range(lo, hi + 1):
        tr = np.flatnonzero(g == c)
        if len(tr) == 0:
            continue
        year = c - spec.match_offset
        Xt = covariate_matrix(panel, tr, year, spec.covariates)
        Xp = covariate_matrix(panel, pool_rows, year, spec.covariates)
        fit = fit_propensity(Xt, Xp, spec.covariates)
        pairs, n_drop = nearest_one_match(
            fit, Candidates(panel.persons[tr], Xt),
            Candidates(panel.persons[pool_rows], Xp),
            spec.caliper, spec.replacement)
        pairs.insert(0, "cohort", c)
        frames.append(pairs)
        fits[c] = fit
        pools[c] = pool_rows
        dropped += n_drop
    if not frames:
        raise EstimationError(f"no treated persons in cohorts {spec.cohort_window}")
    pairs = pd.concat(frames, ignore_index=True)
    if dropped:
        log.info("%d treated persons unmatched (caliper or exhausted pool)", dropped)
    balance = balance_report(panel, pairs, pools, spec)
    return MatchingResult(pairs, fits, balance, dropped, spec)


def matched_event_estimates(panel: PanelDataset, pairs: pd.DataFrame,
                            outcome: str = "wage", transform: str = "ihs",
                            window: tuple = (-6, 6)) -> pd.DataFrame:
    """Mean treated-minus-control difference of the transformed outcome by s.

    ``pairs`` needs ``cohort, treated, control``. The SE treats pairs as
    independent (sd / sqrt(n)), ignoring reuse of controls. Pairs whose year
    ``cohort + s`` falls outside the panel are dropped at that s and counted.

    Returns
    -------
    DataFrame
        ``s, estimate, se, p_value, n_pairs, n_dropped``.
    """
    if len(pairs) == 0:
        raise EstimationError("no matched pairs")
    if transform not in TRANSFORMS:
        raise ConfigError(f"unknown outcome transform {transform!r}")
    f = ihs if transform == "ihs" else (lambda v: v)
    pos = panel.person_index()
    tr = np.array([pos[p] for p in pairs["treated"]])
    cr = np.array([pos[p] for p in pairs["control"]])
    coh = pairs["cohort"].to_numpy(np.int64)
    y = panel.column(outcome)
    rows = []
    for s in range(window[0], window[1] + 1):
        j = coh + s - panel.first_year
        ok = (j >= 0) & (j < panel.n_years)
        d = f(y[tr[ok], j[ok]]) - f(y[cr[ok], j[ok]])
        n = len(d)
        est = float(d.mean()) if n else np.nan
        se = float(d.std(ddof=1) / np.sqrt(n)) if n > 1 else np.nan
        rows.append((s, est, se, normal_p_value(est, se), n, int((~ok).sum())))
    return pd.DataFrame(rows, columns=["s", "estimate", "se", "p_value",
                                       "n_pairs", "n_dropped"])
