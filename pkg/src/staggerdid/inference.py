"""Bootstrap bands for event-time curves and normal p-values for cells.

Replicates resample persons with replacement inside each cohort, so every
cohort keeps its size. Replicate ``b`` draws from its own generator seeded by
``(seed, b)``; serial and parallel runs therefore produce identical draws.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from joblib import Parallel, delayed

from .aggregate import (
    AggregationScheme,
    EventStudyCurve,
    _curve,
    event_time_weights,
    weight_matrix,
)
from .did import (
    CellGrid,
    CellSystem,
    TreatmentSpec,
    estimate_all_cells,
    prepare_sample,
)
from .errors import ConfigError
from .ols import normal_p_value

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BootstrapSpec:
    """Replicates, confidence level and seed of the person bootstrap."""

    B: int = 999
    level: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.B < 2:
            raise ConfigError(f"bootstrap needs B >= 2, got {self.B}")
        if not 0 < self.level < 1:
            raise ConfigError(f"confidence level must lie in (0, 1), got {self.level}")


def cell_p_value(cell) -> tuple:
    """Two-sided normal p-value of ``beta / se`` and a degeneracy flag.

    The flag is set when the standard error is zero but the estimate is not,
    in which case p = 0.
    """
    p = normal_p_value(cell.beta, cell.se)
    return p, bool(cell.se == 0 and cell.beta != 0)


def percentile_band(draws: np.ndarray, level: float) -> tuple:
    """Inclusive linear-interpolation percentiles, NaN-aware, per column."""
    alpha = 1.0 - level
    lo = np.full(draws.shape[1], np.nan)
    hi = np.full(draws.shape[1], np.nan)
    for j in range(draws.shape[1]):
        col = draws[:, j]
        col = col[~np.isnan(col)]
        if len(col):
            lo[j], hi[j] = np.quantile(col, [alpha / 2, 1 - alpha / 2],
                                       method="linear")
    return lo, hi


def stratified_weights(rng: np.random.Generator, strata: list, n: int) -> np.ndarray:
    """Multiplicity of each person in one resample drawn within strata."""
    w = np.zeros(n)
    for members in strata:
        k = len(members)
        w[members] = rng.multinomial(k, np.full(k, 1.0 / k))
    return w


class _Replicator:
    """Curve values of replicate b, reproducible from (seed, b) alone."""

    def __init__(self, system: CellSystem, W: np.ndarray, balanced: bool,
                 ref_rows: np.ndarray, seed: int):
        self.system = system
        self.W = W
        self.balanced = balanced
        self.ref_rows = ref_rows
        self.seed = seed
        g = system.sample.event_year
        self.strata = [np.flatnonzero(g == c) for c in np.unique(g)]
        self.n = len(g)

    def values(self, weights: Optional[np.ndarray]) -> np.ndarray:
        beta = self.system.betas(weights)
        ok = ~np.isnan(beta)
        num = self.W @ np.where(ok, beta, 0.0)
        den = self.W @ ok.astype(float)
        full = self.W.sum(1)
        out = np.full(self.W.shape[0], np.nan)
        if self.balanced:
            good = (full > 0) & (np.abs(den - full) <= 1e-12)
            out[good] = num[good]
        else:
            good = den > 0
            out[good] = num[good] / den[good]
        out[self.ref_rows] = 0.0
        return out

    def replicate(self, b: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, b])
        return self.values(stratified_weights(rng, self.strata, self.n))

    def chunk(self, indices) -> np.ndarray:
        return np.vstack([self.replicate(b) for b in indices])


def bootstrap_event_study(panel, cohorts, spec: TreatmentSpec = TreatmentSpec(),
                          scheme: Optional[AggregationScheme] = None,
                          boot: BootstrapSpec = BootstrapSpec(),
                          outcome: str = "wage", workers: int = 1,
                          grid: Optional[CellGrid] = None,
                          keep_draws: bool = False) -> EventStudyCurve:
    """Point curve from the cell grid plus pointwise percentile bands.

    Parameters
    ----------
    grid : CellGrid, optional
        Precomputed :func:`estimate_all_cells` result on the same inputs.
    workers : int
        joblib processes; results do not depend on this.
    keep_draws : bool
        Attach the (B, len(horizon)) replicate matrix as ``curve.draws``.

    Returns
    -------
    EventStudyCurve
        Table gains ``boot_se``, ``n_draws`` and ``unstable`` (fewer than
        B/2 usable draws). The reference slot has a [0, 0] band.
    """
    if scheme is None:
        scheme = AggregationScheme(reference=spec.reference)
    if scheme.reference != spec.reference:
        raise ConfigError(
            f"scheme reference {scheme.reference} differs from -r = {spec.reference}")
    if grid is None:
        grid = estimate_all_cells(panel, cohorts, spec, outcome)
    scheme.check_display(grid.years)
    sizes = grid.cohort_sizes
    estimable = grid.estimable()
    weights = event_time_weights(estimable, sizes, scheme)
    by_gs = {(e.cell.g, e.cell.s): e for e in grid.estimates}
    curve = _curve(by_gs, sizes, scheme, weights)

    sample = prepare_sample(panel, cohorts, spec, outcome)
    cells = [e.cell for e in grid.estimates]
    system = CellSystem(sample, spec, cells)
    horizon = list(scheme.horizon())
    W = weight_matrix(weights, [(c.g, c.s) for c in cells], horizon)
    ref_rows = np.array([i for i, s in enumerate(horizon) if s == scheme.reference],
                        dtype=np.int64)
    rep = _Replicator(system, W, scheme.kind == "balanced", ref_rows, boot.seed)

    workers = max(1, int(workers))
    if workers == 1:
        draws = rep.chunk(range(boot.B))
    else:
        parts = np.array_split(np.arange(boot.B), workers)
        blocks = Parallel(n_jobs=workers)(
            delayed(rep.chunk)(p.tolist()) for p in parts if len(p))
        draws = np.vstack(blocks)

    supported = curve.table["supported"].to_numpy()
    draws[:, ~supported] = np.nan
    lo, hi = percentile_band(draws, boot.level)
    n_draws = (~np.isnan(draws)).sum(0)
    se = np.full(len(horizon), np.nan)
    for j in range(len(horizon)):
        if n_draws[j] > 1:
            col = draws[~np.isnan(draws[:, j]), j]
            se[j] = col.std(ddof=1)
    t = curve.table
    t["ci_low"] = lo
    t["ci_high"] = hi
    t["boot_se"] = se
    t["n_draws"] = n_draws
    t["unstable"] = supported & (n_draws < boot.B / 2)
    if t["unstable"].any():
        log.warning("unstable bands at s = %s",
                    t.loc[t["unstable"], "s"].tolist())
    if keep_draws:
        curve.draws = draws
    return curve
