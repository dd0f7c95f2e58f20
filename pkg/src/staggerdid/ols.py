"""Least squares with priority-ordered column dropping and clustered errors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import norm

DROP_TOL = 1e-10


def priority_qr(X: np.ndarray, tol: float = DROP_TOL):
    """Rank-revealing QR that keeps columns in their given priority order.

    Columns are orthogonalised left to right (Gram-Schmidt, two passes). A
    column whose residual norm falls below ``tol`` times the largest column
    norm (the leading pivot a column-pivoted QR would pick) is dropped. Unlike
    column pivoting this never discards an early column in favour of a later
    one, so callers list the columns that must survive first.

    Returns
    -------
    kept : list of int
    Q : ndarray, shape (n, len(kept))
    R : ndarray, shape (len(kept), len(kept)), upper triangular
    """
    X = np.asarray(X, dtype=np.float64)
    n, k = X.shape
    norms = np.sqrt(np.einsum("ij,ij->j", X, X))
    lead = norms.max() if k else 0.0
    Q = np.empty((n, min(n, k)))
    kept = []
    m = 0
    for j in range(k):
        v = X[:, j].copy()
        if m:
            Qm = Q[:, :m]
            v -= Qm @ (Qm.T @ v)
            v -= Qm @ (Qm.T @ v)
        nv = np.sqrt(v @ v)
        if nv <= tol * lead or m == Q.shape[1]:
            continue
        Q[:, m] = v / nv
        kept.append(j)
        m += 1
    Q = Q[:, :m]
    R = Q.T @ X[:, kept]
    R = np.triu(R)
    return kept, Q, R


def solve_least_squares(X: np.ndarray, y: np.ndarray, tol: float = DROP_TOL):
    """Least-squares coefficients on the columns ``priority_qr`` keeps."""
    kept, Q, R = priority_qr(X, tol)
    beta = solve_triangular(R, Q.T @ y) if kept else np.zeros(0)
    return beta, kept, R


def inverse_gram(R: np.ndarray) -> np.ndarray:
    """(X'X)^{-1} from the triangular factor."""
    Rinv = solve_triangular(R, np.eye(R.shape[0]))
    return Rinv @ Rinv.T


def small_sample_factor(n_clusters: int, n_obs: int, n_params: int) -> float:
    """G/(G-1) * (N-1)/(N-K), the usual clustered finite-sample scaling."""
    if n_clusters < 2 or n_obs <= n_params:
        return np.nan
    return n_clusters / (n_clusters - 1) * (n_obs - 1) / (n_obs - n_params)


def cluster_meat(scores: np.ndarray, clusters: np.ndarray) -> tuple:
    """Sum of outer products of per-cluster score sums.

    ``scores`` holds one row per observation (x_i * e_i).
    """
    _, inv = np.unique(clusters, return_inverse=True)
    G = inv.max() + 1 if len(inv) else 0
    summed = np.zeros((G, scores.shape[1]))
    np.add.at(summed, inv, scores)
    return summed.T @ summed, G


@dataclass
class RegressionFit:
    """Coefficients and cluster-robust covariance of a linear fit.

    ``coefficients`` and ``covariance`` cover every requested column; dropped
    columns hold NaN. ``column_map`` maps each column name to its position in
    the kept set, or to ``"dropped"``.
    """

    coefficients: np.ndarray
    covariance: np.ndarray
    df_resid: int
    column_map: dict
    residuals: np.ndarray = field(repr=False, default=None)

    @property
    def kept(self) -> list:
        return [i for i, v in enumerate(self.column_map.values()) if v != "dropped"]

    def kept_covariance(self) -> np.ndarray:
        k = self.kept
        return self.covariance[np.ix_(k, k)]

    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def coef(self, name: str) -> float:
        names = list(self.column_map)
        return float(self.coefficients[names.index(name)])


def fit_ols(X: np.ndarray, y: np.ndarray, clusters: Optional[np.ndarray] = None,
            names: Optional[Sequence[str]] = None, tol: float = DROP_TOL,
            ) -> RegressionFit:
    """OLS with person-clustered covariance (or HC0-style without clusters).

    The clustered covariance uses the finite-sample factor
    ``G/(G-1) * (N-1)/(N-K)`` with K the number of kept columns.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, k = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(k)]
    beta_k, kept, R = solve_least_squares(X, y, tol)
    resid = y - X[:, kept] @ beta_k
    bread = inverse_gram(R)
    scores = X[:, kept] * resid[:, None]
    if clusters is None:
        clusters = np.arange(n)
    meat, G = cluster_meat(scores, np.asarray(clusters))
    cov_k = small_sample_factor(G, n, len(kept)) * bread @ meat @ bread
    cov_k = (cov_k + cov_k.T) / 2

    coef = np.full(k, np.nan)
    coef[kept] = beta_k
    cov = np.full((k, k), np.nan)
    cov[np.ix_(kept, kept)] = cov_k
    pos = {j: m for m, j in enumerate(kept)}
    column_map = {nm: pos.get(j, "dropped") for j, nm in enumerate(names)}
    return RegressionFit(coef, cov, n - len(kept), column_map, resid)


def normal_p_value(beta: float, se: float) -> float:
    """Two-sided p-value of beta/se against the standard normal.

    A zero standard error gives p = 0 for a non-zero beta and p = 1 for a
    zero beta.
    """
    if not np.isfinite(beta) or not np.isfinite(se):
        return np.nan
    if se == 0:
        return 0.0 if beta != 0 else 1.0
    return float(2.0 * norm.sf(abs(beta / se)))
