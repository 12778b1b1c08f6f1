"""Gaussian linear mixed model with a random intercept and optional random slope,
fitted by EM on the marginal (ML, not REML) likelihood."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg

logger = logging.getLogger(__name__)

# a random-effect variance this small relative to the residual is tested at the boundary
BOUNDARY_RATIO = 1e-3


class SingularDesign(ValueError):
    pass


@dataclass(frozen=True)
class RegressionSpec:
    outcome: str
    fixed_effects: tuple[str, ...]
    group_col: str
    random_slope: str | None = None
    categorical: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "fixed_effects", tuple(self.fixed_effects))
        object.__setattr__(self, "categorical", tuple(self.categorical))
        if self.outcome in self.fixed_effects:
            raise ValueError("outcome cannot also be a fixed effect")

    @property
    def columns(self) -> list[str]:
        cols = [self.outcome, *self.fixed_effects, self.group_col]
        if self.random_slope and self.random_slope not in cols:
            cols.append(self.random_slope)
        return cols


@dataclass
class LmmFit:
    coefficients: dict[str, float]
    std_errors: dict[str, float]
    variance_components: dict[str, float]
    converged: bool
    n_iterations: int
    loglik: float
    n_obs: int
    n_groups: int
    boundary: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"coefficients": self.coefficients, "std_errors": self.std_errors,
                "variance_components": self.variance_components, "converged": self.converged,
                "n_iterations": self.n_iterations, "loglik": self.loglik,
                "n_obs": self.n_obs, "n_groups": self.n_groups, "boundary": self.boundary}


def design_matrix(frame: pd.DataFrame, spec: RegressionSpec) -> tuple[np.ndarray, list[str]]:
    """Intercept plus fixed effects; categorical columns one-hot against their first level."""
    cols, names = [np.ones(len(frame))], ["Intercept"]
    for c in spec.fixed_effects:
        x = frame[c]
        if c in spec.categorical:
            levels = sorted(x.unique())
            for lev in levels[1:]:
                cols.append((x == lev).to_numpy(dtype=np.float64))
                names.append(f"{c}[{lev}]")
        else:
            cols.append(x.to_numpy(dtype=np.float64))
            names.append(c)
    return np.column_stack(cols), names


def _check_rank(X: np.ndarray, names: list[str]) -> None:
    _, r, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(X.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int((diag > tol).sum())
    if rank < X.shape[1]:
        bad = [names[i] for i in piv[rank:]]
        raise SingularDesign(f"design is rank deficient; collinear columns: {bad}")


@dataclass
class _Groups:
    """Rows batched by group size so per-group algebra runs as stacked arrays."""
    batches: list[tuple[np.ndarray, np.ndarray, np.ndarray]]  # (y, X, Z) of shape (g, n_i, .)
    n_obs: int
    n_groups: int


def _group(y, X, Z, g) -> _Groups:
    order = np.argsort(g, kind="stable")
    keys, starts, counts = np.unique(g[order], return_index=True, return_counts=True)
    by_size: dict[int, list[np.ndarray]] = {}
    for s, c in zip(starts, counts):
        by_size.setdefault(int(c), []).append(order[s:s + c])
    batches = []
    for size in sorted(by_size):
        idx = np.stack(by_size[size])
        batches.append((y[idx], X[idx], Z[idx]))
    return _Groups(batches, len(y), len(keys))


def _loglik(groups: _Groups, beta, G, sigma2) -> float:
    total = 0.0
    for (yb, Xb, Zb) in groups.batches:
        n_i = yb.shape[1]
        V = Zb @ G @ np.swapaxes(Zb, 1, 2) + sigma2 * np.eye(n_i)
        sign, logdet = np.linalg.slogdet(V)
        r = yb - Xb @ beta
        quad = np.einsum("gi,gij,gj->g", r, np.linalg.inv(V), r)
        total += float(np.sum(-0.5 * (logdet + quad + n_i * math.log(2 * math.pi))))
    return total


def _em(groups: _Groups, p: int, q: int, active: np.ndarray, beta0, sigma2_0,
        max_iter: int, tol: float):
    G = np.diag(np.where(active, sigma2_0 * 0.5, 0.0))
    beta, sigma2 = beta0.copy(), sigma2_0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        xtvx = np.zeros((p, p))
        xtvy = np.zeros(p)
        cache = []
        for (yb, Xb, Zb) in groups.batches:
            n_i = yb.shape[1]
            V = Zb @ G @ np.swapaxes(Zb, 1, 2) + sigma2 * np.eye(n_i)
            Vinv = np.linalg.inv(V)
            XtV = np.swapaxes(Xb, 1, 2) @ Vinv
            xtvx += np.einsum("gpi,giq->pq", XtV, Xb)
            xtvy += np.einsum("gpi,gi->p", XtV, yb)
            cache.append(Vinv)
        new_beta = np.linalg.solve(xtvx, xtvy)
        G_acc = np.zeros((q, q))
        s_acc = 0.0
        for (yb, Xb, Zb), Vinv in zip(groups.batches, cache):
            r = yb - Xb @ new_beta
            GZt = G @ np.swapaxes(Zb, 1, 2)                    # (g, q, n)
            b = np.einsum("gqi,gij,gj->gq", GZt, Vinv, r)
            C = G - GZt @ Vinv @ np.swapaxes(GZt, 1, 2)        # (g, q, q)
            G_acc += np.einsum("gq,gr->qr", b, b) + C.sum(axis=0)
            e = r - np.einsum("giq,gq->gi", Zb, b)
            s_acc += float((e ** 2).sum() + np.einsum("giq,gqr,gir->", Zb, C, Zb))
        new_G = G_acc / groups.n_groups
        new_G = (new_G + new_G.T) / 2.0
        mask = np.outer(active, active)
        new_G = np.where(mask, new_G, 0.0)
        new_sigma2 = s_acc / groups.n_obs
        change = max(np.abs(new_beta - beta).max(), np.abs(new_G - G).max() / max(sigma2, 1e-300),
                     abs(new_sigma2 - sigma2) / max(sigma2, 1e-300))
        beta, G, sigma2 = new_beta, new_G, new_sigma2
        if change < tol:
            converged = True
            break
    return beta, G, sigma2, converged, it


def _gls_cov(groups: _Groups, G, sigma2, p: int) -> np.ndarray:
    xtvx = np.zeros((p, p))
    for (yb, Xb, Zb) in groups.batches:
        V = Zb @ G @ np.swapaxes(Zb, 1, 2) + sigma2 * np.eye(yb.shape[1])
        xtvx += np.einsum("gip,gij,gjq->pq", Xb, np.linalg.inv(V), Xb)
    return np.linalg.inv(xtvx)


def fit_lmm(frame: pd.DataFrame, spec: RegressionSpec, max_iter: int = 1000, tol: float = 1e-8,
            force_zero_variance: bool = False) -> LmmFit:
    """Fit y = X beta + Z b + e with b ~ N(0, G) per group, e ~ N(0, sigma^2 I).

    Convergence is declared when the largest change in the coefficients and
    (sigma^2-scaled) variance parameters drops below ``tol``. Random-effect
    variances that end up negligible are re-tested with the component removed,
    since EM approaches a zero boundary only sublinearly.
    """
    missing = [c for c in spec.columns if c not in frame.columns]
    if missing:
        raise KeyError(f"columns missing for regression: {missing}")
    data = frame[spec.columns].dropna()
    if data[spec.group_col].nunique() < 2:
        raise ValueError("need at least two groups")
    if data.groupby(spec.group_col).size().max() < 2:
        raise ValueError("need at least one group with two observations")

    X, names = design_matrix(data, spec)
    _check_rank(X, names)
    y = data[spec.outcome].to_numpy(dtype=np.float64)
    zcols = [np.ones(len(data))]
    if spec.random_slope:
        zcols.append(data[spec.random_slope].to_numpy(dtype=np.float64))
    Z = np.column_stack(zcols)
    g = pd.factorize(data[spec.group_col], sort=True)[0]
    groups = _group(y, X, Z, g)
    p, q = X.shape[1], Z.shape[1]

    beta0 = np.linalg.lstsq(X, y, rcond=None)[0]
    sigma2_0 = float(np.mean((y - X @ beta0) ** 2))
    if sigma2_0 <= 0:
        sigma2_0 = 1e-12

    active = np.zeros(q, dtype=bool) if force_zero_variance else np.ones(q, dtype=bool)
    beta, G, sigma2, converged, iters = _em(groups, p, q, active, beta0, sigma2_0, max_iter, tol)
    loglik = _loglik(groups, beta, G, sigma2)
    boundary = []
    while active.any():
        small = [k for k in np.flatnonzero(active) if G[k, k] < BOUNDARY_RATIO * sigma2]
        if not small:
            break
        k = min(small, key=lambda j: G[j, j])
        trial_active = active.copy()
        trial_active[k] = False
        b2, G2, s2, conv2, it2 = _em(groups, p, q, trial_active, beta0, sigma2_0, max_iter, tol)
        ll2 = _loglik(groups, b2, G2, s2)
        if ll2 + 1e-9 * abs(loglik) < loglik:
            break
        active, beta, G, sigma2, converged, loglik = trial_active, b2, G2, s2, conv2, ll2
        iters += it2
        boundary.append(["intercept", "slope"][k])

    cov = _gls_cov(groups, G, sigma2, p)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    vc = {"intercept_var": float(G[0, 0]), "residual_var": float(sigma2),
          "slope_var": float(G[1, 1]) if q > 1 else 0.0,
          "intercept_slope_cov": float(G[0, 1]) if q > 1 else 0.0}
    if not converged:
        logger.warning("LMM EM did not converge in %d iterations", max_iter)
    return LmmFit(dict(zip(names, map(float, beta))), dict(zip(names, map(float, se))), vc,
                  converged, iters, float(loglik), groups.n_obs, groups.n_groups, boundary)


def ols(frame: pd.DataFrame, spec: RegressionSpec) -> dict[str, float]:
    data = frame[spec.columns].dropna()
    X, names = design_matrix(data, spec)
    beta = np.linalg.lstsq(X, data[spec.outcome].to_numpy(dtype=np.float64), rcond=None)[0]
    return dict(zip(names, map(float, beta)))
