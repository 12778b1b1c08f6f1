"""Utility of synthetic tables: rank correlations, regression replication,
forest R², and workload error, gathered into one JSON report."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .data import DiscreteTable, split_rows
from .forest import RfConfig, fit_random_forest
from .lmm import RegressionSpec, fit_lmm
from .marginals import all_kway_workload, workload_error


def rank_with_ties(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the positions they cover."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("rank_with_ties needs a non-empty vector")
    order = np.argsort(x, kind="stable")
    xs = x[order]
    # run boundaries of equal values in sorted order
    starts = np.flatnonzero(np.concatenate([[True], xs[1:] != xs[:-1]]))
    ends = np.append(starts[1:], xs.size)
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty_like(x)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def _frame(table) -> pd.DataFrame:
    return table.to_frame() if isinstance(table, DiscreteTable) else table


def _rank_corr(rx: np.ndarray, ry: np.ndarray) -> float | None:
    """Pearson correlation of two rank vectors; None if either is constant."""
    a, b = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0:
        return None
    return float(np.clip((a @ b) / den, -1.0, 1.0))


@dataclass
class CorrMatrix:
    columns: list[str]
    values: np.ndarray
    degenerate: list[tuple[str, str]] = field(default_factory=list)

    def to_csv(self, path) -> None:
        pd.DataFrame(self.values, index=self.columns, columns=self.columns).to_csv(
            path, float_format="%.17g", lineterminator="\n")


def spearman_matrix(table, columns: Sequence[str] | None = None) -> CorrMatrix:
    """Spearman correlations between columns, computed on rows complete in all of them.

    A constant column correlates 0 with everything else; such pairs are listed
    in ``degenerate``.
    """
    frame = _frame(table)
    columns = list(frame.columns if columns is None else columns)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise KeyError(f"columns not in table: {missing}")
    data = frame[columns].dropna().to_numpy(dtype=np.float64)
    if data.shape[0] < 3:
        raise ValueError("spearman_matrix needs at least 3 complete rows")
    ranks = [rank_with_ties(data[:, j]) for j in range(len(columns))]
    d = len(columns)
    out = np.eye(d)
    degenerate = []
    for i in range(d):
        for j in range(i + 1, d):
            r = _rank_corr(ranks[i], ranks[j])
            if r is None:
                degenerate.append((columns[i], columns[j]))
                r = 0.0
            out[i, j] = out[j, i] = r
    return CorrMatrix(columns, out, degenerate)


def corr_preservation(real: CorrMatrix, synth: CorrMatrix) -> dict:
    """Upper-triangle differences synth - real and their absolute mean and max."""
    if list(real.columns) != list(synth.columns):
        raise ValueError("correlation matrices have different columns")
    d = len(real.columns)
    delta = np.triu(synth.values - real.values, k=1)
    iu = np.triu_indices(d, k=1)
    off = np.abs(delta[iu])
    return {"delta_matrix": delta,
            "mean_abs_delta": float(off.mean()) if off.size else 0.0,
            "max_abs_delta": float(off.max()) if off.size else 0.0}


def center_within_group(table, value_col: str, group_col: str) -> pd.Series:
    """Each value minus the mean of its group (continuous columns use bin midpoints)."""
    frame = _frame(table)
    vals = frame[value_col].astype(np.float64)
    return vals - vals.groupby(frame[group_col]).transform("mean")


def top_k_correlated_features(table, target_col: str, k: int,
                              columns: Sequence[str] | None = None) -> list[str]:
    """The k columns with largest |Spearman correlation| to the target, ties by column order."""
    frame = _frame(table)
    pool = [c for c in (frame.columns if columns is None else columns) if c != target_col]
    if not 0 < k <= len(pool):
        raise ValueError(f"k must lie in [1, {len(pool)}], got {k}")
    cm = spearman_matrix(frame, [target_col, *pool])
    strength = np.abs(cm.values[0, 1:])
    order = sorted(range(len(pool)), key=lambda i: (-strength[i], i))
    return [pool[i] for i in order[:k]]


def r2_score(predicted, actual) -> float:
    """1 - SS_res / SS_tot, not clipped at zero."""
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("r2_score needs two equal-length vectors of length >= 2")
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if ss_tot == 0:
        raise ValueError("r2_score is undefined for a constant actual vector")
    return 1.0 - float(np.sum((a - p) ** 2)) / ss_tot


@dataclass(frozen=True)
class EvalProtocol:
    target: str
    group_col: str | None = None
    k_features: int = 12
    test_fraction: float = 0.2
    rf: RfConfig = RfConfig()
    seed: int = 0
    regression: RegressionSpec | None = None
    # (value column, derived column) for within-group centering before the regression
    center: tuple[str, str] | None = None
    workload_k: int = 2
    corr_columns: tuple[str, ...] | None = None

    def __post_init__(self):
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.k_features < 1:
            raise ValueError("k_features must be positive")

    def to_json(self) -> dict:
        out = asdict(self)
        out["regression"] = asdict(self.regression) if self.regression else None
        return out


def _forest_r2(train: pd.DataFrame, test: pd.DataFrame, features: list[str], target: str,
               rf: RfConfig) -> float | None:
    tr = train[features + [target]].dropna()
    te = test[features + [target]].dropna()
    if len(tr) < 10 or len(te) < 2 or te[target].nunique() < 2:
        return None
    model = fit_random_forest(tr[features].to_numpy(), tr[target].to_numpy(), rf)
    return r2_score(model.predict(te[features].to_numpy()), te[target].to_numpy())


def _regression(table: DiscreteTable, protocol: EvalProtocol) -> dict | None:
    if protocol.regression is None:
        return None
    frame = table.to_frame()
    if protocol.center is not None:
        value_col, new_col = protocol.center
        frame[new_col] = center_within_group(frame, value_col, protocol.regression.group_col)
    try:
        fit = fit_lmm(frame, protocol.regression)
    except (ValueError, np.linalg.LinAlgError) as exc:
        return {"error": str(exc)}
    out = dict(fit.coefficients)
    out["converged"] = fit.converged
    out["variance_components"] = fit.variance_components
    return out


def _eps_key(eps) -> str:
    return format(float(eps), "g")


def utility_report(real: DiscreteTable, synths: Mapping[float, DiscreteTable],
                   protocol: EvalProtocol) -> tuple[dict, dict[str, CorrMatrix]]:
    """Compare each synthetic table with the real one.

    Features are chosen on the real training split only. The real-trained
    forest is scored on the real test split; each synthetic-trained forest on
    that synthetic table's own held-out split. Returns the JSON-ready report and
    the correlation matrices keyed by "real" and the epsilon label.
    """
    for eps, s in synths.items():
        if s.schema.domain != real.schema.domain or s.schema.names != real.schema.names:
            raise ValueError(f"synthetic table for epsilon {eps} has a different schema")

    excluded = {protocol.target, protocol.group_col}
    corr_cols = list(protocol.corr_columns or [c for c in real.schema.names
                                               if c != protocol.group_col])
    train_fraction = 1.0 - protocol.test_fraction
    real_train, real_test = (t.to_frame() for t in split_rows(real, train_fraction, protocol.seed))
    candidates = [c for c in real.schema.names if c not in excluded]
    k = min(protocol.k_features, len(candidates))
    features = top_k_correlated_features(real_train, protocol.target, k, candidates)

    real_corr = spearman_matrix(real, corr_cols)
    matrices = {"real": real_corr}
    workload = all_kway_workload(real.schema, min(protocol.workload_k, len(real.schema)))
    report = {
        "protocol": protocol.to_json(),
        "features": features,
        "real": {"r2": _forest_r2(real_train, real_test, features, protocol.target, protocol.rf),
                 "lmm": _regression(real, protocol)},
        "by_epsilon": {},
    }
    for eps in sorted(synths):
        synth = synths[eps]
        key = _eps_key(eps)
        s_train, s_test = (t.to_frame() for t in split_rows(synth, train_fraction, protocol.seed))
        corr = spearman_matrix(synth, corr_cols)
        matrices[key] = corr
        cp = corr_preservation(real_corr, corr)
        report["by_epsilon"][key] = {
            "l1": workload_error(real, synth, workload, "L1"),
            "l2": workload_error(real, synth, workload, "L2"),
            "mean_abs_corr_delta": cp["mean_abs_delta"],
            "max_abs_corr_delta": cp["max_abs_delta"],
            "r2": _forest_r2(s_train, s_test, features, protocol.target, protocol.rf),
            "lmm": _regression(synth, protocol),
        }
    return report, matrices


_NUM_OR_NULL = {"type": ["number", "null"]}
_LMM = {"type": ["object", "null"]}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["protocol", "features", "real", "by_epsilon"],
    "properties": {
        "protocol": {"type": "object", "required": ["target", "k_features", "test_fraction", "seed"]},
        "features": {"type": "array", "items": {"type": "string"}},
        "real": {"type": "object", "required": ["r2", "lmm"],
                 "properties": {"r2": _NUM_OR_NULL, "lmm": _LMM}},
        "by_epsilon": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["l1", "l2", "mean_abs_corr_delta", "max_abs_corr_delta", "r2", "lmm"],
                "properties": {
                    "l1": {"type": "number", "minimum": 0},
                    "l2": {"type": "number", "minimum": 0},
                    "mean_abs_corr_delta": {"type": "number", "minimum": 0},
                    "max_abs_corr_delta": {"type": "number", "minimum": 0},
                    "r2": _NUM_OR_NULL,
                    "lmm": _LMM,
                },
            },
        },
    },
}
