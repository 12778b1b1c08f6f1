"""Privacy audits: record linkage with a linear similarity rule, and the
closest-distance membership-inference attack with ROC calibration."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import DiscreteTable, RawTable, decode

Generator = Callable[[DiscreteTable, int, int], DiscreteTable]


class LinkageConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LinkageConfig:
    exact_cols: tuple[str, ...]
    numeric_col: str
    offset: float = 0.5
    scale: float = 1.5
    sim_threshold: float = 0.8
    # accepted for parity with recordlinkage's signature; the similarity depends
    # only on the difference, so it has no effect
    origin: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "exact_cols", tuple(self.exact_cols))
        if not self.exact_cols:
            raise LinkageConfigError("exact_cols must be non-empty")
        if self.numeric_col in self.exact_cols:
            raise LinkageConfigError("numeric_col must not be one of exact_cols")
        if self.offset < 0 or self.scale <= 0:
            raise LinkageConfigError("offset must be >= 0 and scale > 0")
        if not 0 < self.sim_threshold <= 1:
            raise LinkageConfigError("sim_threshold must lie in (0, 1]")


@dataclass
class MatchResult:
    pairs: list[tuple[object, object, float]]

    def __len__(self) -> int:
        return len(self.pairs)

    def to_json(self) -> dict:
        return {"n_matches": len(self.pairs),
                "pairs": [{"target_row": t, "aux_row": a, "similarity": s}
                          for t, a, s in self.pairs]}


def linear_similarity(a: float, b: float, offset: float = 0.5, scale: float = 1.5) -> float:
    """1 within ``offset`` of each other, then a linear ramp reaching 0 at offset + scale."""
    d = abs(a - b)
    if d <= offset:
        return 1.0
    return max(0.0, 1.0 - (d - offset) / scale)


def _as_raw(table: DiscreteTable | RawTable) -> RawTable:
    return decode(table) if isinstance(table, DiscreteTable) else table


def _key(value) -> object:
    if isinstance(value, (int, float, np.integer, np.floating)):
        return float(value)
    try:
        return float(value)
    except (TypeError, ValueError):
        return value


def linkage_attack(target: DiscreteTable | RawTable, aux: DiscreteTable | RawTable,
                   cfg: LinkageConfig) -> MatchResult:
    """Block on exact equality of ``exact_cols``, then keep pairs whose numeric
    similarity reaches the threshold. Sorted by similarity, then row indices."""
    t_raw, a_raw = _as_raw(target), _as_raw(aux)
    needed = list(cfg.exact_cols) + [cfg.numeric_col]
    for name, raw in (("target", t_raw), ("aux", a_raw)):
        missing = [c for c in needed if c not in raw.header]
        if missing:
            raise LinkageConfigError(f"{name} table lacks columns {missing}")

    def keyed(raw: RawTable):
        cols = [raw.column(c) for c in cfg.exact_cols]
        num = raw.column(cfg.numeric_col)
        for i in range(len(raw)):
            key = tuple(_key(c[i]) for c in cols)
            if any(k is None for k in key) or num[i] is None:
                continue
            yield i, key, float(num[i])

    blocks = defaultdict(list)
    for j, key, v in keyed(a_raw):
        blocks[key].append((j, v))
    pairs = []
    for i, key, v in keyed(t_raw):
        for j, w in blocks.get(key, ()):
            s = linear_similarity(v, w, cfg.offset, cfg.scale)
            if s >= cfg.sim_threshold:
                pairs.append((i, j, s))
    pairs.sort(key=lambda p: (-p[2], p[0], p[1]))
    t_ids = getattr(target, "row_ids", None)
    a_ids = getattr(aux, "row_ids", None)
    if t_ids or a_ids:
        pairs = [(t_ids[i] if t_ids else i, a_ids[j] if a_ids else j, s) for i, j, s in pairs]
    return MatchResult(pairs)


def _scaled(record: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    both = np.vstack([rows, record[None, :]]).astype(np.float64)
    lo, hi = both.min(axis=0), both.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (record - lo) / span, (rows - lo) / span


def record_distances(record, table: DiscreteTable | np.ndarray, metric: str = "hamming") -> np.ndarray:
    rows = table.rows if isinstance(table, DiscreteTable) else np.asarray(table)
    record = np.asarray(record)
    if rows.shape[0] == 0:
        raise ValueError("table is empty")
    if record.shape != (rows.shape[1],):
        raise ValueError(f"record has {record.size} fields, table has {rows.shape[1]}")
    if metric == "hamming":
        return (rows != record[None, :]).sum(axis=1).astype(np.float64)
    if metric == "euclidean":
        r, t = _scaled(record, rows)
        return np.sqrt(((t - r[None, :]) ** 2).sum(axis=1))
    raise ValueError(f"unknown metric {metric!r}")


def nearest_record_distance(record, table: DiscreteTable | np.ndarray, metric: str = "hamming") -> float:
    """Distance from ``record`` to its closest row.

    Euclidean distance is computed after min-max scaling each column over the
    record together with the table.
    """
    return float(record_distances(record, table, metric).min())


@dataclass
class RocCurve:
    points: list[tuple[float, float, float]]
    auc: float

    def youden(self) -> tuple[float, float, float]:
        """Finite-threshold point maximising tpr - fpr; ties go to the lower threshold."""
        finite = [p for p in self.points if math.isfinite(p[2])] or self.points
        return max(finite, key=lambda p: (p[1] - p[0], -p[2]))

    def to_rows(self) -> list[tuple[float, float, float]]:
        return [(thr, fpr, tpr) for fpr, tpr, thr in self.points]


def roc_curve(scores_in: Sequence[float], scores_out: Sequence[float]) -> RocCurve:
    """ROC for "lower score means member": classify in when score <= threshold."""
    s_in = np.sort(np.asarray(scores_in, dtype=np.float64))
    s_out = np.sort(np.asarray(scores_out, dtype=np.float64))
    if s_in.size == 0 or s_out.size == 0:
        raise ValueError("both score vectors must be non-empty")
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([s_in, s_out])), [np.inf]])
    tpr = np.searchsorted(s_in, thresholds, side="right") / s_in.size
    fpr = np.searchsorted(s_out, thresholds, side="right") / s_out.size
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    points = [(float(f), float(t), float(h)) for f, t, h in zip(fpr, tpr, thresholds)]
    return RocCurve(points, auc)


@dataclass(frozen=True)
class MiaConfig:
    metric: str = "hamming"
    n_draws: int = 100
    calib_fraction: float = 0.5
    synth_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.metric not in ("hamming", "euclidean"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.n_draws < 2 or self.n_draws % 2:
            raise ValueError("n_draws must be a positive even number")
        if not 0 < self.calib_fraction < 1:
            raise ValueError("calib_fraction must lie in (0, 1)")


@dataclass
class MiaResult:
    roc: RocCurve
    threshold: float
    scores_in: list[float]
    scores_out: list[float]
    final_distance: float
    decision: str
    target_member: bool = True
    extra: dict = field(default_factory=dict)

    def decide(self, distance: float) -> str:
        return "in" if distance <= self.threshold else "out"

    def summary(self) -> dict:
        return {"auc": self.roc.auc, "youden_threshold": self.threshold,
                "final_distance": self.final_distance, "decision": self.decision,
                "n_in": len(self.scores_in), "n_out": len(self.scores_out)}


def _child_seed(root: int, *path: int) -> int:
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, *path])
    return int(ss.generate_state(1)[0])


def run_mia(target, real: DiscreteTable, cfg: MiaConfig, synth_cfg=None,
            generator: Generator | None = None, workload=None,
            include_target_in_final: bool = True) -> MiaResult:
    """Closest-distance membership inference against a synthesizer.

    One occurrence of ``target`` is removed from ``real`` before drawing the
    calibration sample. Half of the draws train on calibration + target, half on
    calibration alone; the final fresh draw trains on calibration + target
    unless ``include_target_in_final`` is False.
    """
    if generator is None:
        if synth_cfg is None:
            raise ValueError("either synth_cfg or generator is required")
        from .aim import aim_generator
        generator = aim_generator(synth_cfg, workload)
    target = np.asarray(target, dtype=np.int64)
    if target.shape != (len(real.schema),):
        raise ValueError("target does not match the table's schema")

    rows = real.rows
    hits = np.flatnonzero((rows == target[None, :]).all(axis=1))
    pool = np.delete(np.arange(real.n), hits[:1]) if hits.size else np.arange(real.n)
    rng = np.random.default_rng(_child_seed(cfg.seed, 0))
    k = max(1, int(round(cfg.calib_fraction * real.n)))
    calib_idx = np.sort(rng.choice(pool, size=min(k, pool.size), replace=False))
    calib = real.take(calib_idx)
    with_target = type(real)(real.schema, np.vstack([calib.rows, target[None, :]]))

    half = cfg.n_draws // 2
    scores_in, scores_out = [], []
    for trial in range(cfg.n_draws):
        member = trial < half
        train = with_target if member else calib
        size = cfg.synth_size or train.n
        synth = generator(train, size, _child_seed(cfg.seed, 1, trial))
        dist = nearest_record_distance(target, synth, cfg.metric)
        (scores_in if member else scores_out).append(dist)

    roc = roc_curve(scores_in, scores_out)
    _, _, threshold = roc.youden()
    train = with_target if include_target_in_final else calib
    final = generator(train, cfg.synth_size or train.n, _child_seed(cfg.seed, 2))
    final_distance = nearest_record_distance(target, final, cfg.metric)
    return MiaResult(roc, threshold, scores_in, scores_out, final_distance,
                     "in" if final_distance <= threshold else "out",
                     target_member=include_target_in_final)
