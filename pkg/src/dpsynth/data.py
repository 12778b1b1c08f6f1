"""Tabular data representation: schemas, discrete tables, CSV ingestion and emission."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

logger = logging.getLogger(__name__)

KINDS = ("categorical", "ordinal", "continuous")
DEFAULT_CONTINUOUS_BINS = 32
MISSING_TOKENS = frozenset({"", "na", "nan"})
MISSING_LABEL = "<missing>"


class SchemaError(ValueError):
    pass


class StructuralError(ValueError):
    """Malformed input table (ragged rows, missing header)."""


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    kind: str
    domain_size: int = 0
    bin_edges: tuple[float, ...] | None = None
    code_labels: tuple[str, ...] | None = None
    lower: float | None = None
    upper: float | None = None
    # extra trailing code reserved for missing cells
    missing_code: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"attribute {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "continuous":
            if self.bin_edges is None:
                raise SchemaError(f"attribute {self.name!r}: continuous needs bin_edges")
            edges = tuple(float(e) for e in self.bin_edges)
            if any(b <= a for a, b in zip(edges, edges[1:])):
                raise SchemaError(f"attribute {self.name!r}: bin_edges must be strictly increasing")
            object.__setattr__(self, "bin_edges", edges)
            base = len(edges) + 1
            if self.domain_size and self.domain_size != base + self.missing_code:
                raise SchemaError(
                    f"attribute {self.name!r}: domain_size must equal len(bin_edges) + 1"
                )
            object.__setattr__(self, "domain_size", base + int(self.missing_code))
        else:
            if self.bin_edges is not None:
                raise SchemaError(f"attribute {self.name!r}: bin_edges only for continuous")
            if self.domain_size < 1:
                raise SchemaError(f"attribute {self.name!r}: domain_size must be positive")
        if self.code_labels is not None:
            labels = tuple(str(x) for x in self.code_labels)
            if len(labels) != self.base_size:
                raise SchemaError(
                    f"attribute {self.name!r}: code_labels has {len(labels)} entries, "
                    f"expected {self.base_size}"
                )
            object.__setattr__(self, "code_labels", labels)

    @property
    def base_size(self) -> int:
        """Domain size excluding the missing code."""
        return self.domain_size - int(self.missing_code)

    def with_missing_code(self) -> "AttributeSpec":
        if self.missing_code:
            return self
        if self.kind == "continuous":
            return replace(self, missing_code=True, domain_size=0)
        return replace(self, missing_code=True, domain_size=self.domain_size + 1)

    def numeric_range(self) -> tuple[float, float]:
        """Declared value range; outer bins default to the width of their neighbour."""
        if self.kind != "continuous":
            return 0.0, float(self.base_size - 1)
        e = self.bin_edges
        if len(e) >= 2:
            lo_w, hi_w = e[1] - e[0], e[-1] - e[-2]
        else:
            lo_w = hi_w = 1.0
        lo = self.lower if self.lower is not None else e[0] - lo_w
        hi = self.upper if self.upper is not None else e[-1] + hi_w
        return lo, hi

    def bin_values(self) -> np.ndarray:
        """Representative value (midpoint) of each non-missing continuous bin."""
        lo, hi = self.numeric_range()
        bounds = np.concatenate([[lo], self.bin_edges, [hi]])
        return (bounds[:-1] + bounds[1:]) / 2.0

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"name": self.name, "kind": self.kind}
        if self.kind == "continuous":
            out["bin_edges"] = list(self.bin_edges)
            if self.lower is not None:
                out["lower"] = self.lower
            if self.upper is not None:
                out["upper"] = self.upper
        else:
            out["domain_size"] = self.base_size
        if self.code_labels is not None:
            out["code_labels"] = list(self.code_labels)
        if self.missing_code:
            out["missing"] = True
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "AttributeSpec":
        name = obj.get("name")
        kind = obj.get("kind")
        if not name or not kind:
            raise SchemaError(f"attribute entry needs 'name' and 'kind': {obj!r}")
        missing = bool(obj.get("missing", False))
        labels = obj.get("code_labels")
        if kind == "continuous":
            edges = obj.get("bin_edges")
            lower, upper = obj.get("lower"), obj.get("upper")
            if edges is None:
                if lower is None or upper is None:
                    raise SchemaError(
                        f"attribute {name!r}: continuous needs bin_edges or lower/upper"
                    )
                bins = int(obj.get("bins", obj.get("domain_size", DEFAULT_CONTINUOUS_BINS)))
                edges = np.linspace(float(lower), float(upper), bins + 1)[1:-1].tolist()
            return cls(name, kind, bin_edges=tuple(edges), code_labels=labels,
                       lower=lower, upper=upper, missing_code=missing)
        size = obj.get("domain_size")
        if size is None and labels is not None:
            size = len(labels)
        if size is None:
            raise SchemaError(f"attribute {name!r}: needs domain_size or code_labels")
        return cls(name, kind, domain_size=int(size) + int(missing), code_labels=labels,
                   missing_code=missing)


@dataclass(frozen=True)
class Schema:
    attributes: tuple[AttributeSpec, ...]
    n_expected: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        names = [a.name for a in self.attributes]
        dup = [n for n, c in Counter(names).items() if c > 1]
        if dup:
            raise SchemaError(f"duplicate attribute names: {dup}")

    def __len__(self) -> int:
        return len(self.attributes)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    @property
    def domain(self) -> tuple[int, ...]:
        return tuple(a.domain_size for a in self.attributes)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no attribute named {name!r}") from None

    def __getitem__(self, key: int | str) -> AttributeSpec:
        if isinstance(key, str):
            key = self.index(key)
        return self.attributes[key]

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"attributes": [a.to_json() for a in self.attributes]}
        if self.n_expected is not None:
            out["n_expected"] = self.n_expected
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Schema":
        if "attributes" not in obj:
            raise SchemaError("schema document needs a top-level 'attributes' array")
        return cls(tuple(AttributeSpec.from_json(a) for a in obj["attributes"]),
                   obj.get("n_expected"))


def load_schema(path: str | Path) -> Schema:
    with open(path, encoding="utf-8") as fh:
        return Schema.from_json(json.load(fh))


def save_schema(schema: Schema, path: str | Path) -> None:
    Path(path).write_text(json.dumps(schema.to_json(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class RawTable:
    header: tuple[str, ...]
    cells: tuple[tuple[Any, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "header", tuple(self.header))
        object.__setattr__(self, "cells", tuple(tuple(r) for r in self.cells))
        width = len(self.header)
        for i, row in enumerate(self.cells):
            if len(row) != width:
                raise StructuralError(
                    f"row {i + 1} has {len(row)} fields, header has {width}"
                )

    def __len__(self) -> int:
        return len(self.cells)

    def column(self, name: str) -> list[Any]:
        try:
            j = self.header.index(name)
        except ValueError:
            raise KeyError(f"no column named {name!r}") from None
        return [row[j] for row in self.cells]


@dataclass(frozen=True, eq=False)
class DiscreteTable:
    schema: Schema
    rows: np.ndarray
    row_ids: tuple[Any, ...] | None = None

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.int64, copy=True)
        if rows.ndim == 1 and rows.size == 0:
            rows = rows.reshape(0, len(self.schema))
        if rows.ndim != 2 or rows.shape[1] != len(self.schema):
            raise ValueError(
                f"rows must be n x {len(self.schema)}, got shape {rows.shape}"
            )
        if rows.size:
            if rows.min() < 0:
                raise ValueError("codes must be non-negative")
            over = rows.max(axis=0) >= np.array(self.schema.domain)
            if over.any():
                bad = [self.schema.names[j] for j in np.flatnonzero(over)]
                raise ValueError(f"codes exceed domain size in columns {bad}")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        if self.row_ids is not None:
            ids = tuple(self.row_ids)
            if len(ids) != rows.shape[0]:
                raise ValueError("row_ids length must match the number of rows")
            if len(set(ids)) != len(ids):
                raise ValueError("row_ids must be unique")
            object.__setattr__(self, "row_ids", ids)

    def __len__(self) -> int:
        return self.rows.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DiscreteTable):
            return NotImplemented
        return (self.schema == other.schema and self.row_ids == other.row_ids
                and np.array_equal(self.rows, other.rows))

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def domain(self) -> tuple[int, ...]:
        return self.schema.domain

    def take(self, idx: Sequence[int] | np.ndarray) -> "DiscreteTable":
        idx = np.asarray(idx, dtype=np.int64)
        ids = None if self.row_ids is None else tuple(self.row_ids[i] for i in idx)
        return DiscreteTable(self.schema, self.rows[idx], ids)

    def to_frame(self):
        """Numeric pandas view: bin midpoints for continuous columns, codes otherwise.

        Missing codes become NaN.
        """
        import pandas as pd

        cols = {}
        for j, attr in enumerate(self.schema.attributes):
            codes = self.rows[:, j]
            if attr.kind == "continuous":
                vals = np.append(attr.bin_values(), np.nan) if attr.missing_code else attr.bin_values()
                cols[attr.name] = vals[codes]
            elif attr.missing_code:
                cols[attr.name] = np.where(codes >= attr.base_size, np.nan, codes.astype(np.float64))
            else:
                cols[attr.name] = codes.astype(np.int64)
        return pd.DataFrame(cols, index=list(self.row_ids) if self.row_ids else None)


def _parse_cell(text: str) -> Any:
    if text.strip().lower() in MISSING_TOKENS:
        return None
    try:
        value = float(text)
    except ValueError:
        return text
    if math.isfinite(value) and value.is_integer() and "." not in text and "e" not in text.lower():
        return int(value)
    return value


def read_csv_text(text: str, has_header: bool = True) -> RawTable:
    reader = csv.reader(io.StringIO(text, newline=""))
    lines = [row for row in reader if row]
    if has_header:
        if not lines:
            raise StructuralError("missing header")
        header, body = lines[0], lines[1:]
    else:
        if not lines:
            return RawTable((), ())
        header = [f"col{j}" for j in range(len(lines[0]))]
        body = lines
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise StructuralError(
                f"row {i + 1} has {len(row)} fields, header has {len(header)}"
            )
    return RawTable(tuple(header), tuple(tuple(_parse_cell(c) for c in row) for row in body))


def load_csv(path: str | Path, has_header: bool = True) -> RawTable:
    with open(path, encoding="utf-8", newline="") as fh:
        return read_csv_text(fh.read(), has_header)


def _format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(raw: RawTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(raw.header)
        for row in raw.cells:
            writer.writerow([_format_cell(v) for v in row])


@dataclass
class ClampReport:
    counts: dict[str, int] = field(default_factory=dict)

    def add(self, name: str, k: int = 1) -> None:
        if k:
            self.counts[name] = self.counts.get(name, 0) + k

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def _encode_column(attr: AttributeSpec, values: list[Any], clamps: ClampReport) -> np.ndarray:
    out = np.empty(len(values), dtype=np.int64)
    missing = attr.domain_size - 1 if attr.missing_code else -1
    if attr.kind == "continuous":
        edges = np.asarray(attr.bin_edges)
        lo, hi = attr.numeric_range()
        for i, v in enumerate(values):
            if v is None:
                out[i] = missing
                continue
            try:
                x = float(v)
            except (TypeError, ValueError):
                raise EncodingError(f"{attr.name}: non-numeric value {v!r}") from None
            if x < lo or x > hi:
                clamps.add(attr.name)
            out[i] = np.searchsorted(edges, x, side="right")
        return out

    labels = {lab: k for k, lab in enumerate(attr.code_labels or ())}
    unseen = []
    for i, v in enumerate(values):
        if v is None:
            out[i] = missing
        elif isinstance(v, str) and v in labels:
            out[i] = labels[v]
        elif isinstance(v, (int, float)) and float(v).is_integer():
            code = int(v)
            if 0 <= code < attr.base_size:
                out[i] = code
            elif attr.kind == "ordinal":
                clamps.add(attr.name)
                out[i] = min(max(code, 0), attr.base_size - 1)
            else:
                unseen.append(v)
        elif attr.kind == "ordinal" and isinstance(v, (int, float)):
            clamps.add(attr.name)
            out[i] = min(max(int(round(v)), 0), attr.base_size - 1)
        elif str(v) in labels:
            out[i] = labels[str(v)]
        else:
            unseen.append(v)
    if unseen:
        shown = sorted({str(u) for u in unseen})
        raise EncodingError(f"{attr.name}: unseen categorical labels {shown}")
    return out


def encode(raw: RawTable, schema: Schema, missing_policy: str = "dedicated_code",
           id_column: str | None = None) -> tuple[DiscreteTable, ClampReport]:
    """Map a raw table onto the schema's integer domains.

    Continuous values go to the bin index given by the number of edges <= value.
    Out-of-range numbers are clamped to the nearest bin and tallied in the
    returned ClampReport. Under ``dedicated_code`` a missing cell gets an extra
    trailing code, which is added to the attribute's domain if not already declared.
    """
    if missing_policy not in ("drop_row", "dedicated_code"):
        raise ValueError(f"unknown missing_policy {missing_policy!r}")
    absent = [n for n in schema.names if n not in raw.header]
    if absent:
        raise SchemaError(f"columns missing from data: {absent}")
    cols = {n: raw.column(n) for n in schema.names}
    ids = raw.column(id_column) if id_column else None

    n = len(raw)
    keep = np.ones(n, dtype=bool)
    attrs = list(schema.attributes)
    for j, attr in enumerate(attrs):
        has_missing = any(v is None for v in cols[attr.name])
        if not has_missing:
            continue
        if missing_policy == "drop_row":
            keep &= np.array([v is not None for v in cols[attr.name]])
        elif not attr.missing_code:
            logger.warning("attribute %s has missing cells; adding a missing code", attr.name)
            attrs[j] = attr.with_missing_code()
    out_schema = Schema(tuple(attrs), schema.n_expected)

    clamps = ClampReport()
    keep_idx = np.flatnonzero(keep)
    matrix = np.empty((len(keep_idx), len(attrs)), dtype=np.int64)
    for j, attr in enumerate(attrs):
        vals = [cols[attr.name][i] for i in keep_idx]
        matrix[:, j] = _encode_column(attr, vals, clamps)
    row_ids = tuple(ids[i] for i in keep_idx) if ids is not None else None
    return DiscreteTable(out_schema, matrix, row_ids), clamps


def decode(table: DiscreteTable) -> RawTable:
    """Inverse of encode up to binning: labels for coded columns, bin midpoints for continuous."""
    columns = []
    for j, attr in enumerate(table.schema.attributes):
        codes = table.rows[:, j]
        if attr.kind == "continuous":
            mids = attr.bin_values().tolist()
            columns.append([None if c >= attr.base_size else mids[c] for c in codes])
        elif attr.code_labels is not None:
            columns.append([None if c >= attr.base_size else attr.code_labels[c] for c in codes])
        else:
            columns.append([None if c >= attr.base_size else int(c) for c in codes])
    cells = tuple(zip(*columns)) if columns else ()
    return RawTable(tuple(table.schema.names), cells)


def split_rows(table: DiscreteTable, fraction: float, seed: int) -> tuple[DiscreteTable, DiscreteTable]:
    """Seeded random partition; the first part holds round(fraction * n) rows."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(table.n)
    k = int(round(fraction * table.n))
    return table.take(np.sort(perm[:k])), table.take(np.sort(perm[k:]))
