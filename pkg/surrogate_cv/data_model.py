"""
Domain types and file ingestion for paired and surrogate-only samples.

A paired sample carries the expensive target metric F together with the
surrogate vector G (and optional scenario features phi). A surrogate-only
sample carries G (and phi) without F. Datasets are column-oriented numpy
arrays frozen after construction; pairing is positional within a file.

Supported formats, selected by file extension:
  .csv            header row required; columns scenario_id, F, G_1..G_d, PHI_1..PHI_m
  .jsonl/.ndjson  one object per line with keys scenario_id, f, g, phi
"""

import csv
import json
import logging
import math
import os
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyDataset,
    InvalidArgument,
    ParseError,
    SchemaError,
)

logger = logging.getLogger(__name__)

CSV_EXTENSIONS = ('.csv',)
JSONL_EXTENSIONS = ('.jsonl', '.ndjson')


class MetricKind(str, Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


@dataclass(frozen=True)
class ColumnSchema:
    """Column naming convention for CSV files, with optional declared dimensions."""
    scenario_id: str = "scenario_id"
    f: str = "F"
    g_prefix: str = "G_"
    phi_prefix: str = "PHI_"
    expected_d: Optional[int] = None
    expected_m: Optional[int] = None

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "ColumnSchema":
        columns = config.get('columns', {}) or {}
        known = {'scenario_id', 'f', 'g_prefix', 'phi_prefix', 'expected_d', 'expected_m'}
        unknown = set(columns) - known
        if unknown:
            raise SchemaError(f"Unknown column override keys: {', '.join(sorted(unknown))}")
        return cls(**columns)


@dataclass(frozen=True)
class PairedSample:
    scenario_id: str
    f: float
    g: np.ndarray
    phi: np.ndarray


@dataclass(frozen=True)
class SurrogateSample:
    scenario_id: str
    g: np.ndarray
    phi: np.ndarray


def _frozen_matrix(values: Any, rows: int, name: str, width: Optional[int] = None) -> np.ndarray:
    """Copy values into a read-only 2-D float array with the given row count."""
    array = np.array(values, dtype=float)
    if array.ndim == 1 and rows > 0 and array.shape[0] == rows and width in (None, 1):
        array = array.reshape(rows, 1)
    if array.size == 0:
        array = array.reshape(rows, width if width is not None else (array.shape[-1] if array.ndim == 2 else 0))
    if array.ndim != 2 or array.shape[0] != rows:
        raise DimensionMismatch(f"{name} must have {rows} rows, got shape {array.shape}")
    if width is not None and array.shape[1] != width:
        raise DimensionMismatch(f"{name} must have {width} columns, got {array.shape[1]}")
    if not np.all(np.isfinite(array)):
        raise InvalidArgument(f"{name} contains non-finite values")
    array.setflags(write=False)
    return array


def _scenario_ids(scenario_ids: Optional[Sequence[str]], rows: int) -> Tuple[str, ...]:
    if scenario_ids is None:
        return tuple(str(i) for i in range(rows))
    ids = tuple(str(s) for s in scenario_ids)
    if len(ids) != rows:
        raise DimensionMismatch(f"expected {rows} scenario ids, got {len(ids)}")
    return ids


@dataclass(frozen=True, eq=False)
class PairedDataset:
    """n paired samples: target vector f (n,), surrogates g (n, d), features phi (n, m)."""
    scenario_ids: Tuple[str, ...]
    f: np.ndarray
    g: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        f = np.array(self.f, dtype=float).reshape(-1)
        if not np.all(np.isfinite(f)):
            raise InvalidArgument("f contains non-finite values")
        f.setflags(write=False)
        rows = f.shape[0]
        object.__setattr__(self, 'f', f)
        object.__setattr__(self, 'g', _frozen_matrix(self.g, rows, "g"))
        object.__setattr__(self, 'phi', _frozen_matrix(self.phi, rows, "phi"))
        object.__setattr__(self, 'scenario_ids', _scenario_ids(self.scenario_ids, rows))

    @classmethod
    def from_arrays(cls, f, g, phi=None, scenario_ids=None, m: int = 0) -> "PairedDataset":
        f = np.asarray(f, dtype=float).reshape(-1)
        g = np.asarray(g, dtype=float)
        if g.ndim == 1:
            g = g.reshape(-1, 1)
        if phi is None:
            phi = np.zeros((f.shape[0], m))
        return cls(scenario_ids, f, g, phi)

    @classmethod
    def from_samples(cls, samples: Sequence[PairedSample], d: int, m: int = 0) -> "PairedDataset":
        if not samples:
            return cls((), np.zeros(0), np.zeros((0, d)), np.zeros((0, m)))
        return cls(
            tuple(s.scenario_id for s in samples),
            np.array([s.f for s in samples]),
            np.array([np.asarray(s.g, dtype=float).reshape(d) for s in samples]),
            np.array([np.asarray(s.phi, dtype=float).reshape(m) for s in samples]).reshape(len(samples), m),
        )

    @property
    def n(self) -> int:
        return self.f.shape[0]

    @property
    def d(self) -> int:
        return self.g.shape[1]

    @property
    def m(self) -> int:
        return self.phi.shape[1]

    def __len__(self) -> int:
        return self.n

    @property
    def samples(self) -> List[PairedSample]:
        return [
            PairedSample(self.scenario_ids[i], float(self.f[i]), self.g[i], self.phi[i])
            for i in range(self.n)
        ]

    def subset(self, indices: Iterable[int]) -> "PairedDataset":
        idx = np.asarray(list(indices), dtype=int)
        return PairedDataset(
            tuple(self.scenario_ids[i] for i in idx),
            self.f[idx],
            self.g[idx].reshape(len(idx), self.d),
            self.phi[idx].reshape(len(idx), self.m),
        )

    def concat(self, other: "PairedDataset") -> "PairedDataset":
        if other.d != self.d or other.m != self.m:
            raise DimensionMismatch(
                f"cannot concatenate datasets with (d, m)=({self.d}, {self.m}) and ({other.d}, {other.m})"
            )
        return PairedDataset(
            self.scenario_ids + other.scenario_ids,
            np.concatenate([self.f, other.f]),
            np.vstack([self.g, other.g]),
            np.vstack([self.phi, other.phi]),
        )


@dataclass(frozen=True, eq=False)
class SurrogateDataset:
    """k surrogate-only samples: g (k, d), phi (k, m)."""
    scenario_ids: Tuple[str, ...]
    g: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        g = np.array(self.g, dtype=float)
        if g.ndim != 2:
            raise DimensionMismatch(f"g must be 2-D, got shape {g.shape}")
        rows = g.shape[0]
        object.__setattr__(self, 'g', _frozen_matrix(g, rows, "g", width=g.shape[1]))
        object.__setattr__(self, 'phi', _frozen_matrix(self.phi, rows, "phi"))
        object.__setattr__(self, 'scenario_ids', _scenario_ids(self.scenario_ids, rows))

    @classmethod
    def from_arrays(cls, g, phi=None, scenario_ids=None, m: int = 0) -> "SurrogateDataset":
        g = np.asarray(g, dtype=float)
        if g.ndim == 1:
            g = g.reshape(-1, 1)
        if phi is None:
            phi = np.zeros((g.shape[0], m))
        return cls(scenario_ids, g, phi)

    @classmethod
    def empty(cls, d: int, m: int = 0) -> "SurrogateDataset":
        return cls((), np.zeros((0, d)), np.zeros((0, m)))

    @property
    def k(self) -> int:
        return self.g.shape[0]

    @property
    def d(self) -> int:
        return self.g.shape[1]

    @property
    def m(self) -> int:
        return self.phi.shape[1]

    def __len__(self) -> int:
        return self.k

    @property
    def samples(self) -> List[SurrogateSample]:
        return [SurrogateSample(self.scenario_ids[i], self.g[i], self.phi[i]) for i in range(self.k)]


# --- Parsing helpers ---

def _parse_float(text: str, column: str, line: int) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ParseError(f"column '{column}': cannot parse '{text}' as a number", line)
    if not math.isfinite(value):
        raise ParseError(f"column '{column}': non-finite value '{text}'", line)
    return value


def _json_number(value: Any, key: str, line: int) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"key '{key}': expected a number, got {value!r}", line)
    try:
        value = float(value)
    except OverflowError:
        raise ParseError(f"key '{key}': integer too large for a float", line)
    if not math.isfinite(value):
        raise ParseError(f"key '{key}': non-finite value", line)
    return value


def _indexed_columns(header: List[str], prefix: str, kind: str) -> List[int]:
    """Return header positions of prefix_1..prefix_N in numeric order."""
    found: Dict[int, int] = {}
    for position, name in enumerate(header):
        if not name.startswith(prefix):
            continue
        suffix = name[len(prefix):]
        if not suffix.isdigit():
            continue
        found[int(suffix)] = position
    if not found:
        return []
    expected = list(range(1, len(found) + 1))
    if sorted(found) != expected:
        raise SchemaError(f"{kind} columns must be numbered {prefix}1..{prefix}{len(found)}, got {sorted(found)}")
    return [found[i] for i in expected]


def _classify_header(header: List[str], schema: ColumnSchema, require_f: bool):
    if len(set(header)) != len(header):
        raise SchemaError("duplicate column names in header")
    if schema.scenario_id not in header:
        raise SchemaError(f"missing required column '{schema.scenario_id}'")

    f_index = None
    if require_f:
        if schema.f not in header:
            raise SchemaError(f"missing required column '{schema.f}'")
        f_index = header.index(schema.f)

    g_columns = _indexed_columns(header, schema.g_prefix, "surrogate")
    if not g_columns:
        raise SchemaError(f"no surrogate columns found (expected {schema.g_prefix}1..)")
    phi_columns = _indexed_columns(header, schema.phi_prefix, "feature")

    if schema.expected_d is not None and len(g_columns) != schema.expected_d:
        raise SchemaError(f"declared d={schema.expected_d} but header has {len(g_columns)} surrogate columns")
    if schema.expected_m is not None and len(phi_columns) != schema.expected_m:
        raise SchemaError(f"declared m={schema.expected_m} but header has {len(phi_columns)} feature columns")

    used = {header.index(schema.scenario_id), *g_columns, *phi_columns}
    if f_index is not None:
        used.add(f_index)
    ignored = [name for position, name in enumerate(header) if position not in used]
    if ignored:
        logger.warning(f"Ignoring unrecognised columns: {', '.join(ignored)}")

    return header.index(schema.scenario_id), f_index, g_columns, phi_columns


def _decoded_lines(handle) -> Iterator[str]:
    """Decode a binary file line by line so bad UTF-8 is reported with its line number."""
    for line, raw in enumerate(handle, start=1):
        try:
            yield raw.decode('utf-8')
        except UnicodeDecodeError as e:
            raise ParseError(f"invalid UTF-8 byte at position {e.start}", line)


def _read_csv(path: str, schema: ColumnSchema, require_f: bool):
    with open(path, 'rb') as f:
        reader = csv.reader(_decoded_lines(f))
        try:
            try:
                header = next(reader)
            except StopIteration:
                raise SchemaError(f"{path}: header row required")
            header = [name.strip() for name in header]
            id_index, f_index, g_columns, phi_columns = _classify_header(header, schema, require_f)

            ids, targets, surrogates, features = [], [], [], []
            for row in reader:
                line = reader.line_num
                if not row or all(not field.strip() for field in row):
                    continue
                if len(row) != len(header):
                    raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
                ids.append(row[id_index].strip())
                if f_index is not None:
                    targets.append(_parse_float(row[f_index], header[f_index], line))
                surrogates.append([_parse_float(row[i], header[i], line) for i in g_columns])
                features.append([_parse_float(row[i], header[i], line) for i in phi_columns])
        except csv.Error as e:
            raise ParseError(f"malformed CSV: {e}", reader.line_num)

    return ids, targets, surrogates, features, len(g_columns), len(phi_columns)


def _read_jsonl(path: str, schema: ColumnSchema, require_f: bool):
    ids, targets, surrogates, features = [], [], [], []
    d = schema.expected_d
    m = schema.expected_m
    with open(path, 'rb') as f:
        for line, text in enumerate(_decoded_lines(f), start=1):
            text = text.strip()
            if not text:
                continue
            try:
                record = json.loads(text)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", line)
            if not isinstance(record, dict):
                raise ParseError("expected a JSON object", line)
            if 'scenario_id' not in record:
                raise SchemaError(f"line {line}: missing required key 'scenario_id'")
            if require_f and 'f' not in record:
                raise SchemaError(f"line {line}: missing required key 'f'")
            if 'g' not in record:
                raise SchemaError(f"line {line}: missing required key 'g'")

            g = record['g']
            phi = record.get('phi', [])
            if not isinstance(g, list) or not isinstance(phi, list):
                raise ParseError("'g' and 'phi' must be arrays", line)
            if d is None:
                d = len(g)
                if d == 0:
                    raise ParseError("'g' must be non-empty", line)
            if m is None:
                m = len(phi)
            if len(g) != d:
                raise ParseError(f"'g' has length {len(g)}, expected {d}", line)
            if len(phi) != m:
                raise ParseError(f"'phi' has length {len(phi)}, expected {m}", line)

            ids.append(str(record['scenario_id']))
            if require_f:
                targets.append(_json_number(record['f'], 'f', line))
            surrogates.append([_json_number(v, 'g', line) for v in g])
            features.append([_json_number(v, 'phi', line) for v in phi])

    if d is None:
        raise SchemaError(f"{path}: cannot infer surrogate dimension from an empty file; declare expected_d")
    return ids, targets, surrogates, features, d, m or 0


def _read_records(path: str, schema: Optional[ColumnSchema], require_f: bool):
    schema = schema or ColumnSchema()
    if not os.path.exists(path):
        raise SchemaError(f"input file '{path}' not found")
    extension = os.path.splitext(path)[1].lower()
    if extension in CSV_EXTENSIONS:
        return _read_csv(path, schema, require_f)
    if extension in JSONL_EXTENSIONS:
        return _read_jsonl(path, schema, require_f)
    raise SchemaError(f"unsupported file extension '{extension}' (expected .csv or .jsonl)")


def load_paired(path: str, schema: Optional[ColumnSchema] = None) -> PairedDataset:
    """Load paired (F, G, phi) samples; requires at least two rows."""
    ids, targets, surrogates, features, d, m = _read_records(path, schema, require_f=True)
    if len(ids) < 2:
        raise EmptyDataset(f"{path}: need at least 2 paired samples, found {len(ids)}")
    dataset = PairedDataset(
        tuple(ids),
        np.array(targets),
        np.array(surrogates).reshape(len(ids), d),
        np.array(features).reshape(len(ids), m),
    )
    logger.info(f"Loaded {dataset.n} paired samples from {path} (d={dataset.d}, m={dataset.m})")
    return dataset


def load_surrogate(path: str, schema: Optional[ColumnSchema] = None) -> SurrogateDataset:
    """Load surrogate-only (G, phi) samples; an empty pool is allowed."""
    ids, _, surrogates, features, d, m = _read_records(path, schema, require_f=False)
    dataset = SurrogateDataset(
        tuple(ids),
        np.array(surrogates).reshape(len(ids), d),
        np.array(features).reshape(len(ids), m),
    )
    logger.info(f"Loaded {dataset.k} surrogate samples from {path} (d={dataset.d}, m={dataset.m})")
    return dataset


def _write(path: str, header: List[str], rows: Iterable[List[Any]], records: Iterable[Dict[str, Any]]) -> None:
    extension = os.path.splitext(path)[1].lower()
    if extension in CSV_EXTENSIONS:
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow(row)
    elif extension in JSONL_EXTENSIONS:
        with open(path, 'w', encoding='utf-8') as f:
            for record in records:
                f.write(json.dumps(record) + "\n")
    else:
        raise SchemaError(f"unsupported file extension '{extension}' (expected .csv or .jsonl)")


def _header(schema: ColumnSchema, d: int, m: int, with_f: bool) -> List[str]:
    header = [schema.scenario_id] + ([schema.f] if with_f else [])
    header += [f"{schema.g_prefix}{i}" for i in range(1, d + 1)]
    header += [f"{schema.phi_prefix}{i}" for i in range(1, m + 1)]
    return header


def write_paired(dataset: PairedDataset, path: str, schema: Optional[ColumnSchema] = None) -> None:
    """Write a paired dataset; floats keep full round-trip precision."""
    schema = schema or ColumnSchema()
    rows = (
        [dataset.scenario_ids[i], repr(float(dataset.f[i]))]
        + [repr(float(v)) for v in dataset.g[i]]
        + [repr(float(v)) for v in dataset.phi[i]]
        for i in range(dataset.n)
    )
    records = (
        {
            'scenario_id': dataset.scenario_ids[i],
            'f': float(dataset.f[i]),
            'g': dataset.g[i].tolist(),
            'phi': dataset.phi[i].tolist(),
        }
        for i in range(dataset.n)
    )
    _write(path, _header(schema, dataset.d, dataset.m, True), rows, records)
    logger.info(f"Wrote {dataset.n} paired samples to {path}")


def write_surrogate(dataset: SurrogateDataset, path: str, schema: Optional[ColumnSchema] = None) -> None:
    """Write a surrogate-only dataset in the paired layout without the F column."""
    schema = schema or ColumnSchema()
    rows = (
        [dataset.scenario_ids[i]]
        + [repr(float(v)) for v in dataset.g[i]]
        + [repr(float(v)) for v in dataset.phi[i]]
        for i in range(dataset.k)
    )
    records = (
        {'scenario_id': dataset.scenario_ids[i], 'g': dataset.g[i].tolist(), 'phi': dataset.phi[i].tolist()}
        for i in range(dataset.k)
    )
    _write(path, _header(schema, dataset.d, dataset.m, False), rows, records)
    logger.info(f"Wrote {dataset.k} surrogate samples to {path}")


def check_compatibility(paired: PairedDataset, surrogate: SurrogateDataset, use_features: bool = False) -> None:
    """Raise DimensionMismatch unless the surrogate dimensions agree.

    Feature dimensions only matter when a metric correlator consumes phi.
    """
    if paired.d != surrogate.d:
        raise DimensionMismatch(f"paired d={paired.d} but surrogate d={surrogate.d}")
    if use_features and paired.m != surrogate.m:
        raise DimensionMismatch(f"paired m={paired.m} but surrogate m={surrogate.m}")


def infer_metric_kind(dataset: PairedDataset) -> MetricKind:
    """BINARY when every F is 0 or 1, CONTINUOUS otherwise."""
    if dataset.n > 0 and np.all((dataset.f == 0.0) | (dataset.f == 1.0)):
        return MetricKind.BINARY
    return MetricKind.CONTINUOUS


def validate_metric_kind(dataset: PairedDataset, kind: MetricKind) -> None:
    if kind == MetricKind.BINARY and not np.all((dataset.f == 0.0) | (dataset.f == 1.0)):
        raise InvalidArgument("binary metric requires every F to be 0 or 1")
