"""NetFlow-style record parsing, feature preprocessing, and label encoding.

The canonical feature set is fixed and obtainable from any standard flow
export: duration and the four volume counters as numeric columns, the eight
TCP flag bits as 0/1 numeric columns, and protocol plus source/destination
port class (well-known / registered / ephemeral) as categoricals. Ports are
bucketed into classes rather than one-hot encoded directly so the feature
width stays independent of the port space.

Every numeric column is log1p-transformed, z-scored against training-split
statistics, and clamped to +-5; categoricals get one-hot columns with a
dedicated unknown bucket so transforming an unseen split never fails.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

FEATURE_SPEC_FORMAT_VERSION = 1
LABEL_CODEC_FORMAT_VERSION = 1

# protocols with no port concept: ICMP, ICMPv6
_PORTLESS_PROTOCOLS = {1, 58}

TCP_FLAG_BITS = ["fin", "syn", "rst", "psh", "ack", "urg", "ece", "cwr"]

CANONICAL_COLUMNS = [
    "src_ip", "dst_ip", "src_port", "dst_port", "protocol", "start_time",
    "duration_ms", "bytes_in", "bytes_out", "pkts_in", "pkts_out", "tcp_flags",
]


class SchemaError(ValueError):
    """A required column is missing from the input schema or header."""


class CorruptInputError(ValueError):
    """More than half of the data rows failed to parse."""


@dataclass(frozen=True, slots=True)
class FlowRecord:
    """One bidirectional flow as exported by NetFlow/IPFIX collectors."""

    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int
    start_time: int          # ms since epoch
    duration_ms: int
    bytes_in: int
    bytes_out: int
    pkts_in: int
    pkts_out: int
    tcp_flags: int
    label: Optional[str] = None


def _validate_record(r: FlowRecord) -> None:
    if not r.src_ip or not r.dst_ip:
        raise ValueError("empty endpoint identifier")
    if not (0 <= r.src_port <= 65535 and 0 <= r.dst_port <= 65535):
        raise ValueError(f"port out of range: {r.src_port}/{r.dst_port}")
    if not 0 <= r.protocol <= 255:
        raise ValueError(f"protocol out of range: {r.protocol}")
    if r.duration_ms < 0:
        raise ValueError(f"negative duration: {r.duration_ms}")
    if min(r.bytes_in, r.bytes_out, r.pkts_in, r.pkts_out) < 0:
        raise ValueError("negative volume counter")
    if not 0 <= r.tcp_flags <= 255:
        raise ValueError(f"tcp_flags out of range: {r.tcp_flags}")


@dataclass
class ParseResult:
    records: List[FlowRecord]
    malformed_count: int = 0
    # first rows that failed, as (1-based line number, reason); capped
    malformed_rows: List[tuple] = field(default_factory=list)


def parse_flows(path, schema: Optional[Dict[str, str]] = None,
                label_column: Optional[str] = "label",
                max_reported: int = 50) -> ParseResult:
    """Parse a header-bearing flow CSV into FlowRecords, in file order.

    `schema` maps canonical field names to column names in the file; fields
    not mentioned map to their own name. Malformed rows are counted and the
    first `max_reported` are kept with a reason instead of being silently
    dropped. ICMP-family flows get their ports coerced to 0.
    """
    schema = schema or {}
    colmap = {f: schema.get(f, f) for f in CANONICAL_COLUMNS}

    result = ParseResult(records=[])
    n_rows = 0
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, no header row")
        header = set(reader.fieldnames)
        missing = [c for c in colmap.values() if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing required columns {missing}")
        has_label = label_column is not None and label_column in header

        for line_no, row in enumerate(reader, start=2):
            n_rows += 1
            try:
                record = _row_to_record(row, colmap, label_column if has_label else None)
                result.records.append(record)
            except (ValueError, TypeError, KeyError) as exc:
                result.malformed_count += 1
                if len(result.malformed_rows) < max_reported:
                    result.malformed_rows.append((line_no, str(exc)))

    if n_rows > 0 and result.malformed_count * 2 > n_rows:
        raise CorruptInputError(
            f"{path}: {result.malformed_count} of {n_rows} rows are malformed")
    return result


def _row_to_record(row: dict, colmap: Dict[str, str], label_column: Optional[str]) -> FlowRecord:
    def geti(fieldname: str) -> int:
        return int(float(row[colmap[fieldname]]))

    protocol = geti("protocol")
    portless = protocol in _PORTLESS_PROTOCOLS
    record = FlowRecord(
        src_ip=row[colmap["src_ip"]].strip(),
        dst_ip=row[colmap["dst_ip"]].strip(),
        src_port=0 if portless else geti("src_port"),
        dst_port=0 if portless else geti("dst_port"),
        protocol=protocol,
        start_time=geti("start_time"),
        duration_ms=geti("duration_ms"),
        bytes_in=geti("bytes_in"),
        bytes_out=geti("bytes_out"),
        pkts_in=geti("pkts_in"),
        pkts_out=geti("pkts_out"),
        tcp_flags=geti("tcp_flags"),
        label=(row[label_column].strip() or None) if label_column else None,
    )
    _validate_record(record)
    return record


def write_flows_csv(path, records: Sequence[FlowRecord]) -> None:
    """Write records in the canonical column layout (plus a label column)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CANONICAL_COLUMNS + ["label"])
        for r in records:
            writer.writerow([r.src_ip, r.dst_ip, r.src_port, r.dst_port, r.protocol,
                             r.start_time, r.duration_ms, r.bytes_in, r.bytes_out,
                             r.pkts_in, r.pkts_out, r.tcp_flags, r.label or ""])


# ---------------------------------------------------------------------------
# feature preprocessing

NUMERIC_COLUMNS = ["duration_ms", "bytes_in", "bytes_out", "pkts_in", "pkts_out"] + \
    [f"flag_{b}" for b in TCP_FLAG_BITS]
CATEGORICAL_COLUMNS = ["protocol", "src_port_class", "dst_port_class"]


def port_class(port: int) -> str:
    if port <= 1023:
        return "well_known"
    if port <= 49151:
        return "registered"
    return "ephemeral"


def _numeric_matrix(records: Sequence[FlowRecord]) -> np.ndarray:
    out = np.empty((len(records), len(NUMERIC_COLUMNS)), dtype=np.float64)
    for i, r in enumerate(records):
        out[i, :5] = (r.duration_ms, r.bytes_in, r.bytes_out, r.pkts_in, r.pkts_out)
        for k in range(8):
            out[i, 5 + k] = (r.tcp_flags >> k) & 1
    return out


def _categorical_value(r: FlowRecord, column: str):
    if column == "protocol":
        return r.protocol
    if column == "src_port_class":
        return port_class(r.src_port)
    if column == "dst_port_class":
        return port_class(r.dst_port)
    raise KeyError(column)


@dataclass
class FeatureConfig:
    clamp: float = 5.0


@dataclass
class FeatureSpec:
    """Training-split statistics needed to turn records into fixed-width vectors."""

    numeric_columns: List[str]
    means: np.ndarray            # of log1p-transformed values
    stds: np.ndarray             # degenerate columns hold 1.0
    categorical_columns: Dict[str, dict]   # column -> {category: index}; unknown bucket is last
    clamp: float
    output_dim: int

    def one_hot_width(self, column: str) -> int:
        return len(self.categorical_columns[column]) + 1

    def to_json_dict(self) -> dict:
        return {
            "format_version": FEATURE_SPEC_FORMAT_VERSION,
            "numeric_columns": list(self.numeric_columns),
            "means": [float(x) for x in self.means],
            "stds": [float(x) for x in self.stds],
            "categorical_columns": {
                col: {str(cat): int(idx) for cat, idx in mapping.items()}
                for col, mapping in self.categorical_columns.items()
            },
            "clamp": self.clamp,
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "FeatureSpec":
        if d.get("format_version") != FEATURE_SPEC_FORMAT_VERSION:
            raise ValueError(f"unsupported FeatureSpec format_version {d.get('format_version')}")
        cats = {}
        for col, mapping in d["categorical_columns"].items():
            native = (lambda s: int(s)) if col == "protocol" else (lambda s: s)
            cats[col] = {native(cat): idx for cat, idx in mapping.items()}
        return cls(numeric_columns=list(d["numeric_columns"]),
                   means=np.asarray(d["means"], dtype=np.float64),
                   stds=np.asarray(d["stds"], dtype=np.float64),
                   categorical_columns=cats,
                   clamp=float(d["clamp"]),
                   output_dim=int(d["output_dim"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_dict(), f, sort_keys=True, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "FeatureSpec":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json_dict(json.load(f))


def fit_feature_spec(records: Sequence[FlowRecord],
                     config: Optional[FeatureConfig] = None) -> FeatureSpec:
    """Fit preprocessing statistics on a training split.

    Numeric columns are log1p-transformed before mean/std are computed;
    zero-variance columns get std 1 so the output width never depends on
    which columns happened to vary. Categorical maps hold the observed
    categories in sorted order; the unknown bucket is always the extra
    trailing one-hot slot.
    """
    if not records:
        raise ValueError("fit_feature_spec: no records")
    config = config or FeatureConfig()

    logged = np.log1p(_numeric_matrix(records))
    means = logged.mean(axis=0)
    stds = logged.std(axis=0)
    stds[stds == 0.0] = 1.0

    cats: Dict[str, dict] = {}
    width = len(NUMERIC_COLUMNS)
    for col in CATEGORICAL_COLUMNS:
        values = sorted({_categorical_value(r, col) for r in records})
        cats[col] = {v: i for i, v in enumerate(values)}
        width += len(values) + 1

    return FeatureSpec(numeric_columns=list(NUMERIC_COLUMNS), means=means, stds=stds,
                       categorical_columns=cats, clamp=config.clamp, output_dim=width)


def transform(records: Sequence[FlowRecord], spec: FeatureSpec) -> np.ndarray:
    """Records -> (n, output_dim) float32 matrix, row order preserved."""
    n = len(records)
    out = np.zeros((n, spec.output_dim), dtype=np.float32)
    if n:
        logged = np.log1p(_numeric_matrix(records))
        z = (logged - spec.means) / spec.stds
        np.clip(z, -spec.clamp, spec.clamp, out=z)
        out[:, :len(NUMERIC_COLUMNS)] = z

    offset = len(NUMERIC_COLUMNS)
    for col in CATEGORICAL_COLUMNS:
        mapping = spec.categorical_columns[col]
        unknown = len(mapping)
        for i, r in enumerate(records):
            idx = mapping.get(_categorical_value(r, col), unknown)
            out[i, offset + idx] = 1.0
        offset += unknown + 1
    return out


# ---------------------------------------------------------------------------
# labels


@dataclass
class LabelCodec:
    class_names: List[str]

    def __post_init__(self):
        self.index_of = {name: i for i, name in enumerate(self.class_names)}

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def to_json_dict(self) -> dict:
        return {"format_version": LABEL_CODEC_FORMAT_VERSION,
                "class_names": list(self.class_names)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "LabelCodec":
        if d.get("format_version") != LABEL_CODEC_FORMAT_VERSION:
            raise ValueError(f"unsupported LabelCodec format_version {d.get('format_version')}")
        return cls(class_names=list(d["class_names"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_dict(), f, sort_keys=True, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "LabelCodec":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json_dict(json.load(f))


def encode_labels(records: Sequence[FlowRecord]) -> tuple[LabelCodec, np.ndarray]:
    """Build a codec over the lexicographically sorted class names and encode."""
    for i, r in enumerate(records):
        if r.label is None:
            raise ValueError(f"encode_labels: record {i} has no label")
    codec = LabelCodec(class_names=sorted({r.label for r in records}))
    indices = np.array([codec.index_of[r.label] for r in records], dtype=np.int32)
    return codec, indices
