"""Windowed spatio-temporal heterogeneous graphs over flow records.

Representation: every flow becomes its own node, and so does every IP
endpoint seen in the same short time slice (snapshot). Each flow node is
linked to its source and destination IP nodes by bidirectional spatial
edges. Two kinds of temporal edges carry time structure:

  - within a snapshot, flows sharing a source (resp. destination) IP are
    chained in (start_time, input order) by flow_follows_src /
    flow_follows_dst edges, oldest to newest;
  - across consecutive snapshots of a window, an IP that reoccurs gets a
    single ip_same_across edge from its old node to its new node.

Flow nodes carry preprocessed feature vectors; IP nodes carry dummy
all-ones vectors supplied at model time. Snapshot node indices are local,
so a window is a list of independent snapshots plus the cross-snapshot edge
list.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .flows import FlowRecord

GRAPH_FORMAT_VERSION = 1
_GRAPH_MAGIC = b"FSGB"


class NodeType(enum.Enum):
    FLOW = "flow"
    IP = "ip"


class EdgeType(enum.Enum):
    IP_TO_FLOW_SRC = "ip_to_flow_src"
    FLOW_TO_IP_SRC = "flow_to_ip_src"
    IP_TO_FLOW_DST = "ip_to_flow_dst"
    FLOW_TO_IP_DST = "flow_to_ip_dst"
    FLOW_FOLLOWS_SRC = "flow_follows_src"
    FLOW_FOLLOWS_DST = "flow_follows_dst"
    IP_SAME_ACROSS = "ip_same_across"


# (source node type, destination node type) per edge type
EDGE_ENDPOINTS = {
    EdgeType.IP_TO_FLOW_SRC: (NodeType.IP, NodeType.FLOW),
    EdgeType.FLOW_TO_IP_SRC: (NodeType.FLOW, NodeType.IP),
    EdgeType.IP_TO_FLOW_DST: (NodeType.IP, NodeType.FLOW),
    EdgeType.FLOW_TO_IP_DST: (NodeType.FLOW, NodeType.IP),
    EdgeType.FLOW_FOLLOWS_SRC: (NodeType.FLOW, NodeType.FLOW),
    EdgeType.FLOW_FOLLOWS_DST: (NodeType.FLOW, NodeType.FLOW),
    EdgeType.IP_SAME_ACROSS: (NodeType.IP, NodeType.IP),
}

# edge types stored per snapshot (everything except the cross-snapshot one)
SNAPSHOT_EDGE_TYPES = [t for t in EdgeType if t is not EdgeType.IP_SAME_ACROSS]


@dataclass(frozen=True)
class NodeRef:
    node_type: NodeType
    index: int


def _empty_edges() -> Dict[EdgeType, np.ndarray]:
    return {t: np.zeros((0, 2), dtype=np.int32) for t in SNAPSHOT_EDGE_TYPES}


@dataclass
class SnapshotGraph:
    flow_features: np.ndarray                      # (n_flows, feature_dim) float32
    ip_ids: List[str]                              # local ip index -> endpoint id
    flow_times: np.ndarray                         # (n_flows,) int64, ms
    edges: Dict[EdgeType, np.ndarray] = field(default_factory=_empty_edges)
    flow_labels: Optional[np.ndarray] = None       # (n_flows,) int32

    @property
    def n_flows(self) -> int:
        return self.flow_features.shape[0]

    @property
    def ip_count(self) -> int:
        return len(self.ip_ids)


@dataclass
class WindowGraph:
    snapshots: List[SnapshotGraph]
    # rows (t, ip index in snapshot t, ip index in snapshot t+1), type ip_same_across
    cross_edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int32))

    @property
    def n_flows(self) -> int:
        return sum(s.n_flows for s in self.snapshots)

    @property
    def has_labels(self) -> bool:
        return all(s.flow_labels is not None for s in self.snapshots)


@dataclass
class WindowConfig:
    snapshot_seconds: float = 2.0
    snapshots_per_window: int = 5
    time_range: Optional[tuple] = None    # (start_ms, end_ms), end exclusive

    def validate(self) -> None:
        if self.snapshot_seconds <= 0:
            raise ValueError(f"snapshot_seconds must be positive, got {self.snapshot_seconds}")
        if self.snapshots_per_window < 1:
            raise ValueError(f"snapshots_per_window must be >= 1, got {self.snapshots_per_window}")
        if self.time_range is not None and self.time_range[1] <= self.time_range[0]:
            raise ValueError(f"empty time_range {self.time_range}")

    @property
    def snapshot_ms(self) -> int:
        ms = int(round(self.snapshot_seconds * 1000))
        return max(ms, 1)


def build_windows(records: Sequence[FlowRecord], features: np.ndarray,
                  cfg: WindowConfig, labels: Optional[np.ndarray] = None) -> List[WindowGraph]:
    """Partition time-sorted records into windows of snapshot graphs.

    Records must be sorted by start_time and row-aligned with `features`
    (and `labels` when given). Flows are assigned to the snapshot containing
    their start_time; the tail window is padded with empty snapshots so all
    windows span the same number of snapshots.
    """
    cfg.validate()
    n = len(records)
    if features.shape[0] != n:
        raise ValueError(f"features rows ({features.shape[0]}) != records ({n})")
    if labels is not None and len(labels) != n:
        raise ValueError(f"labels length ({len(labels)}) != records ({n})")

    times = np.array([r.start_time for r in records], dtype=np.int64)
    if n and np.any(np.diff(times) < 0):
        raise ValueError("records are not sorted by start_time")

    if cfg.time_range is not None:
        t0, t_end = int(cfg.time_range[0]), int(cfg.time_range[1])
        keep = (times >= t0) & (times < t_end)
        records = [r for r, k in zip(records, keep) if k]
        features = features[keep]
        times = times[keep]
        if labels is not None:
            labels = labels[keep]
        n = len(records)
        n_snapshots = -((t0 - t_end) // cfg.snapshot_ms)
    else:
        if n == 0:
            return []
        t0 = int(times[0])
        n_snapshots = int((times[-1] - t0) // cfg.snapshot_ms) + 1

    spw = cfg.snapshots_per_window
    n_windows = max(1, -(-n_snapshots // spw))
    snap_of = (times - t0) // cfg.snapshot_ms
    # records sorted by time => snapshot membership is a contiguous slice
    bounds = np.searchsorted(snap_of, np.arange(n_windows * spw + 1))

    windows = []
    for w in range(n_windows):
        snaps = []
        for s in range(w * spw, (w + 1) * spw):
            lo, hi = int(bounds[s]), int(bounds[s + 1])
            snaps.append(_build_snapshot(
                records[lo:hi], features[lo:hi], times[lo:hi],
                labels[lo:hi] if labels is not None else None))
        windows.append(WindowGraph(snapshots=snaps, cross_edges=_cross_edges(snaps)))
    return windows


def _build_snapshot(records: Sequence[FlowRecord], features: np.ndarray,
                    times: np.ndarray, labels: Optional[np.ndarray]) -> SnapshotGraph:
    n = len(records)
    ip_ids = sorted({r.src_ip for r in records} | {r.dst_ip for r in records})
    ip_index = {ip: i for i, ip in enumerate(ip_ids)}

    edges = _empty_edges()
    if n:
        src = np.array([ip_index[r.src_ip] for r in records], dtype=np.int32)
        dst = np.array([ip_index[r.dst_ip] for r in records], dtype=np.int32)
        flow = np.arange(n, dtype=np.int32)
        edges[EdgeType.IP_TO_FLOW_SRC] = np.column_stack([src, flow])
        edges[EdgeType.FLOW_TO_IP_SRC] = np.column_stack([flow, src])
        edges[EdgeType.IP_TO_FLOW_DST] = np.column_stack([dst, flow])
        edges[EdgeType.FLOW_TO_IP_DST] = np.column_stack([flow, dst])
        edges[EdgeType.FLOW_FOLLOWS_SRC] = _follow_chains(src)
        edges[EdgeType.FLOW_FOLLOWS_DST] = _follow_chains(dst)

    return SnapshotGraph(flow_features=features.astype(np.float32, copy=False),
                         ip_ids=ip_ids, flow_times=times.astype(np.int64),
                         edges=edges,
                         flow_labels=None if labels is None else labels.astype(np.int32))


def _follow_chains(ip_of_flow: np.ndarray) -> np.ndarray:
    """Chain consecutive flows per IP. Local flow order already encodes the
    (start_time, input order) tie-break because input records are presorted."""
    last_seen: Dict[int, int] = {}
    pairs = []
    for j, ip in enumerate(ip_of_flow.tolist()):
        prev = last_seen.get(ip)
        if prev is not None:
            pairs.append((prev, j))
        last_seen[ip] = j
    if not pairs:
        return np.zeros((0, 2), dtype=np.int32)
    return np.array(pairs, dtype=np.int32)


def _cross_edges(snaps: List[SnapshotGraph]) -> np.ndarray:
    rows = []
    for t in range(len(snaps) - 1):
        nxt = {ip: j for j, ip in enumerate(snaps[t + 1].ip_ids)}
        for i, ip in enumerate(snaps[t].ip_ids):
            j = nxt.get(ip)
            if j is not None:
                rows.append((t, i, j))
    if not rows:
        return np.zeros((0, 3), dtype=np.int32)
    return np.array(rows, dtype=np.int32)


# ---------------------------------------------------------------------------
# validation


def validate_graph(w: WindowGraph) -> List[str]:
    """Check every structural invariant; returns one message per violation."""
    out: List[str] = []
    for s_idx, s in enumerate(w.snapshots):
        out.extend(_validate_snapshot(s, s_idx))

    n_snaps = len(w.snapshots)
    seen_pairs = set()
    for t, i, j in np.asarray(w.cross_edges, dtype=np.int64).reshape(-1, 3):
        if not 0 <= t < n_snaps - 1:
            out.append(f"cross edge at snapshot {t} does not join consecutive snapshots")
            continue
        a, b = w.snapshots[t], w.snapshots[t + 1]
        if i >= a.ip_count or j >= b.ip_count:
            out.append(f"cross edge ({t},{i},{j}) has an out-of-range ip index")
            continue
        if a.ip_ids[i] != b.ip_ids[j]:
            out.append(f"cross edge ({t},{i},{j}) joins different ips "
                       f"{a.ip_ids[i]!r} and {b.ip_ids[j]!r}")
        if (t, i, j) in seen_pairs:
            out.append(f"duplicate cross edge ({t},{i},{j})")
        seen_pairs.add((t, i, j))
    for t in range(n_snaps - 1):
        common = set(w.snapshots[t].ip_ids) & set(w.snapshots[t + 1].ip_ids)
        have = {w.snapshots[t].ip_ids[i] for (tt, i, _) in seen_pairs if tt == t}
        for ip in sorted(common - have):
            out.append(f"recurring ip {ip!r} between snapshots {t} and {t + 1} "
                       "has no ip_same_across edge")
    return out


def _validate_snapshot(s: SnapshotGraph, s_idx: int) -> List[str]:
    out: List[str] = []
    n, m = s.n_flows, s.ip_count
    where = f"snapshot {s_idx}"

    if s.flow_times.shape[0] != n:
        out.append(f"{where}: flow_times length {s.flow_times.shape[0]} != {n} flows")
    if s.flow_labels is not None and s.flow_labels.shape[0] != n:
        out.append(f"{where}: flow_labels length {s.flow_labels.shape[0]} != {n} flows")

    limits = {NodeType.FLOW: n, NodeType.IP: m}
    for etype in SNAPSHOT_EDGE_TYPES:
        pairs = np.asarray(s.edges[etype], dtype=np.int64).reshape(-1, 2)
        st, dt = EDGE_ENDPOINTS[etype]
        seen = set()
        for src, dst in pairs:
            if src < 0 or src >= limits[st] or dst < 0 or dst >= limits[dt]:
                out.append(f"{where}: {etype.value} edge ({src},{dst}) out of range")
                continue
            if st is dt and src == dst:
                out.append(f"{where}: {etype.value} self-loop at node {src}")
            if (src, dst) in seen:
                out.append(f"{where}: duplicate {etype.value} edge ({src},{dst})")
            seen.add((src, dst))

    # every flow must attach to exactly one src ip and one dst ip, both ways
    for etype, retype, role in ((EdgeType.IP_TO_FLOW_SRC, EdgeType.FLOW_TO_IP_SRC, "src"),
                                (EdgeType.IP_TO_FLOW_DST, EdgeType.FLOW_TO_IP_DST, "dst")):
        fwd = np.asarray(s.edges[etype], dtype=np.int64).reshape(-1, 2)
        rev = np.asarray(s.edges[retype], dtype=np.int64).reshape(-1, 2)
        by_flow: Dict[int, List[int]] = {}
        for ip, flow in fwd:
            by_flow.setdefault(int(flow), []).append(int(ip))
        rev_set = {(int(a), int(b)) for a, b in rev}
        for flow in range(n):
            ips = by_flow.get(flow, [])
            if len(ips) != 1:
                out.append(f"{where}: flow {flow} has {len(ips)} {etype.value} edges, expected 1")
                continue
            if (flow, ips[0]) not in rev_set:
                out.append(f"{where}: flow {flow} missing reverse {retype.value} edge to ip {ips[0]}")
        if len(rev_set) != len(fwd):
            out.append(f"{where}: {retype.value} has {len(rev_set)} edges "
                       f"but {etype.value} has {len(fwd)}")
        # chains must link consecutive same-ip flows in (time, index) order
        follows = EdgeType.FLOW_FOLLOWS_SRC if role == "src" else EdgeType.FLOW_FOLLOWS_DST
        ip_of = {flow: ips[0] for flow, ips in by_flow.items() if len(ips) == 1}
        if len(ip_of) == n:
            expected = _follow_chains(np.array([ip_of[f] for f in range(n)], dtype=np.int32))
            got = np.asarray(s.edges[follows], dtype=np.int32).reshape(-1, 2)
            exp_set = {tuple(e) for e in expected.tolist()}
            got_set = {tuple(e) for e in got.tolist()}
            for e in sorted(exp_set - got_set):
                out.append(f"{where}: missing {follows.value} edge {e}")
            for e in sorted(got_set - exp_set):
                out.append(f"{where}: unexpected {follows.value} edge {e}")
    return out


# ---------------------------------------------------------------------------
# stats


@dataclass
class GraphStats:
    n_flows: int = 0
    n_ips: int = 0
    n_snapshots: int = 0
    edge_counts: Dict[str, int] = field(default_factory=dict)
    flow_hist: Dict[int, int] = field(default_factory=dict)   # flows-per-snapshot -> count

    def __add__(self, other: "GraphStats") -> "GraphStats":
        counts = dict(self.edge_counts)
        for k, v in other.edge_counts.items():
            counts[k] = counts.get(k, 0) + v
        hist = dict(self.flow_hist)
        for k, v in other.flow_hist.items():
            hist[k] = hist.get(k, 0) + v
        return GraphStats(self.n_flows + other.n_flows, self.n_ips + other.n_ips,
                          self.n_snapshots + other.n_snapshots, counts, hist)


def graph_stats(w: WindowGraph) -> GraphStats:
    stats = GraphStats(edge_counts={t.value: 0 for t in EdgeType})
    for s in w.snapshots:
        stats.n_flows += s.n_flows
        stats.n_ips += s.ip_count
        stats.n_snapshots += 1
        for etype in SNAPSHOT_EDGE_TYPES:
            stats.edge_counts[etype.value] += len(s.edges[etype])
        stats.flow_hist[s.n_flows] = stats.flow_hist.get(s.n_flows, 0) + 1
    stats.edge_counts[EdgeType.IP_SAME_ACROSS.value] += len(w.cross_edges)
    return stats


# ---------------------------------------------------------------------------
# serialization: a JSON debug form and a compact little-endian binary form


def window_to_dict(w: WindowGraph) -> dict:
    return {
        "snapshots": [{
            "flow_features": s.flow_features.tolist(),
            "ip_ids": list(s.ip_ids),
            "flow_times": s.flow_times.tolist(),
            "flow_labels": None if s.flow_labels is None else s.flow_labels.tolist(),
            "edges": {t.value: s.edges[t].tolist() for t in SNAPSHOT_EDGE_TYPES},
        } for s in w.snapshots],
        "cross_edges": w.cross_edges.tolist(),
    }


def window_from_dict(d: dict) -> WindowGraph:
    snaps = []
    for sd in d["snapshots"]:
        feats = np.asarray(sd["flow_features"], dtype=np.float32)
        if feats.ndim != 2:
            feats = feats.reshape(len(sd["flow_times"]), -1)
        snaps.append(SnapshotGraph(
            flow_features=feats,
            ip_ids=list(sd["ip_ids"]),
            flow_times=np.asarray(sd["flow_times"], dtype=np.int64),
            edges={t: np.asarray(sd["edges"][t.value], dtype=np.int32).reshape(-1, 2)
                   for t in SNAPSHOT_EDGE_TYPES},
            flow_labels=None if sd["flow_labels"] is None
            else np.asarray(sd["flow_labels"], dtype=np.int32)))
    return WindowGraph(snapshots=snaps,
                       cross_edges=np.asarray(d["cross_edges"], dtype=np.int32).reshape(-1, 3))


def save_windows_json(path, windows: Sequence[WindowGraph], meta: Optional[dict] = None) -> None:
    doc = {"format_version": GRAPH_FORMAT_VERSION, "meta": meta or {},
           "windows": [window_to_dict(w) for w in windows]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def load_windows_json(path) -> tuple[List[WindowGraph], dict]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format_version") != GRAPH_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported graph format_version {doc.get('format_version')}")
    return [window_from_dict(d) for d in doc["windows"]], doc.get("meta", {})


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_windows(path, windows: Sequence[WindowGraph], meta: Optional[dict] = None) -> None:
    """Binary container: little-endian integers, float32 features."""
    mbytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_GRAPH_MAGIC)
        f.write(struct.pack("<II", GRAPH_FORMAT_VERSION, len(mbytes)))
        f.write(mbytes)
        f.write(struct.pack("<I", len(windows)))
        for w in windows:
            f.write(struct.pack("<I", len(w.snapshots)))
            for s in w.snapshots:
                feats = np.ascontiguousarray(s.flow_features.astype("<f4", copy=False))
                f.write(struct.pack("<III", s.n_flows, feats.shape[1] if feats.ndim == 2 else 0,
                                    s.ip_count))
                f.write(feats.tobytes())
                f.write(s.flow_times.astype("<i8").tobytes())
                f.write(struct.pack("<B", 1 if s.flow_labels is not None else 0))
                if s.flow_labels is not None:
                    f.write(s.flow_labels.astype("<i4").tobytes())
                for ip in s.ip_ids:
                    f.write(_pack_str(ip))
                for etype in SNAPSHOT_EDGE_TYPES:
                    pairs = s.edges[etype]
                    f.write(struct.pack("<I", len(pairs)))
                    f.write(np.ascontiguousarray(pairs.astype("<i4")).tobytes())
            f.write(struct.pack("<I", len(w.cross_edges)))
            f.write(np.ascontiguousarray(w.cross_edges.astype("<i4")).tobytes())


def load_windows(path) -> tuple[List[WindowGraph], dict]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _GRAPH_MAGIC:
        raise ValueError(f"{path}: not a graph file (bad magic {data[:4]!r})")
    version, mlen = struct.unpack_from("<II", data, 4)
    if version != GRAPH_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported graph format_version {version}")
    pos = 12
    meta = json.loads(data[pos:pos + mlen].decode("utf-8"))
    pos += mlen

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    (n_windows,) = take("<I")
    windows = []
    for _ in range(n_windows):
        (n_snaps,) = take("<I")
        snaps = []
        for _ in range(n_snaps):
            n_flows, feat_dim, n_ips = take("<III")
            feats = np.frombuffer(data, dtype="<f4", count=n_flows * feat_dim,
                                  offset=pos).reshape(n_flows, feat_dim).copy()
            pos += 4 * n_flows * feat_dim
            times = np.frombuffer(data, dtype="<i8", count=n_flows, offset=pos).copy()
            pos += 8 * n_flows
            (has_labels,) = take("<B")
            labels = None
            if has_labels:
                labels = np.frombuffer(data, dtype="<i4", count=n_flows, offset=pos).copy()
                pos += 4 * n_flows
            ip_ids = []
            for _ in range(n_ips):
                (slen,) = take("<H")
                ip_ids.append(data[pos:pos + slen].decode("utf-8"))
                pos += slen
            edges = {}
            for etype in SNAPSHOT_EDGE_TYPES:
                (k,) = take("<I")
                edges[etype] = np.frombuffer(data, dtype="<i4", count=2 * k,
                                             offset=pos).reshape(k, 2).copy()
                pos += 8 * k
            snaps.append(SnapshotGraph(flow_features=feats, ip_ids=ip_ids,
                                       flow_times=times, edges=edges, flow_labels=labels))
        (k,) = take("<I")
        cross = np.frombuffer(data, dtype="<i4", count=3 * k, offset=pos).reshape(k, 3).copy()
        pos += 12 * k
        windows.append(WindowGraph(snapshots=snaps, cross_edges=cross))
    return windows, meta
