"""Relation-typed mean-aggregation network over flow/IP window graphs.

Encoder: flow features and all-ones IP vectors are first projected to the
hidden width; then, for each message-passing round, every node updates as

    h' = relu(W_self h  +  sum over incoming relations r of
                           W_r * mean(neighbor states under r)  +  b)

with one weight matrix per relation per round and the mean of an empty
neighborhood defined as zero. Temporal relations are directed oldest to
newest, so cross-snapshot information only ever flows forward in time.

Decoder: per edge type, a one-hidden-layer MLP scores concat(h_src, h_dst)
into a single real/fake logit. Classification head: fully-connected relu
layers over final flow embeddings, linear output.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._util import fingerprint
from .autodiff import Tensor, add, concat, dropout, matmul, relu, row_gather, segment_mean
from .graphs import EdgeType, WindowGraph
from .nn import ParamDict, count_parameters, init_bias, init_weight, read_param_file, write_param_file

FLOW_IN_RELATIONS = (EdgeType.IP_TO_FLOW_SRC, EdgeType.IP_TO_FLOW_DST,
                     EdgeType.FLOW_FOLLOWS_SRC, EdgeType.FLOW_FOLLOWS_DST)
IP_IN_RELATIONS = (EdgeType.FLOW_TO_IP_SRC, EdgeType.FLOW_TO_IP_DST, EdgeType.IP_SAME_ACROSS)

_ARCH_FIELDS = ("feature_dim", "ip_feature_dim", "hidden_dim", "n_spatial_layers",
                "decoder_hidden_dim", "head_hidden_dims", "n_classes", "with_decoder")
_ENCODER_FIELDS = ("feature_dim", "ip_feature_dim", "hidden_dim", "n_spatial_layers")


class IncompatibleCheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    ip_feature_dim: int = 8
    hidden_dim: int = 160
    n_spatial_layers: int = 3
    decoder_hidden_dim: int = 32
    head_hidden_dims: Tuple[int, ...] = (64,)
    n_classes: Optional[int] = None
    with_decoder: bool = True
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim <= 0:
            raise ValueError(f"hidden_dim must be positive, got {self.hidden_dim}")
        if self.n_spatial_layers < 1:
            raise ValueError(f"n_spatial_layers must be >= 1, got {self.n_spatial_layers}")
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")
        object.__setattr__(self, "head_hidden_dims", tuple(self.head_hidden_dims))

    def arch_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in d.items() if k in _ARCH_FIELDS}

    def config_fingerprint(self) -> str:
        return fingerprint(self.arch_dict())


def default_config(feature_dim: int = 25, **overrides) -> ModelConfig:
    """Default preset. feature_dim 25 is the canonical feature width on a
    corpus with three observed protocols and all three port classes."""
    return ModelConfig(feature_dim=feature_dim, **overrides)


def init_model(cfg: ModelConfig) -> ParamDict:
    """Seeded Glorot-uniform weights, zero biases. Each parameter is seeded
    from (cfg.seed, name), so shared names initialize identically across
    model variants built with the same seed."""
    h = cfg.hidden_dim
    s = cfg.seed
    params: ParamDict = {}

    def weight(name, shape):
        params[name] = init_weight(name, shape, s)

    def bias(name, shape):
        params[name] = init_bias(name, shape, s)

    weight("encoder.flow_proj.weight", (cfg.feature_dim, h))
    bias("encoder.flow_proj.bias", (h,))
    weight("encoder.ip_proj.weight", (cfg.ip_feature_dim, h))
    bias("encoder.ip_proj.bias", (h,))
    for layer in range(cfg.n_spatial_layers):
        weight(f"encoder.layer{layer}.self.flow.weight", (h, h))
        weight(f"encoder.layer{layer}.self.ip.weight", (h, h))
        for etype in EdgeType:
            weight(f"encoder.layer{layer}.rel.{etype.value}.weight", (h, h))
        bias(f"encoder.layer{layer}.bias.flow", (h,))
        bias(f"encoder.layer{layer}.bias.ip", (h,))
    if cfg.with_decoder:
        dh = cfg.decoder_hidden_dim
        for etype in EdgeType:
            weight(f"decoder.{etype.value}.w1", (2 * h, dh))
            bias(f"decoder.{etype.value}.b1", (dh,))
            weight(f"decoder.{etype.value}.w2", (dh, 1))
            bias(f"decoder.{etype.value}.b2", (1,))
    if cfg.n_classes is not None:
        prev = h
        for i, width in enumerate(cfg.head_hidden_dims):
            weight(f"head.hidden{i}.weight", (prev, width))
            bias(f"head.hidden{i}.bias", (width,))
            prev = width
        weight("head.out.weight", (prev, cfg.n_classes))
        bias("head.out.bias", (cfg.n_classes,))
    return params


# ---------------------------------------------------------------------------
# window packing: snapshots get concatenated into one flat node space so a
# whole batch of windows runs through a single set of matmuls


@dataclass
class PackedGraphs:
    windows: List[WindowGraph]
    flow_x: np.ndarray                   # (n_flow, feature_dim)
    n_flow: int
    n_ip: int
    edges: Dict[EdgeType, Tuple[np.ndarray, np.ndarray]]   # global (src, dst) per type
    flow_off: List[List[int]]            # [window][snapshot] -> first global flow index
    ip_off: List[List[int]]
    flow_window: np.ndarray              # (n_flow,) int32, window index per flow
    labels: Optional[np.ndarray] = None  # (n_flow,) int32 when every snapshot is labeled
    feature_dim: int = 0

    def edge_count(self) -> int:
        return sum(len(src) for src, _ in self.edges.values())


def pack_windows(windows: Sequence[WindowGraph]) -> PackedGraphs:
    feature_dim = 0
    for w in windows:
        for s in w.snapshots:
            if s.flow_features.ndim == 2 and s.flow_features.shape[1]:
                feature_dim = s.flow_features.shape[1]

    src_acc: Dict[EdgeType, list] = {t: [] for t in EdgeType}
    dst_acc: Dict[EdgeType, list] = {t: [] for t in EdgeType}
    feats, labels, flow_window = [], [], []
    flow_off: List[List[int]] = []
    ip_off: List[List[int]] = []
    n_flow = n_ip = 0
    all_labeled = True

    for w_idx, w in enumerate(windows):
        flow_off.append([])
        ip_off.append([])
        for s in w.snapshots:
            flow_off[-1].append(n_flow)
            ip_off[-1].append(n_ip)
            if s.n_flows:
                feats.append(s.flow_features.reshape(s.n_flows, -1))
                flow_window.append(np.full(s.n_flows, w_idx, dtype=np.int32))
                if s.flow_labels is None:
                    all_labeled = False
                else:
                    labels.append(s.flow_labels)
            for etype, pairs in s.edges.items():
                if len(pairs):
                    st, dt = _offsets_for(etype, n_flow, n_ip)
                    src_acc[etype].append(pairs[:, 0].astype(np.int64) + st)
                    dst_acc[etype].append(pairs[:, 1].astype(np.int64) + dt)
            n_flow += s.n_flows
            n_ip += s.ip_count
        if len(w.cross_edges):
            ce = w.cross_edges.astype(np.int64)
            src_acc[EdgeType.IP_SAME_ACROSS].append(
                np.array(ip_off[-1], dtype=np.int64)[ce[:, 0]] + ce[:, 1])
            dst_acc[EdgeType.IP_SAME_ACROSS].append(
                np.array(ip_off[-1], dtype=np.int64)[ce[:, 0] + 1] + ce[:, 2])

    edges = {}
    for etype in EdgeType:
        if src_acc[etype]:
            edges[etype] = (np.concatenate(src_acc[etype]), np.concatenate(dst_acc[etype]))
        else:
            edges[etype] = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    flow_x = (np.concatenate(feats, axis=0) if n_flow
              else np.zeros((0, feature_dim), dtype=np.float32))
    if flow_x.shape[1] == 0 and feature_dim:
        flow_x = np.zeros((n_flow, feature_dim), dtype=np.float32)
    return PackedGraphs(
        windows=list(windows), flow_x=flow_x.astype(np.float32, copy=False),
        n_flow=n_flow, n_ip=n_ip, edges=edges, flow_off=flow_off, ip_off=ip_off,
        flow_window=(np.concatenate(flow_window) if flow_window
                     else np.zeros(0, dtype=np.int32)),
        labels=(np.concatenate(labels) if (all_labeled and labels) else None),
        feature_dim=flow_x.shape[1])


def _offsets_for(etype: EdgeType, flow_base: int, ip_base: int) -> Tuple[int, int]:
    from .graphs import EDGE_ENDPOINTS, NodeType
    st, dt = EDGE_ENDPOINTS[etype]
    return (flow_base if st is NodeType.FLOW else ip_base,
            flow_base if dt is NodeType.FLOW else ip_base)


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class Embeddings:
    flow: Tensor      # (n_flow, hidden)
    ip: Tensor        # (n_ip, hidden)
    packed: PackedGraphs


def encode(packed: PackedGraphs, cfg: ModelConfig, params: ParamDict,
           training: bool = False, rng: Optional[np.random.Generator] = None) -> Embeddings:
    if packed.feature_dim and packed.feature_dim != cfg.feature_dim:
        raise ValueError(f"encode: graph feature_dim {packed.feature_dim} != "
                         f"model feature_dim {cfg.feature_dim}")
    h_flow = add(matmul(Tensor(packed.flow_x if packed.feature_dim else
                               np.zeros((packed.n_flow, cfg.feature_dim), dtype=np.float32)),
                        params["encoder.flow_proj.weight"]),
                 params["encoder.flow_proj.bias"])
    ones = Tensor(np.ones((packed.n_ip, cfg.ip_feature_dim), dtype=np.float32))
    h_ip = add(matmul(ones, params["encoder.ip_proj.weight"]), params["encoder.ip_proj.bias"])

    for layer in range(cfg.n_spatial_layers):
        prefix = f"encoder.layer{layer}"
        states = {"flow": h_flow, "ip": h_ip}
        sizes = {"flow": packed.n_flow, "ip": packed.n_ip}
        new_states = {}
        for ntype, relations in (("flow", FLOW_IN_RELATIONS), ("ip", IP_IN_RELATIONS)):
            acc = matmul(states[ntype], params[f"{prefix}.self.{ntype}.weight"])
            for etype in relations:
                src, dst = packed.edges[etype]
                if len(src) == 0:
                    continue
                neighbor_type = "flow" if _src_is_flow(etype) else "ip"
                msgs = row_gather(states[neighbor_type], src)
                agg = segment_mean(msgs, dst, sizes[ntype])
                acc = add(acc, matmul(agg, params[f"{prefix}.rel.{etype.value}.weight"]))
            out = relu(add(acc, params[f"{prefix}.bias.{ntype}"]))
            if cfg.dropout > 0:
                out = dropout(out, cfg.dropout, training, rng)
            new_states[ntype] = out
        h_flow, h_ip = new_states["flow"], new_states["ip"]
    return Embeddings(flow=h_flow, ip=h_ip, packed=packed)


def _src_is_flow(etype: EdgeType) -> bool:
    from .graphs import EDGE_ENDPOINTS, NodeType
    return EDGE_ENDPOINTS[etype][0] is NodeType.FLOW


def score_edges(emb: Embeddings, candidates: Dict[EdgeType, Tuple[np.ndarray, np.ndarray]],
                params: ParamDict) -> Dict[EdgeType, Tensor]:
    """Per-type real/fake logits for candidate edges given in global indices."""
    out: Dict[EdgeType, Tensor] = {}
    for etype in EdgeType:
        if etype not in candidates:
            continue
        src, dst = candidates[etype]
        if len(src) == 0:
            continue
        h_src = row_gather(emb.flow if _src_is_flow(etype) else emb.ip, src)
        from .graphs import EDGE_ENDPOINTS, NodeType
        dst_is_flow = EDGE_ENDPOINTS[etype][1] is NodeType.FLOW
        h_dst = row_gather(emb.flow if dst_is_flow else emb.ip, dst)
        x = concat([h_src, h_dst])
        hidden = relu(add(matmul(x, params[f"decoder.{etype.value}.w1"]),
                          params[f"decoder.{etype.value}.b1"]))
        out[etype] = add(matmul(hidden, params[f"decoder.{etype.value}.w2"]),
                         params[f"decoder.{etype.value}.b2"])
    unknown = set(candidates) - set(EdgeType)
    if unknown:
        raise ValueError(f"score_edges: unknown edge types {sorted(t for t in unknown)}")
    return out


def classify_flows(flow_h: Tensor, cfg: ModelConfig, params: ParamDict) -> Tensor:
    if cfg.n_classes is None:
        raise ValueError("classify_flows: model config has no n_classes")
    h = flow_h
    for i in range(len(cfg.head_hidden_dims)):
        h = relu(add(matmul(h, params[f"head.hidden{i}.weight"]), params[f"head.hidden{i}.bias"]))
    return add(matmul(h, params["head.out.weight"]), params["head.out.bias"])


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    cfg: ModelConfig
    params: ParamDict

    def save(self, path) -> None:
        save_checkpoint(path, self.cfg, self.params)

    @classmethod
    def load(cls, path, expect: Optional[ModelConfig] = None) -> "Checkpoint":
        cfg, params = load_checkpoint(path, expect)
        return cls(cfg=cfg, params=params)


def save_checkpoint(path, cfg: ModelConfig, params: ParamDict) -> None:
    header = {"kind": "flowsage-checkpoint",
              "model_config": _cfg_to_dict(cfg),
              "config_fingerprint": cfg.config_fingerprint()}
    write_param_file(path, params, header)


def load_checkpoint(path, expect: Optional[ModelConfig] = None) -> Tuple[ModelConfig, ParamDict]:
    manifest, arrays = read_param_file(path)
    cfg = _cfg_from_dict(manifest["model_config"])
    if manifest.get("config_fingerprint") != cfg.config_fingerprint():
        raise IncompatibleCheckpointError(f"{path}: config fingerprint mismatch (corrupt file?)")
    if expect is not None:
        diffs = _arch_diffs(expect, cfg)
        if diffs:
            raise IncompatibleCheckpointError(
                f"{path}: incompatible model config, differing fields: " + ", ".join(diffs))
    params = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
    return cfg, params


def _arch_diffs(a: ModelConfig, b: ModelConfig, fields: Sequence[str] = _ARCH_FIELDS) -> List[str]:
    da, db = _cfg_to_dict(a), _cfg_to_dict(b)
    return [f"{k} ({da[k]} != {db[k]})" for k in fields if da[k] != db[k]]


def _cfg_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["head_hidden_dims"] = list(d["head_hidden_dims"])
    return d


def _cfg_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["head_hidden_dims"] = tuple(d.get("head_hidden_dims", ()))
    return ModelConfig(**d)


def init_finetune_from(base: Checkpoint, n_classes: int,
                       seed: Optional[int] = None) -> Checkpoint:
    """Bridge a pretrained checkpoint into a classification model: encoder
    weights are kept, the head is freshly seeded, decoder weights dropped."""
    cfg = ModelConfig(feature_dim=base.cfg.feature_dim,
                      ip_feature_dim=base.cfg.ip_feature_dim,
                      hidden_dim=base.cfg.hidden_dim,
                      n_spatial_layers=base.cfg.n_spatial_layers,
                      decoder_hidden_dim=base.cfg.decoder_hidden_dim,
                      head_hidden_dims=base.cfg.head_hidden_dims,
                      n_classes=n_classes, with_decoder=False,
                      dropout=base.cfg.dropout,
                      seed=base.cfg.seed if seed is None else seed)
    params = init_model(cfg)
    missing = [n for n in params if n.startswith("encoder.") and n not in base.params]
    if missing:
        raise IncompatibleCheckpointError(f"base checkpoint lacks encoder parameters: {missing}")
    for name in params:
        if name.startswith("encoder."):
            params[name] = Tensor(base.params[name].data.copy(), requires_grad=True)
    return Checkpoint(cfg=cfg, params=params)


def model_parameter_count(cfg: ModelConfig) -> int:
    return count_parameters(init_model(cfg))
