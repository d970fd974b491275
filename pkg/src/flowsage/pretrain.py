"""Self-supervised link-prediction pretraining.

For every edge type a window actually contains, the sampler fabricates
exactly as many fake edges as there are real ones by corrupting each real
edge's destination: the replacement is drawn uniformly from nodes of the
right type in the right snapshot, rejecting anything that would recreate a
real edge, duplicate an earlier fake, or form a self-loop. On tiny graphs
whose candidate space runs out, the sampler emits what it can and reports
the shortfall per type instead of failing.

Training then scores real edges against label 1 and fresh fakes (resampled
every epoch) against label 0 with a mean binary cross-entropy over all
scored edges, and keeps the parameters from the epoch with the best
held-out ranking AUC.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._util import seeded_rng, stable_seed
from .autodiff import Tensor, backward, bce_with_logits, mul
from .graphs import EDGE_ENDPOINTS, EdgeType, NodeType, WindowGraph
from .metrics import roc_auc
from .model import Checkpoint, Embeddings, ModelConfig, PackedGraphs, encode, init_model, \
    pack_windows, score_edges
from .nn import AdamState, adam_step, clone_params, zero_grads

_REJECTION_TRIES = 32


@dataclass
class PretrainConfig:
    epochs: int = 30
    windows_per_batch: int = 8
    negative_ratio: float = 1.0     # one fake per real edge; other values unsupported
    seed: int = 0
    val_fraction: float = 0.1
    patience: Optional[int] = None  # stop after this many epochs without AUC improvement
    lr: float = 1e-3

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.negative_ratio != 1.0:
            raise ValueError("negative_ratio is fixed at 1.0 (one fake per real edge)")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


@dataclass
class NegativeSampleSet:
    """Fake edges in window-local coordinates.

    Rows are (snapshot, src_local, dst_local); for ip_same_across the
    snapshot column is the source snapshot and dst_local indexes the next
    snapshot's IPs.
    """
    by_type: Dict[EdgeType, np.ndarray] = field(default_factory=dict)
    shortfall: Dict[EdgeType, int] = field(default_factory=dict)

    def count(self) -> int:
        return sum(len(v) for v in self.by_type.values())


def sample_negatives(w: WindowGraph, seed: int) -> NegativeSampleSet:
    """One destination-corrupted fake per real edge, per edge type."""
    if all(len(s.edges[t]) == 0 for s in w.snapshots for t in s.edges) and not len(w.cross_edges):
        raise ValueError("sample_negatives: window has no edges")
    rng = seeded_rng(seed, "negatives")
    out = NegativeSampleSet()

    for etype in EdgeType:
        rows: List[Tuple[int, int, int]] = []
        short = 0
        for snap_idx, real_pairs, pool in _edge_groups(w, etype):
            if len(real_pairs) == 0:
                continue
            self_loops_possible = EDGE_ENDPOINTS[etype][0] is EDGE_ENDPOINTS[etype][1] \
                and etype is not EdgeType.IP_SAME_ACROSS
            real_by_src: Dict[int, set] = {}
            for s, d in real_pairs:
                real_by_src.setdefault(int(s), set()).add(int(d))
            stream = _IntStream(rng, pool, len(real_pairs))
            taken: Dict[int, set] = {}
            for s, _ in real_pairs:
                s = int(s)
                banned = real_by_src[s] | taken.get(s, set())
                if self_loops_possible:
                    banned = banned | {s}
                if len(banned) >= pool:
                    short += 1
                    continue
                pick = _draw_excluding(stream, pool, banned)
                taken.setdefault(s, set()).add(pick)
                rows.append((snap_idx, s, pick))
        if rows:
            out.by_type[etype] = np.array(rows, dtype=np.int32)
        if short:
            out.shortfall[etype] = short
    return out


def _edge_groups(w: WindowGraph, etype: EdgeType):
    """Yield (snapshot index, real edge pairs, destination pool size) groups."""
    if etype is EdgeType.IP_SAME_ACROSS:
        ce = np.asarray(w.cross_edges, dtype=np.int64).reshape(-1, 3)
        for t in range(len(w.snapshots) - 1):
            pairs = ce[ce[:, 0] == t][:, 1:]
            yield t, pairs, w.snapshots[t + 1].ip_count
    else:
        dst_is_flow = EDGE_ENDPOINTS[etype][1] is NodeType.FLOW
        for t, s in enumerate(w.snapshots):
            pool = s.n_flows if dst_is_flow else s.ip_count
            yield t, np.asarray(s.edges[etype], dtype=np.int64).reshape(-1, 2), pool


class _IntStream:
    """Pre-drawn uniform integers in [0, pool); refills in blocks. Consuming
    one value per rejection try keeps the draw order deterministic without
    paying a Generator call per try."""

    def __init__(self, rng: np.random.Generator, pool: int, expect: int):
        self.rng = rng
        self.pool = pool
        self.block = max(64, 2 * expect)
        self.buf = rng.integers(0, pool, size=self.block)
        self.pos = 0

    def take(self) -> int:
        if self.pos >= len(self.buf):
            self.buf = self.rng.integers(0, self.pool, size=self.block)
            self.pos = 0
        v = int(self.buf[self.pos])
        self.pos += 1
        return v


def _draw_excluding(stream: _IntStream, pool: int, banned: set) -> int:
    for _ in range(_REJECTION_TRIES):
        pick = stream.take()
        if pick not in banned:
            return pick
    valid = np.setdiff1d(np.arange(pool), np.fromiter(banned, dtype=np.int64))
    return int(valid[stream.rng.integers(0, len(valid))])


def negatives_to_global(packed: PackedGraphs, window_idx: int,
                        negs: NegativeSampleSet) -> Dict[EdgeType, Tuple[np.ndarray, np.ndarray]]:
    """Map window-local negative rows onto the packed global node space."""
    out = {}
    flow_off = packed.flow_off[window_idx]
    ip_off = packed.ip_off[window_idx]
    for etype, rows in negs.by_type.items():
        st, dt = EDGE_ENDPOINTS[etype]
        t = rows[:, 0].astype(np.int64)
        src_base = np.array(flow_off if st is NodeType.FLOW else ip_off, dtype=np.int64)[t]
        if etype is EdgeType.IP_SAME_ACROSS:
            dst_base = np.array(ip_off, dtype=np.int64)[t + 1]
        else:
            dst_base = np.array(flow_off if dt is NodeType.FLOW else ip_off, dtype=np.int64)[t]
        out[etype] = (src_base + rows[:, 1], dst_base + rows[:, 2])
    return out


def _merge_candidate_sets(sets):
    out: Dict[EdgeType, Tuple[list, list]] = {}
    for cand in sets:
        for etype, (src, dst) in cand.items():
            if len(src) == 0:
                continue
            acc = out.setdefault(etype, ([], []))
            acc[0].append(src)
            acc[1].append(dst)
    return {etype: (np.concatenate(src), np.concatenate(dst))
            for etype, (src, dst) in out.items()}


def _merge_with_targets(pos, neg):
    """Concatenate real (target 1) and fake (target 0) candidates per type,
    so each edge type runs through the decoder once."""
    merged = {}
    targets = {}
    for etype in EdgeType:
        parts, labs = [], []
        for cand, target in ((pos, 1.0), (neg, 0.0)):
            if etype in cand and len(cand[etype][0]):
                parts.append(cand[etype])
                labs.append(np.full(len(cand[etype][0]), target))
        if parts:
            merged[etype] = (np.concatenate([p[0] for p in parts]),
                             np.concatenate([p[1] for p in parts]))
            targets[etype] = np.concatenate(labs)
    return merged, targets


def _link_loss(emb: Embeddings, pos, neg, params) -> Tuple[Tensor, int]:
    """Mean BCE over all scored edges, assembled as an edge-count-weighted
    sum of per-type means."""
    merged, targets = _merge_with_targets(pos, neg)
    logits = score_edges(emb, merged, params)
    total = sum(len(t) for t in targets.values())
    loss = None
    for etype in EdgeType:
        if etype not in logits:
            continue
        k = len(targets[etype])
        term = mul(bce_with_logits(logits[etype], targets[etype]),
                   Tensor(np.asarray(k / total, dtype=np.float32)))
        loss = term if loss is None else loss + term
    return loss, total


def _scored_arrays(emb: Embeddings, pos, neg, params) -> Tuple[np.ndarray, np.ndarray]:
    """(scores, binary labels) over all real and fake candidates, no autodiff."""
    merged, targets = _merge_with_targets(pos, neg)
    logits = score_edges(emb, merged, params)
    scores = [logits[etype].data.reshape(-1) for etype in EdgeType if etype in logits]
    labels = [targets[etype] for etype in EdgeType if etype in targets]
    if not scores:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(scores), np.concatenate(labels)


@dataclass
class PretrainLogRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float


def split_windows(n: int, val_fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    """Seeded by-window holdout. A single window degenerates to val == train."""
    if n < 1:
        raise ValueError("no windows to split")
    if n == 1:
        return [0], [0]
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    perm = seeded_rng(seed, "window-split").permutation(n)
    val = sorted(int(i) for i in perm[:n_val])
    train = sorted(int(i) for i in perm[n_val:])
    return train, val


def pretrain(windows: Sequence[WindowGraph], model_cfg: ModelConfig,
             cfg: PretrainConfig) -> Tuple[Checkpoint, List[PretrainLogRow]]:
    """Train the encoder + edge decoder on real-vs-fake edge classification.

    Returns the checkpoint from the epoch with the highest validation AUC
    (earliest epoch on ties) and the per-epoch training log. Validation
    negatives are sampled once so epoch AUCs are directly comparable;
    training negatives are redrawn from a per-epoch seed.
    """
    cfg.validate()
    usable = [w for w in windows if _has_edges(w)]
    if not usable:
        raise ValueError("pretrain: no windows with edges")

    mcfg = dataclasses.replace(model_cfg, with_decoder=True, n_classes=None)
    params = init_model(mcfg)
    adam = AdamState.for_params(params, lr=cfg.lr)

    train_idx, val_idx = split_windows(len(usable), cfg.val_fraction, cfg.seed)
    val_packed = pack_windows([usable[i] for i in val_idx])
    val_negs = _merge_candidate_sets([
        negatives_to_global(val_packed, k, sample_negatives(usable[i], stable_seed(cfg.seed, "val-neg", i)))
        for k, i in enumerate(val_idx)])

    log: List[PretrainLogRow] = []
    best = (-1.0, -1)   # (auc, -epoch) ordering via strict improvement
    best_params = clone_params(params)

    for epoch in range(cfg.epochs):
        order = seeded_rng(cfg.seed, "epoch-order", epoch).permutation(len(train_idx))
        epoch_loss = 0.0
        epoch_edges = 0
        for start in range(0, len(order), cfg.windows_per_batch):
            chunk = [train_idx[i] for i in order[start:start + cfg.windows_per_batch]]
            packed = pack_windows([usable[i] for i in chunk])
            negs = _merge_candidate_sets([
                negatives_to_global(packed, k,
                                    sample_negatives(usable[i], stable_seed(cfg.seed, "neg", epoch, i)))
                for k, i in enumerate(chunk)])
            emb = encode(packed, mcfg, params, training=True,
                         rng=seeded_rng(cfg.seed, "dropout", epoch, start))
            loss, n_edges = _link_loss(emb, packed.edges, negs, params)
            zero_grads(params)
            backward(loss)
            adam_step(params, adam)
            epoch_loss += loss.item() * n_edges
            epoch_edges += n_edges

        val_emb = encode(val_packed, mcfg, params)
        scores, labels = _scored_arrays(val_emb, val_packed.edges, val_negs, params)
        val_loss = float(np.mean(np.maximum(scores, 0) - scores * labels
                                 + np.log1p(np.exp(-np.abs(scores)))))
        val_auc = roc_auc(labels, scores)
        log.append(PretrainLogRow(epoch=epoch, train_loss=epoch_loss / max(epoch_edges, 1),
                                  val_loss=val_loss, val_auc=val_auc))
        if val_auc > best[0]:
            best = (val_auc, epoch)
            best_params = clone_params(params)
        elif cfg.patience is not None and epoch - best[1] >= cfg.patience:
            break

    return Checkpoint(cfg=mcfg, params=best_params), log


def _has_edges(w: WindowGraph) -> bool:
    return len(w.cross_edges) > 0 or any(len(s.edges[t]) for s in w.snapshots for t in s.edges)


def evaluate_link_prediction(ckpt: Checkpoint, windows: Sequence[WindowGraph],
                             seed: int = 0) -> dict:
    """Held-out real-vs-fake discrimination: ranking AUC and accuracy at 0.5."""
    usable = [w for w in windows if _has_edges(w)]
    if not usable:
        raise ValueError("evaluate_link_prediction: no windows with edges")
    packed = pack_windows(usable)
    negs = _merge_candidate_sets([
        negatives_to_global(packed, k, sample_negatives(w, stable_seed(seed, "eval-neg", k)))
        for k, w in enumerate(usable)])
    emb = encode(packed, ckpt.cfg, ckpt.params)
    scores, labels = _scored_arrays(emb, packed.edges, negs, ckpt.params)
    correct = float(((scores > 0) == (labels == 1)).mean())
    return {"auc": roc_auc(labels, scores), "accuracy": correct,
            "n_real": int((labels == 1).sum()), "n_fake": int((labels == 0).sum())}
