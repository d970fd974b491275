"""Supervised fine-tuning of flow classification under an epoch budget.

The whole network (encoder and head) trains end to end; starting from a
pretrained checkpoint only changes initialization, never the loop. Model
selection keeps the epoch with the best validation macro F1, earliest on
ties. A labeled-sample budget subsamples training flows stratified by
class; windows left without any sampled flow are dropped and the loss only
ever sees sampled flows.
"""
from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._util import seeded_rng
from .autodiff import backward, cross_entropy, row_gather
from .graphs import WindowGraph
from .metrics import compute_metrics
from .model import Checkpoint, IncompatibleCheckpointError, ModelConfig, classify_flows, \
    encode, init_finetune_from, init_model, pack_windows
from .nn import AdamState, adam_step, clone_params, zero_grads


@dataclass
class FinetuneConfig:
    epochs: int = 50
    n_train_samples: Optional[int] = None   # cap on labeled flows used for the loss
    seed: int = 0
    val_fraction: float = 0.2
    windows_per_batch: int = 8
    lr: float = 1e-3
    metrics_every: int = 1                  # validation cadence in epochs
    freeze_encoder: bool = False            # advanced; default trains everything

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.n_train_samples is not None and self.n_train_samples < 1:
            raise ValueError(f"n_train_samples must be >= 1, got {self.n_train_samples}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.metrics_every < 1:
            raise ValueError(f"metrics_every must be >= 1, got {self.metrics_every}")


@dataclass
class FinetuneLogRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_macro_f1: float


def _window_labels(w: WindowGraph) -> np.ndarray:
    parts = [s.flow_labels for s in w.snapshots if s.n_flows]
    if any(p is None for p in parts):
        raise ValueError("finetune: window has unlabeled flows")
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int32)


def _dominant_class(labels: np.ndarray) -> int:
    return int(np.bincount(labels).argmax()) if len(labels) else -1


def stratified_window_split(windows: Sequence[WindowGraph], val_fraction: float,
                            seed: int) -> Tuple[List[int], List[int]]:
    """Hold out whole windows, stratified by each window's dominant class."""
    n = len(windows)
    if n < 1:
        raise ValueError("no windows to split")
    if n == 1:
        return [0], [0]
    groups: Dict[int, List[int]] = {}
    for i, w in enumerate(windows):
        groups.setdefault(_dominant_class(_window_labels(w)), []).append(i)
    rng = seeded_rng(seed, "ft-split")
    val: List[int] = []
    for cls in sorted(groups):
        members = groups[cls]
        k = int(round(val_fraction * len(members)))
        perm = rng.permutation(len(members))
        val.extend(members[j] for j in perm[:k])
    val_set = set(val)
    train = [i for i in range(n) if i not in val_set]
    # both sides must be non-empty; move deterministically if a side is bare
    if not val_set:
        val_set = {train.pop()}
    if not train:
        moved = sorted(val_set)[0]
        val_set.remove(moved)
        train = [moved]
    return train, sorted(val_set)


def stratified_sample_mask(labels_per_window: List[np.ndarray], n_samples: int,
                           seed: int) -> List[np.ndarray]:
    """Pick ~n_samples flows across windows, proportionally per class
    (largest-remainder allocation), as boolean masks per window."""
    flat = [(w, j, int(lbl)) for w, labels in enumerate(labels_per_window)
            for j, lbl in enumerate(labels)]
    total = len(flat)
    if n_samples > total:
        raise ValueError(f"n_train_samples {n_samples} exceeds {total} labeled flows")
    by_class: Dict[int, List[int]] = {}
    for pos, (_, _, cls) in enumerate(flat):
        by_class.setdefault(cls, []).append(pos)

    classes = sorted(by_class)
    exact = {c: n_samples * len(by_class[c]) / total for c in classes}
    alloc = {c: min(int(exact[c]), len(by_class[c])) for c in classes}
    leftover = n_samples - sum(alloc.values())
    order = sorted(classes, key=lambda c: (-(exact[c] - int(exact[c])), c))
    while leftover > 0:
        progressed = False
        for c in order:
            if leftover == 0:
                break
            if alloc[c] < len(by_class[c]):
                alloc[c] += 1
                leftover -= 1
                progressed = True
        if not progressed:
            break

    rng = seeded_rng(seed, "sample-cap")
    masks = [np.zeros(len(labels), dtype=bool) for labels in labels_per_window]
    for c in classes:
        pool = by_class[c]
        chosen = rng.permutation(len(pool))[:alloc[c]]
        for j in chosen:
            w, flow, _ = flat[pool[j]]
            masks[w][flow] = True
    return masks


def finetune(windows: Sequence[WindowGraph], model_cfg: ModelConfig, cfg: FinetuneConfig,
             init_from: Optional[Checkpoint] = None,
             train_mask: Optional[List[np.ndarray]] = None,
             ) -> Tuple[Checkpoint, List[FinetuneLogRow]]:
    """Train flow classification end to end and return the best-epoch checkpoint.

    `init_from` switches initialization to a pretrained encoder (head still
    freshly seeded from cfg.seed). `train_mask` (per-window boolean flow
    masks, training windows only after the split) overrides the stratified
    sample draw; it exists for callers that need exact control of which
    flows carry loss.
    """
    cfg.validate()
    if not windows:
        raise ValueError("finetune: no windows")
    labels_all = [_window_labels(w) for w in windows]

    n_classes = model_cfg.n_classes
    observed_max = max((int(l.max()) for l in labels_all if len(l)), default=-1)
    if n_classes is None:
        n_classes = observed_max + 1
    elif observed_max + 1 > n_classes:
        raise ValueError(f"labels reach {observed_max} but model has {n_classes} classes")

    mcfg = dataclasses.replace(model_cfg, n_classes=n_classes, with_decoder=False,
                               seed=cfg.seed)
    observed = set()
    for l in labels_all:
        observed.update(np.unique(l).tolist())
    absent = sorted(set(range(n_classes)) - observed)
    if absent:
        warnings.warn(f"classes {absent} never occur in the given windows", stacklevel=2)

    if init_from is not None:
        diffs = [f for f in ("feature_dim", "ip_feature_dim", "hidden_dim",
                             "n_spatial_layers", "head_hidden_dims")
                 if getattr(mcfg, f) != getattr(init_from.cfg, f)]
        if diffs:
            raise IncompatibleCheckpointError(
                "base checkpoint does not match the model config, differing fields: "
                + ", ".join(f"{f} ({getattr(init_from.cfg, f)} != {getattr(mcfg, f)})"
                            for f in diffs))
        ckpt = init_finetune_from(init_from, n_classes=n_classes, seed=cfg.seed)
        params = ckpt.params
        mcfg = ckpt.cfg
    else:
        params = init_model(mcfg)

    trainable = {k: t for k, t in params.items()
                 if not (cfg.freeze_encoder and k.startswith("encoder."))}
    for k, t in params.items():
        t.requires_grad = k in trainable
    adam = AdamState.for_params(trainable, lr=cfg.lr)

    train_idx, val_idx = stratified_window_split(windows, cfg.val_fraction, cfg.seed)

    if train_mask is not None:
        if len(train_mask) != len(train_idx):
            raise ValueError(f"train_mask has {len(train_mask)} entries "
                             f"for {len(train_idx)} training windows")
        masks = [m.astype(bool) for m in train_mask]
    elif cfg.n_train_samples is not None:
        masks = stratified_sample_mask([labels_all[i] for i in train_idx],
                                       cfg.n_train_samples, cfg.seed)
    else:
        masks = [np.ones(len(labels_all[i]), dtype=bool) for i in train_idx]

    kept = [(i, m) for i, m in zip(train_idx, masks) if m.any()]
    if not kept:
        raise ValueError("finetune: no training window retains a sampled flow")
    train_idx = [i for i, _ in kept]
    masks = [m for _, m in kept]

    val_packed = pack_windows([windows[i] for i in val_idx])
    val_labels = np.concatenate([labels_all[i] for i in val_idx])

    log: List[FinetuneLogRow] = []
    best_f1 = -1.0
    best_params = clone_params(params)

    for epoch in range(cfg.epochs):
        order = seeded_rng(cfg.seed, "ft-order", epoch).permutation(len(train_idx))
        epoch_loss = 0.0
        epoch_rows = 0
        for start in range(0, len(order), cfg.windows_per_batch):
            chunk = [int(i) for i in order[start:start + cfg.windows_per_batch]]
            packed = pack_windows([windows[train_idx[i]] for i in chunk])
            mask = np.concatenate([masks[i] for i in chunk])
            rows = np.flatnonzero(mask)
            if len(rows) == 0:
                continue
            y = np.concatenate([labels_all[train_idx[i]] for i in chunk])[rows]
            emb = encode(packed, mcfg, params, training=True,
                         rng=seeded_rng(cfg.seed, "ft-dropout", epoch, start))
            logits = classify_flows(emb.flow, mcfg, params)
            loss = cross_entropy(row_gather(logits, rows), y)
            zero_grads(trainable)
            backward(loss)
            adam_step(trainable, adam)
            epoch_loss += loss.item() * len(rows)
            epoch_rows += len(rows)

        if epoch % cfg.metrics_every == 0 or epoch == cfg.epochs - 1:
            val_emb = encode(val_packed, mcfg, params)
            val_logits = classify_flows(val_emb.flow, mcfg, params).data
            val_loss = float(cross_entropy_value(val_logits, val_labels))
            pred = val_logits.argmax(axis=1)
            val_f1 = compute_metrics(val_labels, pred, n_classes).macro_f1
            log.append(FinetuneLogRow(epoch=epoch, train_loss=epoch_loss / max(epoch_rows, 1),
                                      val_loss=val_loss, val_macro_f1=val_f1))
            if val_f1 > best_f1:
                best_f1 = val_f1
                best_params = clone_params(params)

    return Checkpoint(cfg=mcfg, params=best_params), log


def cross_entropy_value(logits: np.ndarray, labels: np.ndarray) -> float:
    """Loss value only (no graph), at 64-bit."""
    z = logits.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    return float((lse - z[np.arange(len(labels)), labels]).mean())


def predict(ckpt: Checkpoint, windows: Sequence[WindowGraph]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-flow class indices and logits, flows in (window, snapshot, local)
    order. Argmax ties resolve to the lowest class index."""
    packed = pack_windows(windows)
    emb = encode(packed, ckpt.cfg, ckpt.params)
    logits = classify_flows(emb.flow, ckpt.cfg, ckpt.params).data
    return logits.argmax(axis=1).astype(np.int32), logits
