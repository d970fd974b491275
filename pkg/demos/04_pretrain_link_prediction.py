"""Self-supervised pretraining: the network learns to tell real graph edges
from destination-corrupted fakes, one fake per real edge, and gets scored by
held-out ranking AUC.

Run: python demos/04_pretrain_link_prediction.py   (~1 minute)
"""
import numpy as np

from flowsage import ModelConfig, PretrainConfig, SynthConfig, WindowConfig, build_windows, \
    count_parameters, evaluate_link_prediction, fit_feature_spec, generate_flows, init_model, \
    pretrain, sample_negatives, transform

flows = generate_flows(SynthConfig(n_classes=4, target_flows=6000, duration_s=400,
                                   n_ips=60, seed=3))
spec = fit_feature_spec(flows)
windows = build_windows(flows, transform(flows, spec), WindowConfig(2.0, 5))
print(f"{len(windows)} unlabeled windows for pretraining")

negs = sample_negatives(windows[0], seed=0)
real = sum(len(s.edges[t]) for s in windows[0].snapshots for t in s.edges) \
    + len(windows[0].cross_edges)
print(f"window 0: {real} real edges, {negs.count()} sampled fakes "
      f"(shortfall {sum(negs.shortfall.values())})")

cfg = ModelConfig(feature_dim=spec.output_dim, hidden_dim=64, n_spatial_layers=2,
                  decoder_hidden_dim=16, seed=11)
print(f"model: {count_parameters(init_model(cfg)):,} parameters "
      "(full-size preset is ~770K)")

ckpt, log = pretrain(windows, cfg, PretrainConfig(epochs=12, windows_per_batch=8, seed=5))
print("\nepoch  train_loss  val_loss  val_auc")
for r in log:
    print(f"{r.epoch:5d}  {r.train_loss:10.4f}  {r.val_loss:8.4f}  {r.val_auc:7.4f}")

held_out = evaluate_link_prediction(ckpt, windows[-4:], seed=99)
print(f"\nheld-out windows: AUC {held_out['auc']:.4f}, "
      f"accuracy@0.5 {held_out['accuracy']:.4f} "
      f"({held_out['n_real']} real vs {held_out['n_fake']} fake edges)")
