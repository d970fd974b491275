"""Fine-tune flow classification from a pretrained base vs from scratch,
under a 50-epoch budget with macro-F1 model selection.

Run: python demos/05_finetune_classification.py   (~1 minute)
"""
import numpy as np

from flowsage import FinetuneConfig, ModelConfig, PretrainConfig, SynthConfig, WindowConfig, \
    build_windows, compute_metrics, encode_labels, finetune, fit_feature_spec, generate_flows, \
    predict, pretrain, transform

corpus = generate_flows(SynthConfig(n_classes=4, target_flows=5000, duration_s=330,
                                    n_ips=50, seed=21))
spec = fit_feature_spec(corpus)
codec, labels = encode_labels(corpus)
windows = build_windows(corpus, transform(corpus, spec), WindowConfig(2.0, 5), labels=labels)
split = int(0.7 * len(windows))
train_w, test_w = windows[:split], windows[split:]

mcfg = ModelConfig(feature_dim=spec.output_dim, hidden_dim=64, n_spatial_layers=2,
                   decoder_hidden_dim=16, n_classes=codec.n_classes, seed=2)
base, _ = pretrain(train_w, mcfg, PretrainConfig(epochs=10, seed=4))
print("pretrained base ready\n")

ft_cfg = FinetuneConfig(epochs=50, n_train_samples=120, seed=8)
for name, init_from in (("scratch", None), ("pretrained", base)):
    ckpt, log = finetune(train_w, mcfg, ft_cfg, init_from=init_from)
    pred, _ = predict(ckpt, test_w)
    truth = np.concatenate([s.flow_labels for w in test_w for s in w.snapshots if s.n_flows])
    m = compute_metrics(truth, pred, codec.n_classes)
    best = max(r.val_macro_f1 for r in log)
    print(f"{name:10s}: 120 labeled flows, best val macroF1 {best:.3f} | "
          f"test acc {m.accuracy:.3f}, weighted F1 {m.weighted_f1:.3f}, "
          f"macro F1 {m.macro_f1:.3f}")

print("\nper-class F1 of the pretrained run:")
for cls, pc in zip(codec.class_names, m.per_class):
    print(f"  {cls:14s} f1 {pc.f1:.3f}  (support {pc.support})")
