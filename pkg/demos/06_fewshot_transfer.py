"""A miniature few-shot transfer study: pretrain on network setting A,
fine-tune on a shifted setting B at several labeled-sample budgets, and
report every model as percent performance loss against a reference model
trained on all of B's labels.

Run: python demos/06_fewshot_transfer.py   (~3 minutes)
"""
import numpy as np

from flowsage import ModelConfig, PretrainConfig, SynthConfig, TaskData, WindowConfig, \
    build_windows, encode_labels, fit_feature_spec, generate_flows, pretrain, run_fewshot, \
    transform
from flowsage.metrics import METRIC_NAMES

wcfg = WindowConfig(2.0, 5)
setting_a = generate_flows(SynthConfig(target_flows=6000, duration_s=400, n_ips=60, seed=1))
spec = fit_feature_spec(setting_a)
ws_a = build_windows(setting_a, transform(setting_a, spec), wcfg)

shift = dict(shift=0.35, shift_seed=9)
train_b = generate_flows(SynthConfig(target_flows=2500, duration_s=170, n_ips=50,
                                     seed=2, **shift))
test_b = generate_flows(SynthConfig(target_flows=1200, duration_s=80, n_ips=50,
                                    seed=3, **shift))
codec, _ = encode_labels(train_b + test_b)


def windows(flows):
    y = np.array([codec.index_of[f.label] for f in flows], dtype=np.int32)
    return build_windows(flows, transform(flows, spec), wcfg, labels=y)


task = TaskData(train_windows=windows(train_b), test_windows=windows(test_b),
                n_classes=codec.n_classes)
mcfg = ModelConfig(feature_dim=spec.output_dim, hidden_dim=64, n_spatial_layers=2,
                   decoder_hidden_dim=16, seed=5)

base, log = pretrain(ws_a, mcfg, PretrainConfig(epochs=12, seed=6))
print(f"pretrained on setting A: held-out AUC {max(r.val_auc for r in log):.3f}\n")

result = run_fewshot({"setting_b": task}, sample_sizes=[40, 120, 360], n_seeds=2,
                     base=base, model_cfg=mcfg, master_seed=0,
                     epochs=50, reference_epochs=120)

ref = result.references["setting_b"]
print(f"reference (all labels, 120 epochs): acc {ref.accuracy:.3f}, "
      f"macro F1 {ref.macro_f1:.3f}\n")
print("percent loss vs reference (lower is better):")
print(f"{'metric':12s} {'samples':>8s} {'scratch':>9s} {'pretrained':>11s}")
for row_s in result.percent_loss_rows():
    if row_s["strategy"] != "scratch":
        continue
    row_p = next(r for r in result.percent_loss_rows()
                 if r["strategy"] == "pretrained" and r["metric"] == row_s["metric"]
                 and r["sample_size"] == row_s["sample_size"])
    print(f"{row_s['metric']:12s} {row_s['sample_size']:8d} "
          f"{row_s['setting_b']:9.2f} {row_p['setting_b']:11.2f}")
print(f"\naverage percent-loss gap (scratch - pretrained): "
      f"{result.average_gap():+.2f} in pretraining's favor")

curves = result.averaged_curves("train")
p, s = curves[("setting_b", "pretrained")], curves[("setting_b", "scratch")]
frac = np.mean([pi <= si for pi, si in zip(p, s)])
print(f"normalized training-loss curve: pretrained at or below scratch for "
      f"{frac:.0%} of epochs")
