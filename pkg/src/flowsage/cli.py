"""Command-line entry point wiring the full pipeline.

Subcommands: synth, ingest, build-graphs, pretrain, finetune, evaluate,
fewshot. Every run resolves its configuration from defaults, an optional
--config JSON file, and explicit flags (flags win), then writes a run
manifest recording the resolved config, tool version, master seed, and
sha256 digests of all input files next to its primary output. Re-running a
subcommand with the manifest's config and the same inputs reproduces the
primary outputs byte for byte; only manifest timestamps differ.

Exit codes: 0 success, 1 usage/validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
import traceback
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from ._util import sha256_file, stable_seed
from .fewshot import TaskData, run_fewshot, write_curves_csv, write_table_csv
from .finetune import FinetuneConfig, FinetuneLogRow, finetune, predict
from .flows import FeatureSpec, LabelCodec, encode_labels, fit_feature_spec, parse_flows, \
    transform, write_flows_csv
from .graphs import WindowConfig, build_windows, graph_stats, load_windows, save_windows
from .metrics import compute_metrics
from .model import Checkpoint, ModelConfig
from .pretrain import PretrainConfig, evaluate_link_prediction, pretrain
from .synth import SynthConfig, generate_flows

MANIFEST_FORMAT_VERSION = 1


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):   # argparse default exits 2; the contract is 1
        raise UsageError(f"{message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# config resolution


def _load_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    # a manifest from a previous run is accepted directly
    if "config" in doc and "subcommand" in doc:
        return doc["config"]
    return doc


class Resolver:
    """defaults < config file < explicit flags, and remembers the result."""

    def __init__(self, args):
        self.args = args
        self.file_cfg = _load_config_file(args.config) if getattr(args, "config", None) else {}
        self.resolved = {}

    def get(self, key: str, default=None, required: bool = False):
        cli_val = getattr(self.args, key.replace("-", "_"), None)
        val = cli_val if cli_val is not None else self.file_cfg.get(key, default)
        if required and val is None:
            raise UsageError(f"missing required option: --{key} (or '{key}' in --config)")
        self.resolved[key] = val
        return val


def _write_manifest(out_path: Path, subcommand: str, resolved: dict, inputs: list,
                    started: float) -> None:
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "subcommand": subcommand,
        "config": resolved,
        "tool_version": __version__,
        "master_seed": resolved.get("seed", 0),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "started_at": _iso(started),
        "finished_at": _iso(time.time()),
    }
    if out_path.suffix:   # file output: manifest sits alongside
        mpath = out_path.with_name(out_path.name + ".manifest.json")
    else:
        out_path.mkdir(parents=True, exist_ok=True)
        mpath = out_path / "manifest.json"
    mpath.parent.mkdir(parents=True, exist_ok=True)
    with open(mpath, "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")


def _iso(ts: float) -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(ts))


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _write_log_csv(path, rows, fields) -> None:
    import csv
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(fields)
        for r in rows:
            writer.writerow([repr(getattr(r, k)) if isinstance(getattr(r, k), float)
                             else getattr(r, k) for k in fields])


def _model_config_from(res: Resolver, feature_dim: int, **extra) -> ModelConfig:
    return ModelConfig(
        feature_dim=feature_dim,
        ip_feature_dim=int(res.get("ip-feature-dim", 8)),
        hidden_dim=int(res.get("hidden-dim", 160)),
        n_spatial_layers=int(res.get("spatial-layers", 3)),
        decoder_hidden_dim=int(res.get("decoder-hidden", 32)),
        **extra)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    started = time.time()
    res = Resolver(args)
    out = Path(res.get("out", required=True))
    cfg = SynthConfig(
        n_ips=int(res.get("n-ips", 60)),
        n_classes=int(res.get("n-classes", 4)),
        duration_s=float(res.get("duration-s", 120.0)),
        target_flows=int(res.get("target-flows", 5000)),
        seed=int(res.get("seed", 0)),
        shift=float(res.get("shift", 0.0)),
        shift_seed=int(res.get("shift-seed", 0)))
    flows = generate_flows(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_flows_csv(out, flows)
    print(f"wrote {len(flows)} flows to {out}")
    _write_manifest(out, "synth", res.resolved, [], started)
    return 0


def cmd_ingest(args) -> int:
    started = time.time()
    res = Resolver(args)
    inp = _require_file(res.get("input", required=True), "input CSV")
    out = Path(res.get("out", required=True))
    out.mkdir(parents=True, exist_ok=True)

    parsed = parse_flows(inp)
    spec = fit_feature_spec(parsed.records)
    spec.save(out / "feature_spec.json")
    report = {"n_records": len(parsed.records), "malformed": parsed.malformed_count,
              "malformed_rows": parsed.malformed_rows[:20],
              "feature_dim": spec.output_dim, "n_classes": None}
    if all(r.label is not None for r in parsed.records) and parsed.records:
        codec, _ = encode_labels(parsed.records)
        codec.save(out / "label_codec.json")
        report["n_classes"] = codec.n_classes
    with open(out / "ingest_report.json", "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"parsed {report['n_records']} records ({report['malformed']} malformed), "
          f"feature_dim={spec.output_dim}, classes={report['n_classes']}")
    _write_manifest(out, "ingest", res.resolved, [inp], started)
    return 0


def cmd_build_graphs(args) -> int:
    started = time.time()
    res = Resolver(args)
    inp = _require_file(res.get("input", required=True), "input CSV")
    spec_path = _require_file(res.get("spec", required=True), "feature spec")
    out = Path(res.get("out", required=True))
    codec_path = res.get("labels", None)
    wcfg = WindowConfig(snapshot_seconds=float(res.get("snapshot-seconds", 2.0)),
                        snapshots_per_window=int(res.get("snapshots-per-window", 5)))

    parsed = parse_flows(inp)
    records = sorted(parsed.records, key=lambda r: r.start_time)
    spec = FeatureSpec.load(spec_path)
    features = transform(records, spec)

    labels = None
    class_names = None
    inputs = [inp, spec_path]
    if codec_path:
        codec_path = _require_file(codec_path, "label codec")
        inputs.append(codec_path)
        codec = LabelCodec.load(codec_path)
        unlabeled = sum(1 for r in records if r.label is None)
        if unlabeled:
            raise UsageError(f"{unlabeled} records have no label but a codec was given")
        unknown = sorted({r.label for r in records} - set(codec.class_names))
        if unknown:
            raise UsageError(f"labels not in codec: {unknown}")
        labels = np.array([codec.index_of[r.label] for r in records], dtype=np.int32)
        class_names = codec.class_names

    windows = build_windows(records, features, wcfg, labels=labels)
    meta = {"feature_dim": spec.output_dim, "class_names": class_names,
            "snapshot_seconds": wcfg.snapshot_seconds,
            "snapshots_per_window": wcfg.snapshots_per_window}
    out.parent.mkdir(parents=True, exist_ok=True)
    save_windows(out, windows, meta)
    n_edges = sum(sum(graph_stats(w).edge_counts.values()) for w in windows)
    print(f"built {len(windows)} windows ({sum(w.n_flows for w in windows)} flows, "
          f"{n_edges} edges) -> {out}")
    _write_manifest(out, "build-graphs", res.resolved, inputs, started)
    return 0


def cmd_pretrain(args) -> int:
    started = time.time()
    res = Resolver(args)
    graphs_path = _require_file(res.get("graphs", required=True), "graphs file")
    out = Path(res.get("out", required=True))
    windows, meta = load_windows(graphs_path)
    seed = int(res.get("seed", 0))
    pcfg = PretrainConfig(
        epochs=int(res.get("epochs", 30)),
        windows_per_batch=int(res.get("windows-per-batch", 8)),
        seed=stable_seed(seed, "pretrain"),
        val_fraction=float(res.get("val-fraction", 0.1)),
        lr=float(res.get("lr", 1e-3)))
    mcfg = _model_config_from(res, int(meta["feature_dim"]),
                              seed=stable_seed(seed, "model-init"))
    ckpt, log = pretrain(windows, mcfg, pcfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(out)
    _write_log_csv(out.with_name(out.name + ".log.csv"), log,
                   ["epoch", "train_loss", "val_loss", "val_auc"])
    best = max(r.val_auc for r in log)
    print(f"pretrained {len(log)} epochs, best val AUC {best:.4f} -> {out}")
    _write_manifest(out, "pretrain", res.resolved, [graphs_path], started)
    return 0


def cmd_finetune(args) -> int:
    started = time.time()
    res = Resolver(args)
    graphs_path = _require_file(res.get("graphs", required=True), "graphs file")
    out = Path(res.get("out", required=True))
    from_path = res.get("from", None)
    scratch = bool(res.get("scratch", False))
    if (from_path is None) == (not scratch):
        raise UsageError("exactly one of --from CHECKPOINT or --scratch is required")

    windows, meta = load_windows(graphs_path)
    if not meta.get("class_names"):
        raise UsageError(f"{graphs_path} carries no labels; finetune needs labeled graphs")
    n_classes = len(meta["class_names"])
    seed = int(res.get("seed", 0))
    fcfg = FinetuneConfig(
        epochs=int(res.get("epochs", 50)),
        n_train_samples=(int(res.get("samples")) if res.get("samples") is not None else None),
        seed=stable_seed(seed, "finetune"),
        val_fraction=float(res.get("val-fraction", 0.2)),
        windows_per_batch=int(res.get("windows-per-batch", 8)),
        lr=float(res.get("lr", 1e-3)))

    inputs = [graphs_path]
    if from_path is not None:
        from_path = _require_file(from_path, "base checkpoint")
        inputs.append(from_path)
        base = Checkpoint.load(from_path)
        mcfg = dataclasses.replace(base.cfg, n_classes=n_classes, with_decoder=False)
        ckpt, log = finetune(windows, mcfg, fcfg, init_from=base)
    else:
        mcfg = _model_config_from(res, int(meta["feature_dim"]), n_classes=n_classes,
                                  with_decoder=False)
        ckpt, log = finetune(windows, mcfg, fcfg, init_from=None)

    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(out)
    _write_log_csv(out.with_name(out.name + ".log.csv"), log,
                   ["epoch", "train_loss", "val_loss", "val_macro_f1"])
    best = max(r.val_macro_f1 for r in log)
    print(f"finetuned {len(log)} epochs, best val macro F1 {best:.4f} -> {out}")
    _write_manifest(out, "finetune", res.resolved, inputs, started)
    return 0


def cmd_evaluate(args) -> int:
    started = time.time()
    res = Resolver(args)
    ckpt_path = _require_file(res.get("ckpt", required=True), "checkpoint")
    graphs_path = _require_file(res.get("graphs", required=True), "graphs file")
    out = Path(res.get("out", required=True))
    link = bool(res.get("link", False))
    windows, meta = load_windows(graphs_path)
    ckpt = Checkpoint.load(ckpt_path)

    if link:
        report = evaluate_link_prediction(ckpt, windows,
                                          seed=stable_seed(int(res.get("seed", 0)), "eval"))
        print(f"link prediction: AUC {report['auc']:.4f}, accuracy {report['accuracy']:.4f}")
    else:
        if not meta.get("class_names"):
            raise UsageError(f"{graphs_path} carries no labels; use --link for pretrain checkpoints")
        pred, _ = predict(ckpt, windows)
        truth = np.concatenate([s.flow_labels for w in windows for s in w.snapshots if s.n_flows])
        m = compute_metrics(truth, pred, ckpt.cfg.n_classes)
        report = m.to_json_dict()
        report["class_names"] = meta["class_names"]
        print(f"accuracy {m.accuracy:.4f}, weighted F1 {m.weighted_f1:.4f}, "
              f"macro F1 {m.macro_f1:.4f}")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    _write_manifest(out, "evaluate", res.resolved, [ckpt_path, graphs_path], started)
    return 0


def cmd_fewshot(args) -> int:
    started = time.time()
    res = Resolver(args)
    out = Path(res.get("out", required=True))
    base_path = _require_file(res.get("base", required=True), "base checkpoint")
    tasks_cfg = res.get("tasks", required=True)
    sample_sizes = res.get("sample-sizes", [50, 100, 250, 500, 1000, 2500])
    n_seeds = int(res.get("n-seeds", 5))
    epochs = int(res.get("epochs", 50))
    reference_epochs = int(res.get("reference-epochs", 200))
    seed = int(res.get("seed", 0))
    lr = float(res.get("lr", 1e-3))
    res.get("jobs", 1)   # accepted bound; cells run sequentially and are
    # seeded per coordinate, so any schedule yields identical results

    base = Checkpoint.load(base_path)
    inputs = [base_path]
    tasks = {}
    for name, paths in sorted(tasks_cfg.items()):
        for key in ("train_graphs", "test_graphs"):
            if key not in paths:
                raise UsageError(f"task '{name}' config is missing '{key}'")
        train_p = _require_file(paths["train_graphs"], f"task {name} train graphs")
        test_p = _require_file(paths["test_graphs"], f"task {name} test graphs")
        inputs.extend([train_p, test_p])
        train_windows, train_meta = load_windows(train_p)
        test_windows, test_meta = load_windows(test_p)
        if not train_meta.get("class_names") or not test_meta.get("class_names"):
            raise UsageError(f"task '{name}' graphs must be labeled")
        if train_meta["class_names"] != test_meta["class_names"]:
            raise UsageError(f"task '{name}': train/test class vocabularies differ")
        tasks[name] = TaskData(train_windows=train_windows, test_windows=test_windows,
                               n_classes=len(train_meta["class_names"]))

    mcfg = dataclasses.replace(base.cfg, with_decoder=False)
    result = run_fewshot(tasks, sample_sizes, n_seeds, base, mcfg,
                         master_seed=stable_seed(seed, "fewshot"),
                         epochs=epochs, reference_epochs=reference_epochs, lr=lr)

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.json", "w", encoding="utf-8") as f:
        json.dump(result.to_json_dict(), f, sort_keys=True, indent=2)
        f.write("\n")
    write_table_csv(out / "table.csv", result)
    write_curves_csv(out / "curves.csv", result)
    if res.get("plots", False):
        _render_plots(out, result)
    n_failed = sum(1 for c in result.cells if c.failed)
    gap = result.average_gap() if n_failed == 0 else float("nan")
    print(f"fewshot grid: {len(result.cells)} cells ({n_failed} failed), "
          f"average percent-loss gap scratch-pretrained = {gap:.2f}")
    _write_manifest(out, "fewshot", res.resolved, inputs, started)
    return 0


def _render_plots(out: Path, result) -> None:
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "flowsage"
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    from .metrics import METRIC_NAMES

    fig, axes = plt.subplots(len(METRIC_NAMES), len(result.tasks), squeeze=False,
                             figsize=(4 * len(result.tasks), 3 * len(METRIC_NAMES)))
    rows = result.percent_loss_rows()
    for i, metric in enumerate(METRIC_NAMES):
        for j, task in enumerate(result.tasks):
            ax = axes[i][j]
            for strategy, color in (("scratch", "tab:orange"), ("pretrained", "tab:blue")):
                ys = [r[task] for r in rows if r["metric"] == metric and r["strategy"] == strategy]
                ax.plot(result.sample_sizes, ys, marker="o", color=color, label=strategy)
            ax.set_xscale("log")
            ax.set_title(f"{task}: {metric}")
            ax.set_xlabel("training samples")
            ax.set_ylabel("% loss vs reference")
            ax.legend()
    fig.tight_layout()
    fig.savefig(plots / "percent_loss.svg", metadata={"Date": None})
    plt.close(fig)

    fig, axes = plt.subplots(2, len(result.tasks), squeeze=False,
                             figsize=(4 * len(result.tasks), 6))
    for i, split in enumerate(("train", "val")):
        curves = result.averaged_curves(split)
        for j, task in enumerate(result.tasks):
            ax = axes[i][j]
            for strategy, color in (("scratch", "tab:orange"), ("pretrained", "tab:blue")):
                curve = curves[(task, strategy)]
                ax.plot(range(len(curve)), curve, color=color, label=strategy)
            ax.set_title(f"{task}: {split} loss (normalized, averaged)")
            ax.set_xlabel("epoch")
            ax.legend()
    fig.tight_layout()
    fig.savefig(plots / "loss_curves.svg", metadata={"Date": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="flowsage",
                     description="Spatio-temporal graph learning on NetFlow records: "
                                 "pretrain on link prediction, fine-tune flow classifiers, "
                                 "run few-shot transfer grids.")
    parser.add_argument("--version", action="version", version=f"flowsage {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--config", help="JSON config file (or a previous run's manifest); "
                                        "explicit flags override it")
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, help="master seed (component seeds derive from it)")
        return p

    p = add("synth", cmd_synth, "generate a labeled synthetic flow CSV")
    p.add_argument("--n-ips", type=int)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--duration-s", type=float)
    p.add_argument("--target-flows", type=int)
    p.add_argument("--shift", type=float, help="signature perturbation magnitude (0 = none)")
    p.add_argument("--shift-seed", type=int, help="identifies the alternate network setting")

    p = add("ingest", cmd_ingest, "parse/validate a flow CSV and fit preprocessing artifacts")
    p.add_argument("--input")

    p = add("build-graphs", cmd_build_graphs, "build windowed graphs from a flow CSV")
    p.add_argument("--input")
    p.add_argument("--spec", help="feature_spec.json from ingest")
    p.add_argument("--labels", help="label_codec.json; omit for unlabeled graphs")
    p.add_argument("--snapshot-seconds", type=float)
    p.add_argument("--snapshots-per-window", type=int)

    p = add("pretrain", cmd_pretrain, "link-prediction pretraining")
    p.add_argument("--graphs")
    p.add_argument("--epochs", type=int)
    p.add_argument("--windows-per-batch", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--ip-feature-dim", type=int)
    p.add_argument("--spatial-layers", type=int)
    p.add_argument("--decoder-hidden", type=int)

    p = add("finetune", cmd_finetune, "supervised fine-tuning of flow classification")
    p.add_argument("--graphs")
    p.add_argument("--from", dest="from")
    p.add_argument("--scratch", action="store_const", const=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--samples", type=int, help="cap on labeled training flows")
    p.add_argument("--windows-per-batch", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--ip-feature-dim", type=int)
    p.add_argument("--spatial-layers", type=int)
    p.add_argument("--decoder-hidden", type=int)

    p = add("evaluate", cmd_evaluate, "evaluate a checkpoint on labeled graphs")
    p.add_argument("--ckpt")
    p.add_argument("--graphs")
    p.add_argument("--link", action="store_const", const=True,
                   help="link-prediction AUC instead of classification metrics")

    p = add("fewshot", cmd_fewshot, "run the few-shot transfer grid")
    p.add_argument("--base", help="pretrained base checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--reference-epochs", type=int)
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--jobs", type=int, help="upper bound on parallel workers; cells are "
                                            "seeded per coordinate so any schedule matches")
    p.add_argument("--plots", action="store_const", const=True, help="also render SVG plots")

    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
