import numpy as np
import pytest

from flowsage.fewshot import FewShotResult, TaskData, evaluate_on_test, run_fewshot, \
    train_reference, write_curves_csv, write_table_csv
from flowsage.flows import encode_labels, fit_feature_spec, transform
from flowsage.graphs import WindowConfig, build_windows
from flowsage.metrics import METRIC_NAMES
from flowsage.model import ModelConfig
from flowsage.pretrain import PretrainConfig, pretrain
from flowsage.synth import SynthConfig, generate_flows

TINY = dict(ip_feature_dim=4, hidden_dim=8, n_spatial_layers=1, decoder_hidden_dim=4,
            head_hidden_dims=(6,))


@pytest.fixture(scope="module")
def tiny_task():
    train = generate_flows(SynthConfig(target_flows=400, duration_s=30, n_ips=24, seed=50))
    test = generate_flows(SynthConfig(target_flows=200, duration_s=15, n_ips=24, seed=51))
    spec = fit_feature_spec(train)
    codec, _ = encode_labels(train + test)
    wcfg = WindowConfig(2.0, 3)

    def windows(flows):
        labels = np.array([codec.index_of[f.label] for f in flows], dtype=np.int32)
        return build_windows(flows, transform(flows, spec), wcfg, labels=labels)

    mcfg = ModelConfig(feature_dim=spec.output_dim, seed=1, **TINY)
    return TaskData(train_windows=windows(train), test_windows=windows(test),
                    n_classes=codec.n_classes), mcfg


@pytest.fixture(scope="module")
def tiny_base(tiny_task):
    task, mcfg = tiny_task
    ckpt, _ = pretrain(task.train_windows, mcfg, PretrainConfig(epochs=2, seed=3))
    return ckpt


def test_reference_runs_full_epoch_budget(tiny_task):
    task, mcfg = tiny_task
    _, report, log = train_reference(task, mcfg, seed=5, epochs=200)
    assert len(log) == 200
    assert [r.epoch for r in log] == list(range(200))
    assert 0.0 <= report.macro_f1 <= 1.0


def test_reference_deterministic(tiny_task):
    task, mcfg = tiny_task
    _, r1, _ = train_reference(task, mcfg, seed=5, epochs=3)
    _, r2, _ = train_reference(task, mcfg, seed=5, epochs=3)
    assert r1.to_json_dict() == r2.to_json_dict()


def test_grid_completeness_and_cell_counts(tiny_task, tiny_base):
    task, mcfg = tiny_task
    result = run_fewshot({"taskA": task}, sample_sizes=[20, 40], n_seeds=2,
                         base=tiny_base, model_cfg=mcfg, master_seed=9,
                         epochs=2, reference_epochs=2)
    assert len(result.cells) == 1 * 2 * 2 * 2
    assert set(result.references) == {"taskA"}
    coords = {(c.task, c.sample_size, c.strategy, c.seed_index) for c in result.cells}
    assert len(coords) == len(result.cells)
    assert all(not c.failed and c.metrics is not None for c in result.cells)
    assert all(len(c.log) == 2 for c in result.cells)


def test_grid_cells_deterministic(tiny_task, tiny_base):
    task, mcfg = tiny_task
    kw = dict(sample_sizes=[30], n_seeds=1, base=tiny_base, model_cfg=mcfg,
              master_seed=4, epochs=2, reference_epochs=2)
    a = run_fewshot({"t": task}, **kw)
    b = run_fewshot({"t": task}, **kw)
    assert a.to_json_dict() == b.to_json_dict()


def test_percent_loss_rows_and_gap(tiny_task, tiny_base):
    task, mcfg = tiny_task
    result = run_fewshot({"t": task}, sample_sizes=[30, 60], n_seeds=1,
                         base=tiny_base, model_cfg=mcfg, master_seed=2,
                         epochs=2, reference_epochs=3)
    rows = result.percent_loss_rows()
    assert len(rows) == len(METRIC_NAMES) * 2 * 2
    for row in rows:
        assert set(row) == {"metric", "strategy", "sample_size", "t"}
    gap = result.average_gap()
    hand = np.mean([
        (row_s["t"] - row_p["t"])
        for row_s in rows if row_s["strategy"] == "scratch"
        for row_p in rows if row_p["strategy"] == "pretrained"
        and row_p["metric"] == row_s["metric"]
        and row_p["sample_size"] == row_s["sample_size"]])
    assert abs(gap - hand) < 1e-12


def test_failed_cell_is_marked_and_grid_continues(tiny_task, tiny_base):
    task, mcfg = tiny_task
    # a sample size larger than the labeled training flows cannot train
    too_big = sum(w.n_flows for w in task.train_windows) + 10_000
    result = run_fewshot({"t": task}, sample_sizes=[20, too_big], n_seeds=1,
                         base=tiny_base, model_cfg=mcfg, master_seed=1,
                         epochs=1, reference_epochs=1)
    failed = [c for c in result.cells if c.failed]
    ok = [c for c in result.cells if not c.failed]
    assert len(failed) == 2 and len(ok) == 2
    assert all("exceeds" in c.error for c in failed)
    assert result.to_json_dict()["average_gap"] is None


def test_csv_outputs(tiny_task, tiny_base, tmp_path):
    task, mcfg = tiny_task
    result = run_fewshot({"t": task}, sample_sizes=[25], n_seeds=1,
                         base=tiny_base, model_cfg=mcfg, master_seed=3,
                         epochs=3, reference_epochs=2)
    write_table_csv(tmp_path / "table.csv", result)
    write_curves_csv(tmp_path / "curves.csv", result)
    table = (tmp_path / "table.csv").read_text().splitlines()
    assert table[0] == "metric,strategy,sample_size,t"
    assert len(table) == 1 + len(METRIC_NAMES) * 2
    curves = (tmp_path / "curves.csv").read_text().splitlines()
    assert curves[0] == "epoch,t|pretrained|train,t|pretrained|val,t|scratch|train,t|scratch|val"
    assert len(curves) == 1 + 3   # epochs rows


def test_evaluate_on_test_matches_predict(tiny_task, tiny_base):
    task, mcfg = tiny_task
    from flowsage.finetune import FinetuneConfig, finetune, predict
    from flowsage.metrics import compute_metrics
    ckpt, _ = finetune(task.train_windows, mcfg, FinetuneConfig(epochs=1, seed=0))
    report = evaluate_on_test(ckpt, task.test_windows, task.n_classes)
    pred, _ = predict(ckpt, task.test_windows)
    truth = np.concatenate([s.flow_labels for w in task.test_windows
                            for s in w.snapshots if s.n_flows])
    assert report.to_json_dict() == compute_metrics(truth, pred, task.n_classes).to_json_dict()
