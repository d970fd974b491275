"""flowsage: spatio-temporal heterogeneous graph learning on NetFlow records.

Pipeline: parse flow CSVs into feature vectors, build windowed flow/IP
graphs, pretrain a compact relation-typed graph network on self-supervised
link prediction, fine-tune flow classifiers from the pretrained base under
tight label and epoch budgets, and compare against training from scratch
with a reference-anchored few-shot grid.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, bce_with_logits, cross_entropy
from .fewshot import FewShotResult, TaskData, run_fewshot, train_reference
from .finetune import FinetuneConfig, finetune, predict
from .flows import FeatureSpec, FlowRecord, LabelCodec, encode_labels, fit_feature_spec, \
    parse_flows, transform
from .graphs import EdgeType, SnapshotGraph, WindowConfig, WindowGraph, build_windows, \
    graph_stats, load_windows, save_windows, validate_graph
from .metrics import MetricsReport, compute_metrics, percent_loss, roc_auc
from .model import Checkpoint, ModelConfig, default_config, encode, init_model, pack_windows
from .nn import AdamState, adam_step, count_parameters, zero_grads
from .pretrain import PretrainConfig, evaluate_link_prediction, pretrain, sample_negatives
from .synth import SynthConfig, generate_flows

__all__ = [
    "Tensor", "backward", "bce_with_logits", "cross_entropy",
    "FewShotResult", "TaskData", "run_fewshot", "train_reference",
    "FinetuneConfig", "finetune", "predict",
    "FeatureSpec", "FlowRecord", "LabelCodec", "encode_labels", "fit_feature_spec",
    "parse_flows", "transform",
    "EdgeType", "SnapshotGraph", "WindowConfig", "WindowGraph", "build_windows",
    "graph_stats", "load_windows", "save_windows", "validate_graph",
    "MetricsReport", "compute_metrics", "percent_loss", "roc_auc",
    "Checkpoint", "ModelConfig", "default_config", "encode", "init_model", "pack_windows",
    "AdamState", "adam_step", "count_parameters", "zero_grads",
    "PretrainConfig", "evaluate_link_prediction", "pretrain", "sample_negatives",
    "SynthConfig", "generate_flows",
    "__version__",
]
