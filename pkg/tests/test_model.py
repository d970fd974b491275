import dataclasses

import numpy as np
import pytest

from conftest import make_record
from flowsage.autodiff import backward
from flowsage.flows import fit_feature_spec, transform
from flowsage.graphs import EdgeType, WindowConfig, build_windows, window_from_dict, \
    window_to_dict
from flowsage.model import Checkpoint, IncompatibleCheckpointError, ModelConfig, \
    classify_flows, default_config, encode, init_finetune_from, init_model, \
    model_parameter_count, pack_windows, score_edges
from flowsage.nn import count_parameters, zero_grads
from flowsage.pretrain import _link_loss, negatives_to_global, sample_negatives
from reference_impl import naive_encode

TINY = dict(ip_feature_dim=4, hidden_dim=6, n_spatial_layers=2, decoder_hidden_dim=5,
            head_hidden_dims=(4,))


def tiny_cfg(feature_dim, **kw):
    base = dict(TINY)
    base.update(kw)
    return ModelConfig(feature_dim=feature_dim, **base)


def window_and_features(records):
    spec = fit_feature_spec(records)
    feats = transform(records, spec)
    ws = build_windows(records, feats, WindowConfig(2.0, max(1, len({
        (r.start_time // 2000) for r in records}))))
    return ws, spec


# ---------------------------------------------------------------------------
# parameter budget


def test_default_preset_parameter_count_within_budget():
    n = model_parameter_count(default_config())
    assert 660_000 <= n <= 805_000, n


def test_classifier_variant_also_within_budget():
    cfg = dataclasses.replace(default_config(), with_decoder=False, n_classes=10)
    assert 660_000 <= model_parameter_count(cfg) <= 805_000


def test_init_is_per_name_seeded():
    cfg = tiny_cfg(7, seed=5)
    a = init_model(cfg)
    b = init_model(cfg)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    c = init_model(dataclasses.replace(cfg, seed=6))
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a
               if k.endswith("weight"))


# ---------------------------------------------------------------------------
# encode


def test_zero_weights_collapse_to_bias_then_relu(three_flow_window):
    feature_dim = three_flow_window.snapshots[0].flow_features.shape[1]
    cfg = tiny_cfg(feature_dim, n_spatial_layers=1)
    params = init_model(cfg)
    for name, t in params.items():
        t.data[:] = 0.0
    bias_flow = np.array([0.5, -0.3, 0.2, 0.0, 1.0, -1.0], dtype=np.float32)
    bias_ip = np.array([-0.5, 0.1, 0.0, 0.7, -0.2, 0.4], dtype=np.float32)
    params["encoder.layer0.bias.flow"].data[:] = bias_flow
    params["encoder.layer0.bias.ip"].data[:] = bias_ip
    emb = encode(pack_windows([three_flow_window]), cfg, params)
    assert np.allclose(emb.flow.data, np.maximum(bias_flow, 0)[None, :].repeat(3, 0))
    assert np.allclose(emb.ip.data, np.maximum(bias_ip, 0)[None, :].repeat(3, 0))


def test_encode_matches_naive_message_passing_trace():
    records = [
        make_record(src="A", dst="B", t=100), make_record(src="A", dst="C", t=300),
        make_record(src="B", dst="C", t=900), make_record(src="C", dst="A", t=2100),
        make_record(src="A", dst="B", t=2500), make_record(src="D", dst="D", t=3900),
    ]
    ws, spec = window_and_features(records)
    assert len(ws) == 1 and len(ws[0].snapshots) == 2
    cfg = tiny_cfg(spec.output_dim, seed=13)
    params = init_model(cfg)
    emb = encode(pack_windows(ws), cfg, params)
    ref_flow, ref_ip = naive_encode(ws[0], params, cfg)
    got_flow = emb.flow.data
    got_ip = emb.ip.data
    expected_flow = np.concatenate(ref_flow, axis=0)
    expected_ip = np.concatenate(ref_ip, axis=0)
    assert np.allclose(got_flow, expected_flow, atol=1e-5)
    assert np.allclose(got_ip, expected_ip, atol=1e-5)


def test_temporal_edges_are_live():
    records = [make_record(src="A", dst="B", t=i * 100) for i in range(6)]
    ws, spec = window_and_features(records)
    cfg = tiny_cfg(spec.output_dim, seed=3)
    params = init_model(cfg)
    with_edges = encode(pack_windows(ws), cfg, params).flow.data
    stripped = window_from_dict(window_to_dict(ws[0]))
    for s in stripped.snapshots:
        for etype in (EdgeType.FLOW_FOLLOWS_SRC, EdgeType.FLOW_FOLLOWS_DST):
            s.edges[etype] = np.zeros((0, 2), dtype=np.int32)
    without = encode(pack_windows([stripped]), cfg, params).flow.data
    assert not np.allclose(with_edges, without)


def test_flow_permutation_equivariance():
    rng = np.random.default_rng(4)
    records = sorted([make_record(src=f"h{rng.integers(0, 4)}", dst=f"h{rng.integers(0, 4)}",
                                  t=int(rng.integers(0, 1900)), bi=int(rng.integers(10, 9999)))
                      for _ in range(12)], key=lambda r: r.start_time)
    ws, spec = window_and_features(records)
    cfg = tiny_cfg(spec.output_dim, seed=9)
    params = init_model(cfg)
    base = encode(pack_windows(ws), cfg, params).flow.data

    w2 = window_from_dict(window_to_dict(ws[0]))
    s = w2.snapshots[0]
    perm = np.random.default_rng(1).permutation(s.n_flows)   # new position of each flow
    inv = np.argsort(perm)
    s.flow_features = s.flow_features[inv]
    s.flow_times = s.flow_times[inv]
    for etype, pairs in s.edges.items():
        remapped = pairs.copy()
        if etype in (EdgeType.FLOW_TO_IP_SRC, EdgeType.FLOW_TO_IP_DST):
            remapped[:, 0] = perm[pairs[:, 0]]
        elif etype in (EdgeType.IP_TO_FLOW_SRC, EdgeType.IP_TO_FLOW_DST):
            remapped[:, 1] = perm[pairs[:, 1]]
        elif etype in (EdgeType.FLOW_FOLLOWS_SRC, EdgeType.FLOW_FOLLOWS_DST):
            remapped = perm[pairs]
        s.edges[etype] = remapped
    permuted = encode(pack_windows([w2]), cfg, params).flow.data
    assert np.allclose(permuted[perm], base, atol=1e-6)


def test_isolated_ip_independent_of_rest_of_graph():
    records = [make_record(src="A", dst="B", t=100), make_record(src="B", dst="A", t=200)]
    ws, spec = window_and_features(records)
    w = ws[0]
    w.snapshots[0].ip_ids.append("Z")   # a node nothing connects to
    cfg = tiny_cfg(spec.output_dim, seed=2)
    params = init_model(cfg)
    emb_full = encode(pack_windows([w]), cfg, params).ip.data[-1]

    lonely = window_from_dict(window_to_dict(w))
    lonely.snapshots[0].flow_features = lonely.snapshots[0].flow_features[:0]
    lonely.snapshots[0].flow_times = lonely.snapshots[0].flow_times[:0]
    lonely.snapshots[0].ip_ids = ["Z"]
    for etype in lonely.snapshots[0].edges:
        lonely.snapshots[0].edges[etype] = np.zeros((0, 2), dtype=np.int32)
    emb_alone = encode(pack_windows([lonely]), cfg, params).ip.data[0]
    assert np.allclose(emb_full, emb_alone, atol=1e-6)


def test_temporal_causality_earlier_snapshots_unchanged():
    early = [make_record(src="A", dst="B", t=100), make_record(src="B", dst="C", t=600)]
    late_v1 = [make_record(src="A", dst="C", t=2200, bi=100)]
    late_v2 = [make_record(src="A", dst="C", t=2200, bi=999999)]
    spec = fit_feature_spec(early + late_v1)
    cfg = tiny_cfg(spec.output_dim, seed=8)
    params = init_model(cfg)
    wcfg = WindowConfig(2.0, 2)

    out = []
    for late in (late_v1, late_v2):
        records = early + late
        ws = build_windows(records, transform(records, spec), wcfg)
        emb = encode(pack_windows(ws), cfg, params)
        out.append((emb.flow.data[:2].copy(), emb.ip.data[:3].copy()))
    assert np.array_equal(out[0][0], out[1][0])
    assert np.array_equal(out[0][1], out[1][1])


def test_encode_feature_dim_mismatch_errors(three_flow_window):
    cfg = tiny_cfg(99)
    with pytest.raises(ValueError, match="feature_dim"):
        encode(pack_windows([three_flow_window]), cfg, init_model(cfg))


def test_gradient_reaches_every_touched_encoder_parameter(small_windows):
    w = small_windows[0]
    feature_dim = w.snapshots[0].flow_features.shape[1]
    cfg = tiny_cfg(feature_dim, seed=1)
    params = init_model(cfg)
    packed = pack_windows([w])
    negs = negatives_to_global(packed, 0, sample_negatives(w, seed=3))
    emb = encode(packed, cfg, params)
    loss, _ = _link_loss(emb, packed.edges, negs, params)
    zero_grads(params)
    backward(loss)
    present = {t for t in EdgeType if len(packed.edges[t][0])}
    for name, tensor in params.items():
        if ".rel." in name:
            etype = EdgeType(name.split(".rel.")[1].rsplit(".", 1)[0])
            if etype not in present:
                continue
        assert np.any(tensor.grad != 0), f"no gradient reached {name}"


# ---------------------------------------------------------------------------
# decoder and head


def test_zero_weight_decoder_outputs_final_bias(three_flow_window):
    feature_dim = three_flow_window.snapshots[0].flow_features.shape[1]
    cfg = tiny_cfg(feature_dim)
    params = init_model(cfg)
    for name, t in params.items():
        if name.startswith("decoder."):
            t.data[:] = 0.0
    params["decoder.ip_to_flow_src.b2"].data[:] = 0.75
    packed = pack_windows([three_flow_window])
    emb = encode(packed, cfg, params)
    logits = score_edges(emb, {EdgeType.IP_TO_FLOW_SRC: packed.edges[EdgeType.IP_TO_FLOW_SRC]},
                         params)
    assert np.allclose(logits[EdgeType.IP_TO_FLOW_SRC].data, 0.75)


def test_identical_endpoint_embeddings_identical_logits(three_flow_window):
    feature_dim = three_flow_window.snapshots[0].flow_features.shape[1]
    cfg = tiny_cfg(feature_dim)
    params = init_model(cfg)
    packed = pack_windows([three_flow_window])
    emb = encode(packed, cfg, params)
    src = np.array([0, 0], dtype=np.int64)
    dst = np.array([1, 1], dtype=np.int64)
    logits = score_edges(emb, {EdgeType.FLOW_FOLLOWS_SRC: (src, dst)}, params)
    vals = logits[EdgeType.FLOW_FOLLOWS_SRC].data.reshape(-1)
    assert vals[0] == vals[1]


def test_score_edges_unknown_type_errors(three_flow_window):
    feature_dim = three_flow_window.snapshots[0].flow_features.shape[1]
    cfg = tiny_cfg(feature_dim)
    params = init_model(cfg)
    emb = encode(pack_windows([three_flow_window]), cfg, params)
    with pytest.raises(ValueError, match="unknown edge type"):
        score_edges(emb, {"bogus": (np.array([0]), np.array([0]))}, params)


def test_empty_head_hidden_dims_is_single_linear(three_flow_window):
    feature_dim = three_flow_window.snapshots[0].flow_features.shape[1]
    cfg = tiny_cfg(feature_dim, head_hidden_dims=(), n_classes=3, with_decoder=False)
    params = init_model(cfg)
    assert set(n for n in params if n.startswith("head.")) == {"head.out.weight",
                                                               "head.out.bias"}
    emb = encode(pack_windows([three_flow_window]), cfg, params)
    expected = emb.flow.data @ params["head.out.weight"].data + params["head.out.bias"].data
    assert np.allclose(classify_flows(emb.flow, cfg, params).data, expected, atol=1e-6)


def test_zero_weight_head_gives_uniform_logits_ln_k(three_flow_window):
    from flowsage.autodiff import cross_entropy
    feature_dim = three_flow_window.snapshots[0].flow_features.shape[1]
    cfg = tiny_cfg(feature_dim, n_classes=4, with_decoder=False)
    params = init_model(cfg)
    for name, t in params.items():
        if name.startswith("head."):
            t.data[:] = 0.0
    emb = encode(pack_windows([three_flow_window]), cfg, params)
    logits = classify_flows(emb.flow, cfg, params)
    assert np.array_equal(logits.data, np.zeros((3, 4), dtype=np.float32))
    assert abs(cross_entropy(logits, [0, 1, 2]).item() - np.log(4.0)) < 1e-6


def test_hand_set_two_class_head(three_flow_window):
    feature_dim = three_flow_window.snapshots[0].flow_features.shape[1]
    cfg = tiny_cfg(feature_dim, head_hidden_dims=(), n_classes=2, with_decoder=False)
    params = init_model(cfg)
    rng = np.random.default_rng(0)
    w = rng.normal(size=(cfg.hidden_dim, 2)).astype(np.float32)
    b = np.array([0.1, -0.2], dtype=np.float32)
    params["head.out.weight"].data[:] = w
    params["head.out.bias"].data[:] = b
    emb = encode(pack_windows([three_flow_window]), cfg, params)
    by_hand = np.array([[row @ w[:, 0] + b[0], row @ w[:, 1] + b[1]]
                        for row in emb.flow.data.astype(np.float64)])
    assert np.allclose(classify_flows(emb.flow, cfg, params).data, by_hand, atol=1e-5)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = tiny_cfg(8, seed=21)
    ckpt = Checkpoint(cfg=cfg, params=init_model(cfg))
    path = tmp_path / "m.ckpt"
    ckpt.save(path)
    loaded = Checkpoint.load(path)
    assert loaded.cfg == cfg
    assert set(loaded.params) == set(ckpt.params)
    for name in ckpt.params:
        assert np.array_equal(loaded.params[name].data, ckpt.params[name].data)
        assert loaded.params[name].requires_grad


def test_checkpoint_mismatch_lists_differing_fields(tmp_path):
    cfg = tiny_cfg(8)
    Checkpoint(cfg=cfg, params=init_model(cfg)).save(tmp_path / "m.ckpt")
    expect = dataclasses.replace(cfg, hidden_dim=12, feature_dim=9)
    with pytest.raises(IncompatibleCheckpointError) as err:
        Checkpoint.load(tmp_path / "m.ckpt", expect=expect)
    assert "hidden_dim" in str(err.value) and "feature_dim" in str(err.value)


def test_finetune_bridge_keeps_encoder_reseeds_head():
    cfg = tiny_cfg(8, seed=30)
    base = Checkpoint(cfg=cfg, params=init_model(cfg))
    for name in base.params:   # pretend training moved the weights
        base.params[name].data += 1.0
    bridged = init_finetune_from(base, n_classes=3)
    scratch = init_model(bridged.cfg)
    for name, t in bridged.params.items():
        if name.startswith("encoder."):
            assert np.array_equal(t.data, base.params[name].data)
        elif name.startswith("head."):
            assert np.array_equal(t.data, scratch[name].data)
    assert not any(n.startswith("decoder.") for n in bridged.params)
    assert bridged.cfg.n_classes == 3 and not bridged.cfg.with_decoder


def test_parameter_count_matches_manual_sum():
    cfg = tiny_cfg(8)
    params = init_model(cfg)
    assert count_parameters(params) == sum(t.data.size for t in params.values())
