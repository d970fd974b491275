import numpy as np
import pytest
from scipy.stats import ks_2samp

from flowsage.flows import FlowRecord
from flowsage.synth import ClassSignature, SynthConfig, default_signatures, generate_flows


def test_deterministic_for_fixed_seed():
    cfg = SynthConfig(target_flows=500, seed=9)
    assert generate_flows(cfg) == generate_flows(cfg)


def test_different_seed_different_corpus():
    a = generate_flows(SynthConfig(target_flows=500, seed=1))
    b = generate_flows(SynthConfig(target_flows=500, seed=2))
    assert a != b


def test_time_sorted_and_labeled():
    flows = generate_flows(SynthConfig(target_flows=800, seed=3, n_classes=5))
    times = [f.start_time for f in flows]
    assert times == sorted(times)
    names = {s.name for s in default_signatures(5)}
    assert {f.label for f in flows} == names
    assert all(isinstance(f, FlowRecord) for f in flows[:5])


def test_single_class_corpus():
    flows = generate_flows(SynthConfig(target_flows=300, seed=4, n_classes=1))
    assert {f.label for f in flows} == {"web_browse"}


def test_degenerate_configs_rejected():
    with pytest.raises(ValueError, match="n_ips"):
        generate_flows(SynthConfig(n_ips=1))
    with pytest.raises(ValueError, match="n_classes"):
        generate_flows(SynthConfig(n_classes=0))
    with pytest.raises(ValueError, match="target_flows"):
        generate_flows(SynthConfig(target_flows=0))


def test_zero_shift_keeps_distributions_ks():
    """Different draw seeds and different setting ids, but shift 0: bytes_in
    must come from the same distribution (two-sample KS, p > 0.01)."""
    for seed in range(10):
        a = generate_flows(SynthConfig(target_flows=1500, seed=seed, shift=0.0, shift_seed=0))
        b = generate_flows(SynthConfig(target_flows=1500, seed=100 + seed, shift=0.0,
                                       shift_seed=7))
        result = ks_2samp([f.bytes_in for f in a], [f.bytes_in for f in b])
        assert result.pvalue > 0.01, f"seed {seed}: p={result.pvalue:.5f}"


def test_nonzero_shift_changes_distribution():
    a = generate_flows(SynthConfig(target_flows=4000, seed=0, shift=0.0))
    b = generate_flows(SynthConfig(target_flows=4000, seed=0, shift=0.8, shift_seed=5))
    result = ks_2samp([f.bytes_in for f in a], [f.bytes_in for f in b])
    assert result.pvalue < 0.01
    assert {f.label for f in a} == {f.label for f in b}   # same class vocabulary


def test_shift_defines_the_setting_not_the_draw():
    """Corpora sharing shift/shift_seed live in the same network setting:
    same IP universe, even with different draw seeds."""
    a = generate_flows(SynthConfig(target_flows=400, seed=1, shift=0.5, shift_seed=3))
    b = generate_flows(SynthConfig(target_flows=400, seed=2, shift=0.5, shift_seed=3))
    c = generate_flows(SynthConfig(target_flows=400, seed=1, shift=0.5, shift_seed=4))
    ips = lambda flows: {f.src_ip for f in flows} | {f.dst_ip for f in flows}
    assert ips(a) & ips(b)
    assert not (ips(a) & ips(c))


def test_structures_are_visible_in_graph_shape():
    sigs = default_signatures(3)   # web (client-server), scan (fanout), ddos (fanin)
    flows = generate_flows(SynthConfig(target_flows=3000, seed=11, n_classes=3))
    by_class = {s.name: [f for f in flows if f.label == s.name] for s in sigs}
    # scans spray distinct destinations from one source
    scan_srcs = {}
    for f in by_class["port_scan"]:
        scan_srcs.setdefault(f.src_ip, set()).add(f.dst_ip)
    assert max(len(v) for v in scan_srcs.values()) >= 8
    # floods concentrate many sources on one destination
    flood_dsts = {}
    for f in by_class["ddos_flood"]:
        flood_dsts.setdefault(f.dst_ip, set()).add(f.src_ip)
    assert max(len(v) for v in flood_dsts.values()) >= 8
    # scans carry no reply volume, web does
    assert all(f.bytes_out == 0 for f in by_class["port_scan"])
    assert np.mean([f.bytes_out for f in by_class["web_browse"]]) > 1000


def test_icmp_free_ports_match_protocol_rules():
    flows = generate_flows(SynthConfig(target_flows=1000, seed=6, n_classes=8))
    for f in flows:
        assert 0 <= f.src_port <= 65535 and 0 <= f.dst_port <= 65535
        assert f.duration_ms >= 0 and f.bytes_in >= 0
        if f.protocol != 6:
            assert f.tcp_flags == 0


def test_custom_signatures_respected():
    sig = ClassSignature("custom", "client_server", 17, (9999,), 5.0, 0.1, 1.0,
                         1.0, 10.0, 1, 2, 5.0)
    flows = generate_flows(SynthConfig(target_flows=200, seed=1, signatures=[sig]))
    assert {f.label for f in flows} == {"custom"}
    assert {f.dst_port for f in flows} == {9999}
