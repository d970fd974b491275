import numpy as np
import pytest

from flowsage.flows import FlowRecord, encode_labels, fit_feature_spec, transform
from flowsage.graphs import WindowConfig, build_windows
from flowsage.synth import SynthConfig, generate_flows

_criterion_lines = []


def record_criterion(line: str) -> None:
    _criterion_lines.append(line)


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_criterion_lines):
            terminalreporter.write_line(line)


def make_record(src="10.0.0.1", dst="10.0.0.2", t=0, sport=50000, dport=443,
                proto=6, dur=100, bi=1000, bo=4000, pi=3, po=5, flags=0x1B,
                label=None) -> FlowRecord:
    return FlowRecord(src_ip=src, dst_ip=dst, src_port=sport, dst_port=dport,
                      protocol=proto, start_time=t, duration_ms=dur, bytes_in=bi,
                      bytes_out=bo, pkts_in=pi, pkts_out=po, tcp_flags=flags,
                      label=label)


@pytest.fixture(scope="session")
def small_corpus():
    """~1.2K labeled flows, 4 behavior classes."""
    flows = generate_flows(SynthConfig(target_flows=1200, duration_s=40, n_ips=40, seed=101))
    spec = fit_feature_spec(flows)
    features = transform(flows, spec)
    codec, labels = encode_labels(flows)
    return flows, spec, features, codec, labels


@pytest.fixture(scope="session")
def small_windows(small_corpus):
    flows, spec, features, codec, labels = small_corpus
    return build_windows(flows, features, WindowConfig(2.0, 5), labels=labels)


@pytest.fixture(scope="session")
def three_flow_window():
    """A -> B, A -> C, B -> C inside one snapshot."""
    records = [
        make_record(src="A", dst="B", t=100),
        make_record(src="A", dst="C", t=200),
        make_record(src="B", dst="C", t=300),
    ]
    spec = fit_feature_spec(records)
    features = transform(records, spec)
    windows = build_windows(records, features, WindowConfig(2.0, 1))
    assert len(windows) == 1
    return windows[0]


def rng_record_batch(rng: np.random.Generator, n_flows: int, n_ips: int = 6,
                     t_span_ms: int = 8000, labeled: bool = False):
    """Random small record set for property tests (sorted by time)."""
    ips = [f"ip{k}" for k in range(n_ips)]
    records = []
    times = np.sort(rng.integers(0, t_span_ms, size=n_flows))
    for i in range(n_flows):
        a, b = rng.integers(0, n_ips, size=2)
        records.append(make_record(
            src=ips[a], dst=ips[b], t=int(times[i]),
            sport=int(rng.integers(0, 65536)), dport=int(rng.integers(0, 65536)),
            proto=int(rng.choice([6, 17])), dur=int(rng.integers(0, 5000)),
            bi=int(rng.integers(0, 100000)), bo=int(rng.integers(0, 100000)),
            pi=int(rng.integers(0, 100)), po=int(rng.integers(0, 100)),
            flags=int(rng.integers(0, 256)),
            label=f"c{rng.integers(0, 3)}" if labeled else None))
    return records
