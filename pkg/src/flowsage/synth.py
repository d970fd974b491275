"""Seeded synthetic NetFlow corpus generator.

Stands in for multi-gigabyte capture datasets at desk scale. Traffic is a
mixture of behavior classes, each with its own communication structure and
feature distributions, so classes are separable both by flow features and
by graph shape:

    class          structure       proto  dst port        volume      flags
    web_browse     client-server   tcp    80/443          ~2 KB       SAPF
    dns_lookup     client-server   udp    53              ~80 B       -
    bulk_transfer  client-server   tcp    445             ~200 KB     SAPF
    port_scan      one-to-many     tcp    1..1023 sweep   ~60 B       S
    ddos_flood     many-to-one     udp    80              ~300 B      -
    p2p_share      peer-to-peer    tcp    ephemeral       ~8 KB       SAPF
    mail_relay     client-server   tcp    25              ~5 KB       SAPF
    iot_telemetry  client-server   tcp    1883            ~150 B      PA

Distribution parameters are separated by at least a factor of two in log
scale between adjacent classes, and structural classes (scan, flood) differ
by an order of magnitude in fan-out/fan-in.

A "network setting" is the combination of IP space, per-class server
assignments, and (when the shift knob is nonzero) a deterministic
perturbation of every signature's volume and timing parameters. Corpora
generated with the same shift/shift_seed share a setting regardless of the
draw seed, which is what makes pretraining and fine-tuning settings
strictly separable.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from ._util import stable_seed
from .flows import FlowRecord

_FLAGS_SAPF = 0x01 | 0x02 | 0x08 | 0x10   # syn+ack+psh+fin: a complete exchange
_FLAGS_SYN = 0x02
_FLAGS_PA = 0x08 | 0x10

_EPOCH_BASE_MS = 1_700_000_000_000


@dataclass(frozen=True)
class ClassSignature:
    name: str
    structure: str                 # client_server | fanout | fanin | peer
    protocol: int
    dst_ports: tuple               # concrete ports, or ("sweep", lo, hi)
    bytes_mu: float                # log-space location of bytes_in
    bytes_sigma: float
    reply_ratio: float             # 0 -> one-sided traffic
    duration_shape: float
    duration_scale_ms: float
    burst_lo: int
    burst_hi: int
    intra_gap_ms: float            # mean spacing between a burst's flows
    fan_lo: int = 0                # fan size for fanout/fanin structures
    fan_hi: int = 0
    tcp_flags: int = 0
    server_group: str = ""         # classes sharing a tag share one server pool


_PRESETS: List[ClassSignature] = [
    ClassSignature("web_browse", "client_server", 6, (80, 443), math.log(2000.0), 1.0,
                   4.0, 2.0, 150.0, 2, 6, 120.0, tcp_flags=_FLAGS_SAPF),
    ClassSignature("port_scan", "fanout", 6, ("sweep", 1, 1023), math.log(60.0), 0.15,
                   0.0, 1.0, 2.0, 1, 1, 8.0, fan_lo=12, fan_hi=30, tcp_flags=_FLAGS_SYN),
    ClassSignature("ddos_flood", "fanin", 17, (80,), math.log(300.0), 0.4,
                   0.0, 1.0, 20.0, 1, 1, 4.0, fan_lo=10, fan_hi=24),
    ClassSignature("bulk_transfer", "client_server", 6, (445,), math.log(2e5), 1.2,
                   0.05, 3.0, 2000.0, 1, 2, 500.0, tcp_flags=_FLAGS_SAPF),
    ClassSignature("dns_lookup", "client_server", 17, (53,), math.log(80.0), 0.3,
                   1.5, 1.5, 15.0, 2, 5, 30.0),
    ClassSignature("p2p_share", "peer", 6, ("ephemeral",), math.log(8000.0), 1.5,
                   1.0, 2.0, 800.0, 2, 4, 250.0, tcp_flags=_FLAGS_SAPF),
    ClassSignature("mail_relay", "client_server", 6, (25,), math.log(5000.0), 0.8,
                   0.3, 2.0, 400.0, 1, 3, 200.0, tcp_flags=_FLAGS_SAPF),
    ClassSignature("iot_telemetry", "client_server", 6, (1883,), math.log(150.0), 0.2,
                   0.5, 1.2, 40.0, 4, 8, 60.0, tcp_flags=_FLAGS_PA),
]


def default_signatures(n_classes: int) -> List[ClassSignature]:
    if not 1 <= n_classes <= len(_PRESETS):
        raise ValueError(f"n_classes must be in [1, {len(_PRESETS)}], got {n_classes}")
    return _PRESETS[:n_classes]


@dataclass
class SynthConfig:
    n_ips: int = 60
    n_classes: int = 4
    duration_s: float = 120.0
    target_flows: int = 5000
    seed: int = 0
    shift: float = 0.0            # signature perturbation magnitude; 0 keeps distributions
    shift_seed: int = 0           # identifies the alternate network setting
    signatures: Optional[Sequence[ClassSignature]] = None

    def validate(self) -> None:
        if self.n_ips < 4:
            raise ValueError(f"n_ips must be >= 4, got {self.n_ips}")
        if self.n_classes < 1:
            raise ValueError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.duration_s <= 0:
            raise ValueError(f"duration_s must be positive, got {self.duration_s}")
        if self.target_flows < 1:
            raise ValueError(f"target_flows must be >= 1, got {self.target_flows}")
        if self.shift < 0:
            raise ValueError(f"shift must be >= 0, got {self.shift}")


def _perturb(sig: ClassSignature, magnitude: float, rng: np.random.Generator) -> ClassSignature:
    """Shift volume/timing parameters of one signature; class identity
    (protocol, ports, flags, structure) stays fixed."""
    def scale(x, strength):
        return x * math.exp(magnitude * strength * rng.normal())

    fan_lo = max(0 if sig.fan_lo == 0 else 2, int(round(scale(sig.fan_lo, 0.3))))
    return dataclasses.replace(
        sig,
        bytes_mu=sig.bytes_mu + magnitude * 0.8 * rng.normal(),
        bytes_sigma=max(0.05, scale(sig.bytes_sigma, 0.3)),
        duration_scale_ms=max(0.5, scale(sig.duration_scale_ms, 0.5)),
        intra_gap_ms=max(0.5, scale(sig.intra_gap_ms, 0.5)),
        burst_hi=max(sig.burst_lo, int(round(scale(sig.burst_hi, 0.3)))),
        fan_lo=fan_lo,
        fan_hi=max(fan_lo, int(round(scale(sig.fan_hi, 0.3)))),
    )


def generate_flows(cfg: SynthConfig) -> List[FlowRecord]:
    """Deterministic labeled corpus, sorted by start time."""
    cfg.validate()
    sigs = list(cfg.signatures) if cfg.signatures is not None \
        else default_signatures(cfg.n_classes)

    setting = np.random.default_rng(stable_seed("synth-setting", cfg.shift_seed))
    subnet = int(setting.integers(0, 200))
    if cfg.shift > 0:
        sigs = [_perturb(s, cfg.shift, setting) for s in sigs]

    clients = [f"10.{subnet}.{i // 250}.{i % 250 + 1}" for i in range(cfg.n_ips)]
    server_pool = [f"10.{subnet}.250.{i + 1}" for i in range(max(8, cfg.n_ips // 4))]
    by_group: dict = {}
    servers = {}
    for sig in sigs:
        group = sig.server_group or sig.name
        if group not in by_group:
            k = max(2, len(server_pool) // 4)
            by_group[group] = [server_pool[int(j)] for j in
                               setting.choice(len(server_pool), size=k, replace=False)]
        servers[sig.name] = by_group[group]

    draw = np.random.default_rng(stable_seed("synth-draw", cfg.seed))
    duration_ms = cfg.duration_s * 1000.0
    flows: List[FlowRecord] = []
    for sig_idx, size in _session_plan(sigs, cfg.target_flows):
        sig = sigs[sig_idx]
        t = float(draw.uniform(0, duration_ms))
        flows.extend(_session(sig, size, t, clients, servers[sig.name], draw))

    flows.sort(key=lambda r: r.start_time)
    return flows


def _session_plan(sigs: Sequence[ClassSignature], target: int) -> List[tuple]:
    """Deterministic (class, session size) schedule: classes round-robin and
    each class cycles through its size range. Keeping the schedule free of
    the draw seed makes per-class flow counts identical across corpora of
    the same setting, so distribution comparisons see only flow-level
    randomness."""
    plan: List[tuple] = []
    session_idx = [0] * len(sigs)
    total = 0
    c = 0
    while total < target:
        sig = sigs[c]
        if sig.structure in ("fanout", "fanin"):
            lo, hi = sig.fan_lo, sig.fan_hi
        else:
            lo, hi = sig.burst_lo, sig.burst_hi
        size = lo + (session_idx[c] % (hi - lo + 1))
        plan.append((c, size))
        session_idx[c] += 1
        total += size
        c = (c + 1) % len(sigs)
    return plan


def _session(sig: ClassSignature, size: int, t_ms: float, clients: List[str],
             class_servers: List[str], rng: np.random.Generator) -> List[FlowRecord]:
    if sig.structure == "client_server":
        src = clients[int(rng.integers(0, len(clients)))]
        dst = class_servers[int(rng.integers(0, len(class_servers)))]
        pairs = [(src, dst)] * size
    elif sig.structure == "fanout":
        src = clients[int(rng.integers(0, len(clients)))]
        k = min(size, len(clients))
        targets = rng.choice(len(clients), size=k, replace=False)
        pairs = [(src, clients[int(j)]) for j in targets]
    elif sig.structure == "hub_fanout":
        src = class_servers[int(rng.integers(0, len(class_servers)))]
        k = min(size, len(clients))
        targets = rng.choice(len(clients), size=k, replace=False)
        pairs = [(src, clients[int(j)]) for j in targets]
    elif sig.structure == "fanin":
        dst = class_servers[int(rng.integers(0, len(class_servers)))]
        pairs = [(clients[int(rng.integers(0, len(clients)))], dst) for _ in range(size)]
    elif sig.structure == "peer":
        pairs = []
        for _ in range(size):
            a, b = rng.choice(len(clients), size=2, replace=False)
            pairs.append((clients[int(a)], clients[int(b)]))
    else:
        raise ValueError(f"unknown structure {sig.structure!r}")

    out = []
    t = t_ms
    for src, dst in pairs:
        t += float(rng.exponential(sig.intra_gap_ms))
        out.append(_flow(sig, src, dst, int(round(t)), rng))
    return out


def _flow(sig: ClassSignature, src: str, dst: str, t_ms: int,
          rng: np.random.Generator) -> FlowRecord:
    bytes_in = max(28, int(round(math.exp(sig.bytes_mu + sig.bytes_sigma * rng.normal()))))
    if sig.reply_ratio > 0:
        bytes_out = max(28, int(round(bytes_in * sig.reply_ratio
                                      * math.exp(0.2 * rng.normal()))))
        pkts_out = 1 + int(rng.poisson(bytes_out / 1200.0))
    else:
        bytes_out = 0
        pkts_out = 0
    if sig.dst_ports[0] == "sweep":
        dst_port = int(rng.integers(sig.dst_ports[1], sig.dst_ports[2] + 1))
    elif sig.dst_ports[0] == "ephemeral":
        dst_port = int(rng.integers(49152, 65536))
    else:
        dst_port = int(sig.dst_ports[int(rng.integers(0, len(sig.dst_ports)))])
    return FlowRecord(
        src_ip=src, dst_ip=dst,
        src_port=int(rng.integers(49152, 65536)),
        dst_port=dst_port,
        protocol=sig.protocol,
        start_time=_EPOCH_BASE_MS + t_ms,
        duration_ms=max(0, int(round(rng.gamma(sig.duration_shape, sig.duration_scale_ms)))),
        bytes_in=bytes_in, bytes_out=bytes_out,
        pkts_in=1 + int(rng.poisson(bytes_in / 1200.0)), pkts_out=pkts_out,
        tcp_flags=sig.tcp_flags if sig.protocol == 6 else 0,
        label=sig.name)
