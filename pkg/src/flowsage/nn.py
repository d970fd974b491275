"""Parameter collections, initialization, the Adam optimizer, and parameter file I/O.

A model is a plain dict mapping hierarchical parameter names (for example
"encoder.layer0.rel.ip_to_flow_src.weight") to Tensors with requires_grad
set. Every parameter is seeded independently from (seed, name), so the same
name always gets the same initial value regardless of construction order or
of which other parameters exist.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from ._util import seeded_rng
from .autodiff import Tensor

ParamDict = Dict[str, Tensor]

_CKPT_MAGIC = b"FSCK"
CHECKPOINT_FORMAT_VERSION = 1


def glorot_uniform(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_weight(name: str, shape: tuple, seed: int) -> Tensor:
    return Tensor(glorot_uniform(shape, seeded_rng(seed, name)), requires_grad=True)


def init_bias(name: str, shape: tuple, seed: int) -> Tensor:
    del name, seed  # biases start at zero; args kept for a uniform call shape
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def count_parameters(params: ParamDict) -> int:
    return sum(t.data.size for t in params.values())


def zero_grads(params: ParamDict) -> None:
    for t in params.values():
        t.grad = np.zeros_like(t.data)


def clone_params(params: ParamDict) -> ParamDict:
    return {name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for name, t in params.items()}


@dataclass
class AdamState:
    """Adam with bias correction; moments are keyed like the parameter dict."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamDict, lr: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   m={k: np.zeros_like(t.data) for k, t in params.items()},
                   v={k: np.zeros_like(t.data) for k, t in params.items()})


def adam_step(params: ParamDict, state: AdamState) -> None:
    for name, t in params.items():
        if t.grad is None:
            raise ValueError(f"adam_step: parameter '{name}' has no gradient")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    for name, t in params.items():
        g = t.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        t.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# parameter file format: a JSON manifest followed by one little-endian
# float32 blob; the manifest records per-tensor byte offsets into the blob.


def write_param_file(path, params: ParamDict, header: dict) -> None:
    names = sorted(params)
    tensors = {}
    chunks = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(params[name].data.astype("<f4", copy=False))
        raw = arr.tobytes()
        tensors[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    manifest = dict(header)
    manifest["format_version"] = CHECKPOINT_FORMAT_VERSION
    manifest["tensors"] = tensors
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(mbytes)))
        f.write(mbytes)
        for raw in chunks:
            f.write(raw)


def read_param_file(path) -> tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a parameter file (bad magic {magic!r})")
        (mlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format_version {manifest.get('format_version')}")
        blob = f.read()
    arrays = {}
    for name, info in manifest["tensors"].items():
        raw = blob[info["offset"]:info["offset"] + info["nbytes"]]
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(info["shape"]).copy()
    return manifest, arrays
