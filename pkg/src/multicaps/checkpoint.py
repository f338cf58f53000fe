"""Self-describing binary model checkpoints.

Layout: magic ``MCKP``, version, a JSON header (config echo, run metadata,
and per-parameter name/partition/shape/optimizer hyperparameters), then for
each parameter in header order its value and both Adam moments as
little-endian float64 arrays. Values are stored in double precision
regardless of the model's compute dtype; float32 values round-trip exactly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError

_MAGIC = b"MCKP"
_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def save_model(model, path, extra=None):
    """Write a model's parameters, optimizer states, and config echo."""
    entries = []
    blobs = []
    for p in model.params:
        entries.append(
            {
                "name": p.name,
                "partition": p.partition,
                "shape": list(p.value.shape),
                "adam": {
                    "step": p.adam.step,
                    "lr": p.adam.lr,
                    "beta1": p.adam.beta1,
                    "beta2": p.adam.beta2,
                    "eps": p.adam.eps,
                },
            }
        )
        for arr in (p.value, p.adam.m, p.adam.v):
            blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = json.dumps(
        {"config": model.config_dict(), "extra": extra or {}, "params": entries},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(_MAGIC, _VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


@dataclass
class Checkpoint:
    config: dict
    extra: dict
    entries: dict  # name -> {"partition", "shape", "adam", "value", "m", "v"}

    def apply_to(self, params):
        """Copy values and optimizer states into a matching ParameterSet."""
        names = set(params.names())
        stored = set(self.entries)
        if names != stored:
            missing = sorted(names - stored)
            surplus = sorted(stored - names)
            raise ConfigurationError(
                f"checkpoint/model mismatch; missing {missing[:3]}, surplus {surplus[:3]}"
            )
        for p in params:
            e = self.entries[p.name]
            if tuple(e["shape"]) != p.value.shape:
                raise ConfigurationError(
                    f"{p.name}: checkpoint shape {e['shape']} vs model {p.value.shape}"
                )
            if e["partition"] != p.partition:
                raise ConfigurationError(
                    f"{p.name}: checkpoint partition {e['partition']!r} vs {p.partition!r}"
                )
            p.tensor.data[...] = e["value"].astype(p.value.dtype)
            p.adam.m[...] = e["m"].astype(p.value.dtype)
            p.adam.v[...] = e["v"].astype(p.value.dtype)
            p.adam.step = e["adam"]["step"]
            p.adam.lr = e["adam"]["lr"]
            p.adam.beta1 = e["adam"]["beta1"]
            p.adam.beta2 = e["adam"]["beta2"]
            p.adam.eps = e["adam"]["eps"]


def read_checkpoint(path):
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise FormatError("checkpoint shorter than its prefix", offset=len(data))
    magic, version, header_len = _PREFIX.unpack_from(data, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    header_end = _PREFIX.size + header_len
    if len(data) < header_end:
        raise FormatError("checkpoint header truncated", offset=len(data))
    header = json.loads(data[_PREFIX.size : header_end].decode())
    entries = {}
    offset = header_end
    for e in header["params"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays = {}
        for key in ("value", "m", "v"):
            end = offset + count * 8
            if len(data) < end:
                raise FormatError(
                    f"checkpoint payload truncated in {e['name']}/{key}", offset=len(data)
                )
            arrays[key] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(
                e["shape"]
            )
            offset = end
        entries[e["name"]] = {**e, **arrays}
    if offset != len(data):
        raise FormatError("trailing bytes after checkpoint payload", offset=offset)
    return Checkpoint(config=header["config"], extra=header["extra"], entries=entries)


def load_model(path):
    """Rebuild the saved model (architecture, config, weights, optimizer state)."""
    from .memo import MemoNetwork
    from .models import CapsuleClassifier, ConvNetClassifier

    registry = {
        "convnet": ConvNetClassifier,
        "capsnet": CapsuleClassifier,
        "memo": MemoNetwork,
    }
    ckpt = read_checkpoint(path)
    arch = ckpt.config.get("architecture")
    if arch not in registry:
        raise ConfigurationError(f"unknown architecture in checkpoint: {arch!r}")
    model = registry[arch].from_config_dict(ckpt.config)
    ckpt.apply_to(model.params)
    return model, ckpt.extra
