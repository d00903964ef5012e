"""Binary checkpoint format.

Layout: magic ``UMC1``, a 4-byte little-endian header length, a JSON header
(format version, architecture config, tensor manifest with name/shape/byte
offset, optional optimizer section and free-form extras), then the tensors
concatenated as little-endian float32. The model manifest lists exactly the
trainable tensors, weights and biases, in graph construction order;
optimizer moment tensors live in a second manifest appended to the payload.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import UmcConfig, config_from_dict, config_to_dict
from .ops import AdamState

MAGIC = b"UMC1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated, or mismatched checkpoint."""


@dataclass
class Checkpoint:
    config: UmcConfig
    params: dict                      # name -> float32 ndarray
    optimizer: AdamState | None = None
    extra: dict = field(default_factory=dict)


def _manifest_and_payload(tensors: dict, offset: int) -> tuple:
    manifest, chunks = [], []
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    return manifest, chunks, offset


def save_checkpoint(path, config: UmcConfig, params: dict,
                    optimizer: AdamState | None = None,
                    extra: dict | None = None) -> None:
    manifest, chunks, offset = _manifest_and_payload(params, 0)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(config),
        "manifest": manifest,
        "extra": dict(extra or {}),
    }
    if optimizer is not None:
        moments = {}
        for prefix, store in (("m", optimizer.m), ("v", optimizer.v)):
            for name in params:          # parameter order, not dict history
                moments[f"{prefix}:{name}"] = store[name]
        opt_manifest, opt_chunks, offset = _manifest_and_payload(moments, offset)
        header["optimizer"] = {
            "t": optimizer.t, "lr": optimizer.lr, "beta1": optimizer.beta1,
            "beta2": optimizer.beta2, "eps": optimizer.eps,
            "manifest": opt_manifest,
        }
        chunks += opt_chunks
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(blob).to_bytes(4, "little"))
        f.write(blob)
        for c in chunks:
            f.write(c)


def _slice_tensors(payload: bytes, manifest) -> dict:
    out = {}
    for entry in manifest:
        shape = tuple(int(v) for v in entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = int(entry["offset"])
        end = start + 4 * n
        if end > len(payload):
            raise CheckpointError(f"tensor '{entry['name']}' runs past the payload "
                                  f"({end} > {len(payload)} bytes)")
        out[entry["name"]] = np.frombuffer(
            payload[start:end], dtype="<f4").reshape(shape).copy()
    return out


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 8:
        raise CheckpointError("file too short for a header length")
    hlen = int.from_bytes(blob[4:8], "little")
    if len(blob) < 8 + hlen:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version "
                              f"{header.get('format_version')}")
    payload = blob[8 + hlen:]
    expected = sum(4 * int(np.prod(e["shape"], dtype=np.int64))
                   for e in header["manifest"] + (header.get("optimizer") or
                                                  {"manifest": []})["manifest"])
    if len(payload) != expected:
        raise CheckpointError(f"payload holds {len(payload)} bytes, "
                              f"manifest declares {expected}")
    params = _slice_tensors(payload, header["manifest"])
    optimizer = None
    if "optimizer" in header and header["optimizer"] is not None:
        o = header["optimizer"]
        moments = _slice_tensors(payload, o["manifest"])
        state = AdamState(lr=float(o["lr"]), beta1=float(o["beta1"]),
                          beta2=float(o["beta2"]), eps=float(o["eps"]),
                          t=int(o["t"]))
        for key, value in moments.items():
            prefix, name = key.split(":", 1)
            (state.m if prefix == "m" else state.v)[name] = value
        optimizer = state
    return Checkpoint(config=config_from_dict(header["config"]), params=params,
                      optimizer=optimizer, extra=header.get("extra", {}))


def apply_to_model(ckpt: Checkpoint, model) -> None:
    """Install checkpoint tensors into a built graph; configs must match."""
    if config_to_dict(ckpt.config) != config_to_dict(model.config):
        raise CheckpointError("checkpoint config does not match the model config")
    names = set(model.param_shapes)
    if set(ckpt.params) != names:
        missing = sorted(names - set(ckpt.params))[:3]
        raise CheckpointError(f"checkpoint tensors do not cover the model "
                              f"parameters (missing {missing} ...)")
    for name, value in ckpt.params.items():
        model.graph.set_param(name, value)
