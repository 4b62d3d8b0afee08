"""Binary checkpoint container.

Layout (all multi-byte values little-endian):

    bytes 0..3    magic "DUET"
    bytes 4..7    format version, uint32
    bytes 8..15   header length H, uint64
    H bytes       header, UTF-8 JSON
    P bytes       payload: tensor data, concatenated in header order
    32 bytes      SHA-256 over header + payload

The header describes every tensor (name, partition, dtype, shape, byte
offset into the payload, byte length), the embedded resolved config text,
the training step, optimizer scalars, rng states, and any extra records.
Tensors are stored little-endian regardless of host order. Loading verifies
magic, version, and checksum, and round-trips every field bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import BackboneConfig, ModelParams
from .numerics import Adam, Tensor

MAGIC = b"DUET"
VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(RuntimeError):
    """Malformed, truncated, or corrupted checkpoint file."""


def _le(arr: np.ndarray) -> np.ndarray:
    want = arr.dtype.newbyteorder("<")
    return arr.astype(want, copy=False)


def _dtype_tag(arr: np.ndarray) -> str:
    tag = {"float32": "<f4", "float64": "<f8"}.get(arr.dtype.name)
    if tag is None:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return tag


@dataclass
class Checkpoint:
    config_text: str
    step: int
    params: ModelParams
    adam_state: dict | None = None            # ready for Adam.load_state_dict
    rng_states: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str, params: ModelParams, config_text: str, step: int,
                    adam: Adam | None = None, rng_states: dict | None = None,
                    extra: dict | None = None) -> None:
    entries: list[dict] = []
    blobs: list[bytes] = []
    offset = 0

    def put(name: str, arr: np.ndarray, partition: str) -> None:
        nonlocal offset
        arr = _le(np.ascontiguousarray(arr))
        raw = arr.tobytes()
        entries.append({"name": name, "partition": partition,
                        "dtype": _dtype_tag(arr), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name in params.names():
        put(name, params.tensors[name].data, params.partition(name))
    adam_header = None
    if adam is not None:
        sd = adam.state_dict()
        for k in sorted(sd["m"]):
            put(f"adam.m.{k}", sd["m"][k], "opt")
            put(f"adam.v.{k}", sd["v"][k], "opt")
        adam_header = {"step_count": sd["step_count"], "lr": sd["lr"],
                       "beta1": sd["beta1"], "beta2": sd["beta2"], "eps": sd["eps"],
                       "params": sorted(sd["m"])}

    header = {
        "config": config_text,
        "step": int(step),
        "theta_trainable": params.theta_trainable,
        "phi_trainable": params.phi_trainable,
        "tensors": entries,
        "adam": adam_header,
        "rng": rng_states or {},
        "extra": extra or {},
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(blobs)
    digest = hashlib.sha256(hdr + payload).digest()

    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        f.write(payload)
        f.write(digest)
    os.replace(tmp, path)


def load_checkpoint(path: str, model_config: BackboneConfig | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 48 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    hdr_end = 16 + hlen
    if len(blob) < hdr_end + 32:
        raise CheckpointError(f"{path}: truncated header")
    hdr = blob[16:hdr_end]
    payload = blob[hdr_end:-32]
    digest = blob[-32:]
    if hashlib.sha256(hdr + payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    header = json.loads(hdr.decode("utf-8"))

    arrays: dict[str, np.ndarray] = {}
    partitions: dict[str, str] = {}
    for e in header["tensors"]:
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise CheckpointError(f"{path}: unknown dtype {e['dtype']}")
        raw = payload[e["offset"]: e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).copy()
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=False)
        partitions[e["name"]] = e["partition"]

    if model_config is None:
        from .config import load_config
        model_config = load_config(text=header["config"]).model_config()
    model_arrays = {k: v for k, v in arrays.items() if partitions[k] != "opt"}
    trainable = {"theta": header["theta_trainable"], "phi": header["phi_trainable"]}
    tensors = {k: Tensor(v, requires_grad=trainable[partitions[k]])
               for k, v in model_arrays.items()}
    params = ModelParams(config=model_config, tensors=tensors,
                         theta_trainable=header["theta_trainable"],
                         phi_trainable=header["phi_trainable"])
    for name in params.names():
        want = params.partition(name)
        if partitions[name] != want:
            raise CheckpointError(f"{path}: partition label mismatch for {name}")

    adam_state = None
    if header["adam"] is not None:
        a = header["adam"]
        adam_state = {"step_count": a["step_count"], "lr": a["lr"], "beta1": a["beta1"],
                      "beta2": a["beta2"], "eps": a["eps"],
                      "m": {k: arrays[f"adam.m.{k}"] for k in a["params"]},
                      "v": {k: arrays[f"adam.v.{k}"] for k in a["params"]}}

    return Checkpoint(config_text=header["config"], step=header["step"], params=params,
                      adam_state=adam_state, rng_states=header.get("rng", {}),
                      extra=header.get("extra", {}))
