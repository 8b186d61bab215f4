"""Versioned checkpoint container.

Layout: ``b"TKBCKPT\\0"`` magic, ``u32`` version, ``u64`` header length,
UTF-8 JSON header, raw little-endian float32 tensor data in header order,
then a 32-byte SHA-256 digest of everything before it. The header carries
the model kind and config, the training config, the task ordering, the RNG
state and the tensor index (name, shape, offset).
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..errors import CheckpointError

MAGIC = b"TKBCKPT\0"
VERSION = 1


def encode(state: dict, meta: dict) -> bytes:
    index, chunks, offset = [], [], 0
    for name, t in state.items():
        a = t.detach().cpu().numpy().astype("<f4")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({**meta, "tensors": index}, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode(buf: bytes) -> tuple[dict, dict]:
    if len(buf) < len(MAGIC) + 12 + 32 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    meta = json.loads(body[start:start + hlen].decode("utf-8"))
    data = body[start + hlen:]
    state = {}
    for entry in meta.pop("tensors"):
        n = int(np.prod(entry["shape"], dtype=np.int64))
        a = np.frombuffer(data, dtype="<f4", count=n, offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(a.reshape(entry["shape"]).copy())
    return state, meta


def save(path, state: dict, meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(state, meta))
    return path


def load(path) -> tuple[dict, dict]:
    try:
        return decode(Path(path).read_bytes())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint at {path}") from None


def tensor_digest(tensors) -> str:
    """SHA-256 over raw tensor bytes, for freeze checks."""
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
