"""Checkpoint serialization.

Layout: magic ``DFNC``, u32 version, u32 header length, a JSON header
(model config, ordered tensor manifest, optimizer flag, config hash), then
the raw little-endian float32 payload of every manifest entry in order.
When optimizer state is present it follows as (m, v) per learnable entry in
manifest order, closed by a u64 step counter.

Checkpoints are always float32; a float64 model is quantized on save.  The
loader restores the optimizer moments but not the learning rate, which is
run configuration, not model state: callers must set ``lr`` before stepping.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, build_model
from .optim import AdamState

MAGIC = b"DFNC"
VERSION = 1


def config_hash(cfg: ModelConfig) -> str:
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _manifest(model: Model) -> list:
    return [
        {"name": name, "shape": list(t.shape), "learnable": bool(learnable)}
        for name, t, learnable in model.named_tensors()
    ]


def save_checkpoint(path, model: Model, optimizer: AdamState | None = None) -> None:
    manifest = _manifest(model)
    header = {
        "config": model.config.to_dict(),
        "manifest": manifest,
        "optimizer_present": optimizer is not None,
        "config_hash": config_hash(model.config),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    tensors = list(model.named_tensors())
    for _, t, _ in tensors:
        buf.write(t.data.astype("<f4", copy=False).tobytes())
    if optimizer is not None:
        learnable = [t for _, t, learn in tensors if learn]
        if len(optimizer.m) != len(learnable):
            raise ValueError(
                f"optimizer tracks {len(optimizer.m)} tensors, model has {len(learnable)} learnable")
        for i, t in enumerate(learnable):
            if optimizer.m[i].shape != t.shape:
                raise ValueError(f"optimizer moment {i} shape {optimizer.m[i].shape} != {t.shape}")
            buf.write(optimizer.m[i].astype("<f4", copy=False).tobytes())
            buf.write(optimizer.v[i].astype("<f4", copy=False).tobytes())
        buf.write(struct.pack("<Q", optimizer.step))
    # write-then-rename so a crash never leaves a truncated checkpoint
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def read_header(path) -> dict:
    """Parse just the JSON header; used by the inspect command."""
    raw = Path(path).read_bytes()
    header, _ = _parse_header(path, raw)
    return header


def _parse_header(path, raw: bytes):
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + blob_len].decode("utf-8"))
    return header, 12 + blob_len


def load_checkpoint(path):
    """Rebuild the model (and optimizer state, if stored) from a file.

    Returns ``(model, optimizer_or_None)``.  The restored optimizer has
    ``lr`` unset (NaN); stepping before assigning a rate raises.
    """
    raw = Path(path).read_bytes()
    header, pos = _parse_header(path, raw)
    cfg = ModelConfig.from_dict(header["config"])
    if header["config_hash"] != config_hash(cfg):
        raise ValueError(f"{path}: config hash mismatch, header is corrupt or edited")
    model = build_model(cfg, seed=0, dtype=np.float32)
    if _manifest(model) != header["manifest"]:
        raise ValueError(f"{path}: manifest does not match the model this config builds")

    tensors = list(model.named_tensors())
    data_len = sum(t.data.size for _, t, _ in tensors) * 4
    opt_len = 0
    if header["optimizer_present"]:
        opt_len = sum(t.data.size for _, t, learn in tensors if learn) * 8 + 8
    if len(raw) != pos + data_len + opt_len:
        raise ValueError(f"{path}: payload is {len(raw) - pos} bytes, expected {data_len + opt_len}")

    for _, t, _ in tensors:
        arr = np.frombuffer(raw, dtype="<f4", count=t.data.size, offset=pos)
        t.data = arr.reshape(t.shape).astype(np.float32)
        pos += t.data.size * 4

    optimizer = None
    if header["optimizer_present"]:
        m, v = [], []
        for t in model.parameters():
            for dest in (m, v):
                arr = np.frombuffer(raw, dtype="<f4", count=t.data.size, offset=pos)
                dest.append(arr.reshape(t.shape).astype(np.float32))
                pos += t.data.size * 4
        (step,) = struct.unpack_from("<Q", raw, pos)
        optimizer = AdamState(lr=float("nan"), step=step, m=m, v=v)
    return model, optimizer
