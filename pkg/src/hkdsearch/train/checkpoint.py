"""Checkpoint archive: a one-line header with a SHA-256 digest, then a torch pickle."""
from __future__ import annotations

import hashlib
import io
from pathlib import Path

import torch

from ..errors import CheckpointError

MAGIC = b"HKDSEARCH-CKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(payload: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(dict(payload, checkpoint_version=CHECKPOINT_VERSION), buf)
    body = buf.getvalue()
    header = MAGIC + b" %d " % CHECKPOINT_VERSION + hashlib.sha256(body).hexdigest().encode() + b"\n"
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + body)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    header, sep, body = raw.partition(b"\n")
    parts = header.split(b" ")
    if not sep or len(parts) != 3 or parts[0] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint archive")
    if int(parts[1]) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {parts[1].decode()}")
    if hashlib.sha256(body).hexdigest().encode() != parts[2]:
        raise CheckpointError(f"{path}: integrity check failed (digest mismatch); refusing to load")
    try:
        return torch.load(io.BytesIO(body), map_location="cpu", weights_only=False)
    except Exception as exc:  # pickle-level corruption
        raise CheckpointError(f"{path}: unreadable payload ({exc})") from None
