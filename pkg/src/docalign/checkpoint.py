"""Checkpoint container.

Layout: an ASCII header line ``DOCALIGN-CKPT v<version> sha256=<hex> kind=<kind>\\n``
followed by a ``torch.save`` payload.  The digest covers the payload bytes.
"""

from __future__ import annotations

import hashlib
import io
import os
import tempfile
from pathlib import Path

import torch

from .errors import CheckpointIntegrityError

MAGIC = "DOCALIGN-CKPT"
FORMAT_VERSION = 1
KINDS = ("full", "encoder")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(payload: dict, path, kind: str = "full") -> None:
    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    digest = hashlib.sha256(body).hexdigest()
    header = f"{MAGIC} v{FORMAT_VERSION} sha256={digest} kind={kind}\n".encode("ascii")
    atomic_write_bytes(path, header + body)


def load_checkpoint(path) -> dict:
    """Read and verify a checkpoint; returns the payload with ``kind`` set."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointIntegrityError(f"cannot read checkpoint {path}: {exc}") from exc
    nl = raw.find(b"\n")
    if nl < 0 or not raw.startswith(MAGIC.encode()):
        raise CheckpointIntegrityError(f"{path} is not a docalign checkpoint")
    try:
        fields = dict(f.split("=", 1) for f in raw[:nl].decode("ascii").split()[2:])
        version = int(raw[:nl].decode("ascii").split()[1].lstrip("v"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointIntegrityError(f"corrupt checkpoint header in {path}") from exc
    if version != FORMAT_VERSION:
        raise CheckpointIntegrityError(f"unsupported checkpoint version {version} in {path}")
    body = raw[nl + 1 :]
    if hashlib.sha256(body).hexdigest() != fields.get("sha256"):
        raise CheckpointIntegrityError(f"checksum mismatch in {path}")
    try:
        payload = torch.load(io.BytesIO(body), map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a variety of types on bad archives
        raise CheckpointIntegrityError(f"cannot decode checkpoint {path}: {exc}") from exc
    payload["kind"] = fields.get("kind", "full")
    return payload
