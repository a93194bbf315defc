"""The CRSH tensor container and JSON-sidecar checkpoints.

Layout (little-endian throughout)::

    b"CRSH" | version u8 = 1 | dtype u8 = 0 (float32) | ndim u8 | reserved u8 = 0
    | ndim x u32 dims | row-major float32 payload

Writes go to a temporary file in the target directory and are renamed
into place, so readers never see a partial file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"CRSH"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sBBBB")


class TensorFileError(ValueError):
    pass


class NonFiniteError(TensorFileError):
    pass


def encode_tensor(arr) -> bytes:
    a = np.asarray(arr)
    if a.ndim > 255:
        raise TensorFileError("at most 255 dimensions are supported")
    if any(n > 0xFFFFFFFF for n in a.shape):
        raise TensorFileError("dimension too large for a u32")
    with np.errstate(over="ignore", invalid="ignore"):
        a32 = np.asarray(a, dtype="<f4")
    if not np.all(np.isfinite(a32)):
        raise NonFiniteError("refusing to write non-finite values")
    head = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, a32.ndim, 0)
    dims = struct.pack(f"<{a32.ndim}I", *a32.shape)
    return head + dims + a32.tobytes(order="C")


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise TensorFileError("truncated header")
    magic, version, dtype, ndim, reserved = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise TensorFileError(f"bad magic {magic!r}")
    if version != VERSION or dtype != DTYPE_F32 or reserved != 0:
        raise TensorFileError(f"unsupported header (version={version}, dtype={dtype}, reserved={reserved})")
    off = _HEADER.size
    if len(blob) < off + 4 * ndim:
        raise TensorFileError("truncated dimension table")
    shape = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) - off != 4 * count:
        raise TensorFileError(f"payload has {len(blob) - off} bytes, expected {4 * count}")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_tensor(path, arr) -> None:
    atomic_write_bytes(path, encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(path, net, meta: dict) -> None:
    """Flattened parameters as a tensor file plus ``<stem>.json`` describing them."""
    side = dict(meta)
    side["arch"] = net.config()
    side["params"] = [[k, list(v.shape)] for k, v in net.params.items()]
    write_tensor(path, net.to_flat())
    write_json(sidecar_path(path), side)


def load_checkpoint(path):
    """Rebuild the network; returns ``(net, sidecar)``."""
    from .scorenet import FiLMMLP

    side = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    arch = side["arch"]
    net = FiLMMLP(arch["in_dim"], arch["out_dim"], hidden=arch["hidden"], n_freq=arch["n_freq"],
                  freq_std=arch["freq_std"], emb_hidden=arch["emb_hidden"], seed=arch["seed"])
    net.load_flat(read_tensor(path).astype(float))
    return net, side
