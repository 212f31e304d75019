"""Model checkpoint files: magic "UGQM", version, then self-describing
records of (name length, name, rank, dims, float32 payload), little-endian.
Records are read until end of file; save -> load -> save is byte-identical.
"""

import struct

import numpy as np

from .errors import DataError

MAGIC = b"UGQM"
VERSION = 1


def save_checkpoint(tensors, path):
    """Serialize an ordered name -> array mapping."""
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<I", VERSION)
    for name, arr in tensors.items():
        # np.array (not ascontiguousarray) so rank-0 tensors keep their rank
        raw = np.array(arr, dtype="<f4", order="C")
        name_bytes = name.encode("utf-8")
        payload += struct.pack("<I", len(name_bytes))
        payload += name_bytes
        payload += struct.pack("<I", raw.ndim)
        payload += struct.pack(f"<{raw.ndim}I", *raw.shape)
        payload += raw.tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(bytes(payload))


def load_checkpoint(path):
    """Deserialize back into an ordered name -> float64 array mapping."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise DataError(f"checkpoint has bad magic: {path}")
    if len(blob) < 8:
        raise DataError(f"checkpoint truncated: {path}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise DataError(f"checkpoint version {version} unsupported (expected {VERSION})")
    tensors = {}
    offset = 8
    total = len(blob)
    while offset < total:
        if offset + 4 > total:
            raise DataError(f"checkpoint truncated: {path}")
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + name_len + 4 > total:
            raise DataError(f"checkpoint truncated: {path}")
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + 4 * rank > total:
            raise DataError(f"checkpoint truncated: {path}")
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        count = 1
        for dim in dims:
            count *= dim
        if offset + 4 * count > total:
            raise DataError(f"checkpoint truncated: {path}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        tensors[name] = arr.reshape(dims).astype(np.float64)
    return tensors
