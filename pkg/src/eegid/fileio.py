"""Low-level helpers for the binary artifact formats.

Every artifact is little-endian, starts with a 5-byte magic, and ends with a
length-prefixed JSON provenance block (tool version, config hash, seed).
Writers are deterministic: identical inputs produce identical bytes.
"""

import hashlib
import json
import struct

import numpy as np

from . import __version__
from .errors import ArtifactError


def write_str(f, s: str) -> None:
    data = s.encode("utf-8")
    f.write(struct.pack("<I", len(data)))
    f.write(data)


def read_str(f) -> str:
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n).decode("utf-8")


def write_array(f, a: np.ndarray, dtype: str) -> None:
    f.write(np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


def read_array(f, shape, dtype: str) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    itemsize = np.dtype(dtype).itemsize
    buf = f.read(count * itemsize)
    if len(buf) != count * itemsize:
        raise ArtifactError("truncated array payload")
    a = np.frombuffer(buf, dtype=np.dtype(dtype).newbyteorder("<")).reshape(shape)
    return a.astype(np.float64) if np.issubdtype(a.dtype, np.floating) else a


def check_magic(f, magic: bytes, path="") -> None:
    got = f.read(len(magic))
    if got != magic:
        raise ArtifactError(
            f"{path or 'file'}: expected magic {magic.decode()!r}, found {got!r}"
        )


def write_provenance(f, format_name: str, **fields) -> None:
    block = {"format": format_name, "tool_version": __version__}
    block.update(fields)
    data = json.dumps(block, sort_keys=True, separators=(",", ":")).encode("utf-8")
    f.write(struct.pack("<I", len(data)))
    f.write(data)


def read_provenance(f) -> dict:
    raw = f.read(4)
    if len(raw) != 4:
        raise ArtifactError("missing provenance block")
    (n,) = struct.unpack("<I", raw)
    return json.loads(f.read(n).decode("utf-8"))


def array_fingerprint(*arrays) -> str:
    """Short stable hash of array contents, used to pin models to their inputs."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]
