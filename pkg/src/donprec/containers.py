"""Binary container files shared across the toolchain.

Both formats use the same grammar: magic, little-endian u32 version, u64
manifest length, canonical JSON manifest, then a raw tensor payload of
row-major little-endian arrays addressed by byte offsets relative to the
payload start.  Writers emit tensors in sorted-name order with packed
offsets, so write/read round trips are byte identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC_ONETPACK = b"ONPK"
MAGIC_TENSORPACK = b"TPK0"
VERSION = 1

_DTYPES = {"f64le": "<f8", "i64le": "<i8", "i8": "|i1"}
_NUMPY_TO_DTYPE = {np.dtype(np.float64): "f64le", np.dtype(np.int64): "i64le",
                   np.dtype(np.int8): "i8"}


class ContainerError(ValueError):
    """Malformed container: bad magic, version, manifest or payload bounds."""


def canonical_manifest_bytes(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def pack_container(magic: bytes, manifest: dict, payload: bytes) -> bytes:
    mbytes = canonical_manifest_bytes(manifest)
    return magic + struct.pack("<I", VERSION) + struct.pack("<Q", len(mbytes)) + mbytes + payload


def unpack_container(data: bytes, magic: bytes):
    if len(data) < 16:
        raise ContainerError("container truncated before header")
    if data[:4] != magic:
        raise ContainerError(f"bad magic {data[:4]!r}, expected {magic!r}")
    version = struct.unpack("<I", data[4:8])[0]
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    mlen = struct.unpack("<Q", data[8:16])[0]
    if 16 + mlen > len(data):
        raise ContainerError("container truncated inside manifest")
    try:
        manifest = json.loads(data[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"manifest is not valid JSON: {exc}") from exc
    return manifest, data[16 + mlen:]


def tensor_nbytes(dtype: str, shape) -> int:
    n = 1
    for s in shape:
        n *= int(s)
    return n * np.dtype(_DTYPES[dtype]).itemsize


def read_tensor(payload: bytes, dtype: str, shape, offset: int) -> np.ndarray:
    if dtype not in _DTYPES:
        raise ContainerError(f"unknown tensor dtype {dtype!r}")
    nbytes = tensor_nbytes(dtype, shape)
    if offset < 0 or offset + nbytes > len(payload):
        raise ContainerError("tensor extends past the end of the payload")
    arr = np.frombuffer(payload, dtype=_DTYPES[dtype], count=nbytes
                        // np.dtype(_DTYPES[dtype]).itemsize, offset=offset)
    return arr.reshape(tuple(int(s) for s in shape)).copy()


def tensor_bytes(arr: np.ndarray) -> bytes:
    dtype = _NUMPY_TO_DTYPE.get(arr.dtype)
    if dtype is None:
        raise ContainerError(f"unsupported tensor dtype {arr.dtype}")
    return np.ascontiguousarray(arr).astype(_DTYPES[dtype], copy=False).tobytes()


def write_tensorpack(path, tensors: dict, meta: dict | None = None) -> bytes:
    """Write named tensors (float64 / int64 / int8) plus an optional meta dict."""
    entries = {}
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dtype = _NUMPY_TO_DTYPE.get(arr.dtype)
        if dtype is None:
            raise ContainerError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        entries[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": len(payload)}
        payload.extend(tensor_bytes(arr))
    manifest = {"tensors": entries}
    if meta is not None:
        manifest["meta"] = meta
    blob = pack_container(MAGIC_TENSORPACK, manifest, bytes(payload))
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


def read_tensorpack(source):
    """Read a tensor container from a path or bytes; returns (tensors, meta)."""
    data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    manifest, payload = unpack_container(bytes(data), MAGIC_TENSORPACK)
    if "tensors" not in manifest:
        raise ContainerError("tensor container without a tensors table")
    spans = []
    tensors = {}
    for name, entry in manifest["tensors"].items():
        arr = read_tensor(payload, entry["dtype"], entry["shape"], entry["offset"])
        spans.append((entry["offset"], entry["offset"] + tensor_nbytes(entry["dtype"], entry["shape"])))
        tensors[name] = arr
    spans.sort()
    for (a0, a1), (b0, _) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ContainerError("overlapping tensor offsets")
    return tensors, manifest.get("meta")
