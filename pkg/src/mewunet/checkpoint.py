"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"MEWUNET\\0"
    version    u32      FORMAT_VERSION
    meta_len   u32      length of the JSON metadata block
    meta       bytes    UTF-8 JSON, keys sorted: {"network": NetworkConfig, ...extra}
    n_records  u32
    records    n_records x record

    record:
    name_len   u16, name (UTF-8)
    dtype      u8       0 = float64, 1 = float32
    ndim       u8, dims u32 x ndim
    data       raw little-endian scalars, row-major

Records hold network parameters, then buffers, then any extra arrays
(optimizer state) under their own names.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .layers import Module
from .network import MEWUNet, NetworkConfig, build_network

MAGIC = b"MEWUNET\0"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class CheckpointError(ValueError):
    pass


def encode(meta: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a MEW-UNet checkpoint (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<II", buf, 8)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 16
        meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            dtype = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + size > len(buf):
                raise CheckpointError(f"record {name!r} truncated")
            arr = np.frombuffer(buf, dtype=dtype, count=size // dtype.itemsize, offset=pos).reshape(shape)
            pos += size
            arrays.append((name, arr.astype(dtype.newbyteorder("="))))
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    return meta, arrays


def model_arrays(net: Module) -> list[tuple[str, np.ndarray]]:
    return [(n, t.data) for n, t in net.named_parameters()] + [(n, t.data) for n, t in net.named_buffers()]


def save_checkpoint(path, net: MEWUNet, extra_meta: dict | None = None,
                    extra_arrays: list[tuple[str, np.ndarray]] | None = None) -> Path:
    meta = {"network": net.cfg.to_dict()}
    meta.update(extra_meta or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(meta, model_arrays(net) + list(extra_arrays or [])))
    return path


def load_checkpoint(path) -> tuple[MEWUNet, dict, dict[str, np.ndarray]]:
    """Rebuild the network from a checkpoint.

    Returns (network, metadata, arrays that are not network tensors).
    """
    meta, arrays = decode(Path(path).read_bytes())
    cfg = NetworkConfig.from_dict(meta["network"])
    net = build_network(cfg, 0)
    table = dict(arrays)
    for name, t in net.named_tensors():
        if name not in table:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        arr = table.pop(name)
        if arr.shape != t.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != expected {t.shape}")
        t.data = arr.astype(t.dtype).copy()
    return net, meta, table
