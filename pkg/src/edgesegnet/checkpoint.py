"""Binary checkpoint format.

Layout, all integers little-endian::

    b"ESEG"                      magic
    u32  version (= 1)
    u32  config byte length, then the config JSON bytes
    u32  tensor count, then per tensor:
         u16 name length, name bytes (UTF-8)
         u8  rank, rank x u32 extents
         raw float32 elements, row-major
    u32  CRC-32 of every byte after the magic and before the checksum
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .config import NetworkConfig
from .errors import ConfigError, ConsistencyError, CorruptionError, FormatError, VersionError
from .network import NetworkGraph, assemble_network

MAGIC = b"ESEG"
VERSION = 1


def encode(config_text: str, tensors: Dict[str, np.ndarray]) -> bytes:
    cfg = config_text.encode("utf-8")
    parts = [struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return MAGIC + body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> Tuple[str, Dict[str, np.ndarray]]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("not an ESEG checkpoint (bad magic)")
    if len(blob) < 16:
        raise CorruptionError("checkpoint truncated")
    body, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("checkpoint CRC-32 mismatch")
    try:
        version, n_cfg = struct.unpack_from("<II", body, 0)
        if version != VERSION:
            raise VersionError(f"unsupported checkpoint version {version}")
        off = 8
        config_text = body[off : off + n_cfg].decode("utf-8")
        off += n_cfg
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (n_name,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + n_name].decode("utf-8")
            off += n_name
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if off + nbytes > len(body):
                raise FormatError(f"tensor {name!r} extends past the end of the file")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
            off += nbytes
        if off != len(body):
            raise FormatError(f"{len(body) - off} trailing bytes after the last tensor")
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from None
    return config_text, tensors


def save_checkpoint(graph: NetworkGraph, path) -> int:
    """Write ``graph`` to ``path``; returns the number of bytes written."""
    blob = encode(graph.config.to_json(), graph.state_dict())
    Path(path).write_bytes(blob)
    return len(blob)


def load_checkpoint(path, dtype=np.float32) -> NetworkGraph:
    config_text, tensors = decode(Path(path).read_bytes())
    try:
        config = NetworkConfig.from_json(config_text)
        graph = assemble_network(config, dtype=np.float32)
    except ConfigError as exc:
        raise ConsistencyError(f"embedded config is invalid: {exc}") from None
    state = graph.state_dict()
    if list(state) != list(tensors):
        missing = sorted(set(state) - set(tensors))
        extra = sorted(set(tensors) - set(state))
        raise ConsistencyError(f"tensor names differ from config (missing={missing}, extra={extra})")
    for name, arr in tensors.items():
        if state[name].shape != arr.shape:
            raise ConsistencyError(f"tensor {name!r} has shape {arr.shape}, config expects {state[name].shape}")
        state[name][...] = arr
    return graph.astype_(dtype)


def expected_size(graph: NetworkGraph) -> Tuple[int, int]:
    """``(payload_bytes, header_bytes)`` a checkpoint of ``graph`` will occupy."""
    state = graph.state_dict()
    payload = 4 * sum(v.size for v in state.values())
    header = 4 + 8 + len(graph.config.to_json().encode()) + 4 + 4
    header += sum(2 + len(k.encode()) + 1 + 4 * v.ndim for k, v in state.items())
    return payload, header
