"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SGRN" | u32 version | u32 n + n bytes canonical config JSON
    | u32 record count | records... | u64 checksum

Each record is ``u32 name length, name (UTF-8), u32 rank, rank x u64
extents, float64 data``.  The checksum is an 8-byte BLAKE2b digest of every
preceding byte.  Optimizer moments are stored as records under ``opt.m.``,
``opt.v.`` and ``opt.v_max.`` prefixes; the step counter lives in the config
text.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ConfigError, ModelConfig, SagrnnParams, init_params
from .training import OptimState

MAGIC = b"SGRN"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic or malformed structure."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError, ConfigError):
    pass


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def _canonical(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()


def encode_checkpoint(params: SagrnnParams, config: ModelConfig, state: Optional[OptimState] = None, extra: Optional[dict] = None) -> bytes:
    meta = {"model": config.to_dict()}
    records = list(params.named().items())
    if state is not None:
        meta["optim"] = {"t": state.t, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps}
        for key in ("m", "v", "v_max"):
            for name in sorted(getattr(state, key)):
                records.append((f"opt.{key}.{name}", getattr(state, key)[name]))
    if extra:
        meta["extra"] = extra
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    text = _canonical(meta)
    out += struct.pack("<I", len(text)) + text
    out += struct.pack("<I", len(records))
    for name, value in records:
        arr = value.data if hasattr(value, "data") and not isinstance(value, np.ndarray) else value
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    out += _digest(bytes(out))
    return bytes(out)


def save_checkpoint(params: SagrnnParams, config: ModelConfig, state: Optional[OptimState], path, extra: Optional[dict] = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, config, state, extra))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_checkpoint(data: bytes):
    """Parse bytes into ``(config, meta, records)``; verifies structure and checksum."""
    if data[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic)")
    rd = _Reader(data)
    rd.take(4)
    version = rd.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    meta = json.loads(rd.take(rd.u32()).decode())
    count = rd.u32()
    records = {}
    for _ in range(count):
        name = rd.take(rd.u32()).decode()
        rank = rd.u32()
        shape = struct.unpack(f"<{rank}Q", rd.take(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        records[name] = np.frombuffer(rd.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    body_end = rd.pos
    stored = rd.take(8)
    if rd.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - rd.pos} trailing bytes after checksum")
    if _digest(data[:body_end]) != stored:
        raise ChecksumError("checkpoint checksum mismatch")
    config = ModelConfig.from_dict(meta["model"])
    return config, meta, records


def load_checkpoint(path, expected: Optional[ModelConfig] = None):
    """Returns ``(params, config, state_or_None, extra)``.

    Raises :class:`ConfigMismatchError` if ``expected`` differs from the stored config.
    """
    config, meta, records = decode_checkpoint(Path(path).read_bytes())
    if expected is not None and expected != config:
        raise ConfigMismatchError(f"checkpoint config {config} does not match expected {expected}")
    params = init_params(config, 0)
    named = params.named()
    missing = set(named) - set(records)
    if missing:
        raise CheckpointFormatError(f"missing parameter records: {sorted(missing)[:5]}")
    for name, p in named.items():
        if records[name].shape != p.shape:
            raise ConfigMismatchError(f"record {name} has shape {records[name].shape}, expected {p.shape}")
        p.data = records[name].copy()
    state = None
    if "optim" in meta:
        o = meta["optim"]
        state = OptimState(t=o["t"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])
        for key in ("m", "v", "v_max"):
            prefix = f"opt.{key}."
            getattr(state, key).update({k[len(prefix):]: v for k, v in records.items() if k.startswith(prefix)})
    return params, config, state, meta.get("extra", {})
