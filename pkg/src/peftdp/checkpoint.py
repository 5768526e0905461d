"""Binary parameter-checkpoint container.

Layout: magic "PDPA", version byte 0x01, record count as u64 LE; then per
record: u16 LE name length, UTF-8 name, u8 rank, dims as u64 LE each,
trainability byte, values as f32 LE. Values round-trip at 32-bit precision;
names, shapes, and trainability flags round-trip exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError
from .model import ParameterRegistry

MAGIC = b"PDPA"
VERSION = 1


def save_checkpoint(reg: ParameterRegistry, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<Q", len(reg)))
        for name, tensor, trainable in reg.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(bytes([tensor.data.ndim]))
            for dim in tensor.data.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(bytes([1 if trainable else 0]))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> ParameterRegistry:
    """Read a checkpoint into a bare registry (no model config attached)."""
    reg = ParameterRegistry()
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise FormatError("bad magic: not a parameter checkpoint")
        version = _read_exact(fh, 1, "version")[0]
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "record count"))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            rank = _read_exact(fh, 1, "rank")[0]
            shape = tuple(struct.unpack("<Q", _read_exact(fh, 8, "dim"))[0]
                          for _ in range(rank))
            trainable = _read_exact(fh, 1, "trainability")[0] != 0
            n = 1
            for dim in shape:
                n *= dim
            values = np.frombuffer(_read_exact(fh, 4 * n, f"values of {name!r}"),
                                   dtype="<f4").astype(np.float64).reshape(shape)
            if name in reg:
                raise FormatError(f"duplicate parameter name {name!r} in checkpoint")
            reg.add(name, values, trainable)
        if fh.read(1):
            raise FormatError("trailing bytes after final checkpoint record")
    return reg


def restore_into(reg: ParameterRegistry, path) -> ParameterRegistry:
    """Load checkpoint values into an existing registry (names/shapes must match)."""
    loaded = load_checkpoint(path)
    if loaded.names() != reg.names():
        raise FormatError("checkpoint parameter names do not match the model")
    for name, tensor, trainable in loaded.items():
        if tensor.data.shape != reg[name].data.shape:
            raise FormatError(f"checkpoint shape mismatch for {name!r}")
        reg[name].data = tensor.data
        reg.set_trainable(name, trainable)
    return reg
