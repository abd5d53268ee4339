"""Byte-exact writer for a single contiguous floating-point dataset."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .format import (INTERNAL_K, LEAF_K, MSG_DATASPACE, MSG_DATATYPE, MSG_LAYOUT,
                     MSG_SYMBOL_TABLE, SIGNATURE, SUPERBLOCK_SIZE, SYMBOL_ENTRY_SIZE,
                     UNDEF, FloatingPointProperty)

PRECISIONS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
WRITE_CHUNK = 4096


def _dtype(precision) -> np.dtype:
    if isinstance(precision, str) and precision in PRECISIONS:
        return PRECISIONS[precision]
    try:
        dt = np.dtype(precision).newbyteorder("<")
    except TypeError as exc:
        raise ConfigError(f"unsupported precision {precision!r}") from exc
    if dt not in PRECISIONS.values():
        raise ConfigError(f"unsupported precision {precision!r}; use f32 or f64")
    return dt


def _pad8(b: bytes) -> bytes:
    return b + b"\0" * (-len(b) % 8)


def _symbol_entry(name_offset: int, header_address: int, cache_type: int = 0,
                  scratch: bytes = b"") -> bytes:
    return struct.pack("<QQII", name_offset, header_address, cache_type, 0) \
        + scratch.ljust(16, b"\0")


def _message(mtype: int, body: bytes, flags: int = 0) -> bytes:
    body = _pad8(body)
    return struct.pack("<HHB3x", mtype, len(body), flags) + body


def _object_header(messages: list[bytes]) -> bytes:
    payload = b"".join(messages)
    return struct.pack("<BBHII4x", 1, 0, len(messages), 1, len(payload)) + payload


def datatype_body(prop: FloatingPointProperty) -> bytes:
    return bytes([0x11]) + prop.class_bits() + struct.pack(
        "<IHHBBBBI", prop.size, prop.bit_offset, prop.bit_precision,
        prop.exponent_location, prop.exponent_size, prop.mantissa_location,
        prop.mantissa_size, prop.exponent_bias)


@dataclass(frozen=True)
class Hdf5Image:
    data: bytes
    raw_address: int  # equals the metadata size
    raw_size: int

    @property
    def metadata(self) -> bytes:
        return self.data[:self.raw_address]


def encode_dataset(grid: np.ndarray, precision="f64", name: str = "density") -> Hdf5Image:
    """Lay out superblock, root group, dataset header and raw data in one image."""
    dt = _dtype(precision)
    grid = np.asarray(grid)
    if grid.ndim < 1 or min(grid.shape) < 1:
        raise ConfigError(f"grid dims must all be >= 1, got {grid.shape}")
    raw = np.ascontiguousarray(grid, dtype=dt).tobytes()
    prop = FloatingPointProperty.ieee_double() if dt.itemsize == 8 \
        else FloatingPointProperty.ieee_single()

    name_bytes = _pad8(name.encode() + b"\0")
    heap_used = 8 + len(name_bytes)
    heap_size = max(88, heap_used + 16)
    btree_size = 24 + (2 * INTERNAL_K + 1) * 8 + 2 * INTERNAL_K * 8
    snod_size = 8 + 2 * LEAF_K * SYMBOL_ENTRY_SIZE

    root_oh = SUPERBLOCK_SIZE
    btree = root_oh + 16 + 8 + 16
    heap = btree + btree_size
    heap_data = heap + 32
    dset_oh = heap_data + heap_size

    dataspace = struct.pack("<BBBB4x", 1, grid.ndim, 0, 0) \
        + struct.pack(f"<{grid.ndim}Q", *grid.shape)
    dset_messages = [
        _message(MSG_DATASPACE, dataspace),
        _message(MSG_DATATYPE, datatype_body(prop), flags=1),
        None,  # layout, filled once the raw address is known
    ]
    layout_len = 8 + 24
    dset_size = 16 + sum(len(m) for m in dset_messages[:2]) + layout_len
    snod = dset_oh + dset_size
    raw_address = snod + snod_size
    dset_messages[2] = _message(MSG_LAYOUT, struct.pack("<BBQQ", 3, 1, raw_address, len(raw)))
    eof = raw_address + len(raw)

    out = bytearray(eof)
    out[0:SUPERBLOCK_SIZE] = (
        SIGNATURE + bytes([0, 0, 0, 0, 0, 8, 8, 0])
        + struct.pack("<HHI", LEAF_K, INTERNAL_K, 0)
        + struct.pack("<QQQQ", 0, UNDEF, eof, UNDEF)
        + _symbol_entry(0, root_oh, 1, struct.pack("<QQ", btree, heap)))
    root = _object_header([_message(MSG_SYMBOL_TABLE, struct.pack("<QQ", btree, heap))])
    out[root_oh:root_oh + len(root)] = root

    node = b"TREE" + struct.pack("<BBHQQ", 0, 0, 1, UNDEF, UNDEF) \
        + struct.pack("<QQQ", 0, snod, 8)
    out[btree:btree + len(node)] = node

    out[heap:heap + 32] = b"HEAP" + struct.pack("<B3xQQQ", 0, heap_size, heap_used, heap_data)
    segment = b"\0" * 8 + name_bytes + struct.pack("<QQ", 1, heap_size - heap_used)
    out[heap_data:heap_data + len(segment)] = segment

    header = _object_header(dset_messages)
    out[dset_oh:dset_oh + len(header)] = header

    entry = _symbol_entry(8, dset_oh)
    out[snod:snod + 8 + len(entry)] = b"SNOD" + struct.pack("<BBH", 1, 0, 1) + entry

    out[raw_address:eof] = raw
    return Hdf5Image(bytes(out), raw_address, len(raw))


def write_plan(image: Hdf5Image, chunk: int = WRITE_CHUNK) -> list[tuple[int, bytes]]:
    """Order of ``(offset, bytes)`` writes: raw data, then metadata, superblock last.

    This mirrors how the reference library flushes a new file, which makes
    the metadata body the penultimate write.
    """
    plan = [(off, image.data[off:min(off + chunk, len(image.data))])
            for off in range(image.raw_address, len(image.data), chunk)]
    plan.append((SUPERBLOCK_SIZE, image.data[SUPERBLOCK_SIZE:image.raw_address]))
    plan.append((0, image.data[:SUPERBLOCK_SIZE]))
    return plan


def write_dataset(grid: np.ndarray, precision="f64", path=None, *, fs=None,
                  name: str = "density", chunk: int = WRITE_CHUNK) -> bytes:
    """Encode ``grid`` and, when ``path`` is given, write it out.

    With ``fs`` (an interposition session) the file is created, sized and
    filled through the session's primitives, ``path`` being a session path.
    Otherwise plain OS calls are used. Returns the file image.
    """
    image = encode_dataset(grid, precision, name)
    if path is None:
        return image.data
    plan = write_plan(image, chunk)
    if fs is not None:
        fh = fs.create(path, 0o644)
        try:
            fs.truncate(path, len(image.data), fh)
            for off, data in plan:
                fs.write(path, data, off, fh)
        finally:
            fs.release(path, fh)
    else:
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
        try:
            os.ftruncate(fd, len(image.data))
            for off, data in plan:
                os.pwrite(fd, data, off)
        finally:
            os.close(fd)
    return image.data
