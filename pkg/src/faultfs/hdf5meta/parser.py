"""Strict reader for the supported HDF5 subset.

Anything outside the subset, or any structure a real reader would reject
(bad signature, unknown version, address past end of file), raises a
:class:`~faultfs.hdf5meta.format.Hdf5FormatError` naming the field and its
offset. Reserved bytes are never validated.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .format import (HEAP_FREE_NULL, MSG_DATASPACE, MSG_DATATYPE, MSG_LAYOUT,
                     MSG_SYMBOL_TABLE, SIGNATURE, SUPERBLOCK_SIZE,
                     SYMBOL_ENTRY_SIZE, UNDEF, AddressOutOfBounds, BadSignature,
                     FloatingPointProperty, MissingObject, TruncatedMessage,
                     UnsupportedValue, UnsupportedVersion)


@dataclass(frozen=True)
class Superblock:
    leaf_k: int
    internal_k: int
    base_address: int
    eof_address: int
    root_header_address: int


@dataclass(frozen=True)
class Message:
    type: int
    flags: int
    header_offset: int  # file offset of the 8-byte message header
    size: int

    @property
    def data_offset(self) -> int:
        return self.header_offset + 8


@dataclass(frozen=True)
class ObjectHeader:
    address: int
    header_size: int
    messages: tuple[Message, ...]

    @property
    def end(self) -> int:
        return self.address + 16 + self.header_size

    def find(self, mtype: int) -> Message | None:
        return next((m for m in self.messages if m.type == mtype), None)


@dataclass(frozen=True)
class BTreeNode:
    address: int
    entries_used: int
    children: tuple[int, ...]
    size: int


@dataclass(frozen=True)
class LocalHeap:
    address: int
    data_size: int
    free_head: int
    data_address: int


@dataclass(frozen=True)
class SymbolNode:
    address: int
    n_symbols: int
    entries: tuple[tuple[int, int], ...]  # (name offset, header address)
    size: int


@dataclass(frozen=True)
class LayoutMessage:
    version: int
    address: int  # Address of Raw Data
    size: int
    offset: int  # file offset of the message body


@dataclass(frozen=True)
class Hdf5Model:
    file_size: int
    superblock: Superblock
    root_header: ObjectHeader
    btree: BTreeNode
    heap: LocalHeap
    snod: SymbolNode
    dataset_name: str
    dataset_header: ObjectHeader
    dims: tuple[int, ...]
    datatype: FloatingPointProperty
    datatype_offset: int  # file offset of the datatype message body
    layout: LayoutMessage

    @property
    def metadata_size(self) -> int:
        """End of the last metadata structure; where raw data must begin."""
        return max(SUPERBLOCK_SIZE, self.root_header.end,
                   self.btree.address + self.btree.size,
                   self.heap.address + 32, self.heap.data_address + self.heap.data_size,
                   self.snod.address + self.snod.size, self.dataset_header.end)

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.eof = len(data)

    def need(self, offset: int, length: int, field: str) -> None:
        if offset < 0 or offset + length > self.eof:
            raise AddressOutOfBounds(f"{length} bytes past end of file", offset, field)

    def unpack(self, fmt: str, offset: int, field: str):
        size = struct.calcsize(fmt)
        self.need(offset, size, field)
        return struct.unpack_from(fmt, self.data, offset)

    def signature(self, offset: int, expected: bytes, field: str) -> None:
        self.need(offset, len(expected), field)
        if self.data[offset:offset + len(expected)] != expected:
            raise BadSignature(f"expected {expected!r}", offset, field)

    def version(self, offset: int, expected: int, field: str) -> None:
        (v,) = self.unpack("<B", offset, field)
        if v != expected:
            raise UnsupportedVersion(f"version {v}, supported {expected}", offset, field)


def _object_header(r: _Reader, address: int, field: str) -> ObjectHeader:
    r.need(address, 16, field)
    r.version(address, 1, f"{field}.version")
    nmsgs, _refcount, header_size = r.unpack("<HII", address + 2, field)
    end = address + 16 + header_size
    r.need(address, 16 + header_size, f"{field}.header_size")
    messages, pos = [], address + 16
    while len(messages) < nmsgs and pos + 8 <= end:
        mtype, size, flags = r.unpack("<HHB", pos, f"{field}.message")
        if pos + 8 + size > end:
            raise TruncatedMessage(f"message of {size} bytes overruns header", pos + 2,
                                   f"{field}.message.size")
        if flags & 0x02:
            raise UnsupportedValue("shared messages are not supported", pos + 4,
                                   f"{field}.message.flags")
        messages.append(Message(mtype, flags, pos, size))
        pos += 8 + size
    return ObjectHeader(address, header_size, tuple(messages))


def _cstring(r: _Reader, offset: int, limit: int, field: str) -> str:
    if not 0 <= offset < limit:
        raise AddressOutOfBounds("name offset outside heap", offset, field)
    end = r.data.find(b"\0", offset, limit)
    if end < 0:
        raise TruncatedMessage("unterminated name", offset, field)
    return r.data[offset:end].decode("latin-1")


def parse_datatype(data: bytes, offset: int, size: int) -> FloatingPointProperty:
    if size < 20:
        raise TruncatedMessage("datatype message too short", offset, "datatype")
    r = _Reader(data)
    (cv, b0, b1, _b2, elem) = r.unpack("<BBBBI", offset, "datatype")
    version, cls = cv >> 4, cv & 0x0F
    if version != 1:
        raise UnsupportedVersion(f"datatype version {version}", offset, "datatype.version")
    if cls != 1:
        raise UnsupportedValue(f"datatype class {cls}", offset, "datatype.class")
    if b0 & 1:
        raise UnsupportedValue("big-endian data", offset + 1, "datatype.byte_order")
    if elem not in (4, 8):
        raise UnsupportedValue(f"element size {elem}", offset + 4, "datatype.size")
    (bit_offset, precision, eloc, esize, mloc, msize, bias) = r.unpack(
        "<HHBBBBI", offset + 8, "datatype.properties")
    return FloatingPointProperty(
        size=elem, byte_order=b0 & 1, pad_bits=(b0 >> 1) & 0b111,
        mantissa_normalization=(b0 >> 4) & 0b11, sign_location=b1,
        bit_offset=bit_offset, bit_precision=precision, exponent_location=eloc,
        exponent_size=esize, mantissa_location=mloc, mantissa_size=msize,
        exponent_bias=bias)


def parse_file(data: bytes, name: str = "density") -> Hdf5Model:
    r = _Reader(bytes(data))
    r.signature(0, SIGNATURE, "superblock.signature")
    for off, field in ((8, "superblock.version"), (9, "superblock.freespace_version"),
                       (10, "superblock.root_entry_version"),
                       (12, "superblock.shared_header_version")):
        r.version(off, 0, field)
    so, sl = r.unpack("<BB", 13, "superblock.sizes")
    if (so, sl) != (8, 8):
        raise UnsupportedValue(f"offset/length sizes {so}/{sl}", 13, "superblock.sizes")
    leaf_k, internal_k, _flags = r.unpack("<HHI", 16, "superblock.k")
    if leaf_k == 0 or internal_k == 0:
        raise UnsupportedValue("zero B-tree K", 16, "superblock.k")
    base, _freespace, eof, driver = r.unpack("<QQQQ", 24, "superblock.addresses")
    if base != 0:
        raise UnsupportedValue(f"base address {base}", 24, "superblock.base_address")
    if driver != UNDEF:
        raise UnsupportedValue("driver info block", 48, "superblock.driver_address")
    if eof > r.eof:
        raise AddressOutOfBounds(f"end-of-file address {eof} beyond file", 40,
                                 "superblock.eof_address")
    r.eof = eof
    (_name_off, root_addr) = r.unpack("<QQ", 56, "superblock.root_entry")
    sb = Superblock(leaf_k, internal_k, base, eof, root_addr)

    root = _object_header(r, root_addr, "root_header")
    stab = root.find(MSG_SYMBOL_TABLE)
    if stab is None or stab.size < 16:
        raise MissingObject("root group has no symbol table", root_addr, "root_header")
    btree_addr, heap_addr = r.unpack("<QQ", stab.data_offset, "root_header.symbol_table")

    r.signature(btree_addr, b"TREE", "btree.signature")
    ntype, level, used = r.unpack("<BBH", btree_addr + 4, "btree")
    if ntype != 0:
        raise UnsupportedValue(f"B-tree node type {ntype}", btree_addr + 4, "btree.node_type")
    if level != 0:
        raise UnsupportedValue(f"B-tree level {level}", btree_addr + 5, "btree.node_level")
    if not 1 <= used <= 2 * internal_k:
        raise UnsupportedValue(f"{used} entries used", btree_addr + 6, "btree.entries_used")
    btree_size = 24 + (2 * internal_k + 1) * 8 + 2 * internal_k * 8
    r.need(btree_addr, btree_size, "btree")
    children = tuple(r.unpack("<Q", btree_addr + 24 + 8 + 16 * i, "btree.child")[0]
                     for i in range(used))
    btree = BTreeNode(btree_addr, used, children, btree_size)

    r.signature(heap_addr, b"HEAP", "heap.signature")
    r.version(heap_addr + 4, 0, "heap.version")
    data_size, free_head, data_addr = r.unpack("<QQQ", heap_addr + 8, "heap")
    r.need(data_addr, data_size, "heap.data_address")
    if free_head != HEAP_FREE_NULL and free_head >= data_size:
        raise UnsupportedValue("bad heap free list", heap_addr + 16, "heap.free_list_head")
    heap = LocalHeap(heap_addr, data_size, free_head, data_addr)
    heap_end = data_addr + data_size

    header_addr = None
    snod = None
    for child in children:
        r.signature(child, b"SNOD", "snod.signature")
        r.version(child + 4, 1, "snod.version")
        (nsym,) = r.unpack("<H", child + 6, "snod.n_symbols")
        if not 1 <= nsym <= 2 * leaf_k:
            raise UnsupportedValue(f"{nsym} symbols", child + 6, "snod.n_symbols")
        snod_size = 8 + 2 * leaf_k * SYMBOL_ENTRY_SIZE
        r.need(child, snod_size, "snod")
        entries = tuple(r.unpack("<QQ", child + 8 + SYMBOL_ENTRY_SIZE * i, "snod.entry")
                        for i in range(nsym))
        for name_off, addr in entries:
            if _cstring(r, data_addr + name_off, heap_end, "snod.entry.name") == name:
                header_addr, snod = addr, SymbolNode(child, nsym, entries, snod_size)
                break
        if snod is not None:
            break
    if snod is None:
        raise MissingObject(f"no dataset named {name!r}", btree_addr, "btree")

    dset = _object_header(r, header_addr, "dataset_header")
    msgs = {t: dset.find(t) for t in (MSG_DATASPACE, MSG_DATATYPE, MSG_LAYOUT)}
    for t, label in ((MSG_DATASPACE, "dataspace"), (MSG_DATATYPE, "datatype"),
                     (MSG_LAYOUT, "layout")):
        if msgs[t] is None:
            raise MissingObject(f"dataset has no {label} message", header_addr,
                                f"dataset_header.{label}")

    ds = msgs[MSG_DATASPACE]
    r.version(ds.data_offset, 1, "dataspace.version")
    rank, ds_flags = r.unpack("<BB", ds.data_offset + 1, "dataspace")
    need = 8 + 8 * rank * (2 if ds_flags & 1 else 1)
    if rank == 0 or need > ds.size:
        raise TruncatedMessage(f"rank {rank} does not fit message", ds.data_offset + 1,
                               "dataspace.rank")
    dims = r.unpack(f"<{rank}Q", ds.data_offset + 8, "dataspace.dims")

    dt = msgs[MSG_DATATYPE]
    datatype = parse_datatype(r.data, dt.data_offset, dt.size)

    lm = msgs[MSG_LAYOUT]
    r.version(lm.data_offset, 3, "layout.version")
    (lclass,) = r.unpack("<B", lm.data_offset + 1, "layout.class")
    if lclass != 1:
        raise UnsupportedValue(f"layout class {lclass}", lm.data_offset + 1, "layout.class")
    if lm.size < 18:
        raise TruncatedMessage("layout message too short", lm.data_offset, "layout")
    ard, raw_size = r.unpack("<QQ", lm.data_offset + 2, "layout")
    if ard >= eof:
        raise AddressOutOfBounds(f"raw data address {ard} past end of file",
                                 lm.data_offset + 2, "layout.address")
    layout = LayoutMessage(3, ard, raw_size, lm.data_offset)

    needed = int(np.prod(dims, dtype=object)) * datatype.size
    if raw_size < needed:
        raise UnsupportedValue(f"raw data size {raw_size} < {needed} required",
                               lm.data_offset + 10, "layout.size")
    return Hdf5Model(len(data), sb, root, btree, heap, snod, name, dset, tuple(dims),
                     datatype, dt.data_offset, layout)


def _bits(word: np.ndarray, location: int, size: int) -> np.ndarray:
    if location >= 64 or size == 0:
        return np.zeros_like(word)
    return (word >> np.uint64(location)) & np.uint64((1 << size) - 1)


def decode(raw: bytes, prop: FloatingPointProperty) -> np.ndarray:
    """Decode little-endian elements by the property's bit fields.

    Values are assembled with exact float64 arithmetic and returned as float32
    for 4-byte elements, float64 for 8-byte ones.
    """
    out_dtype = np.float32 if prop.size == 4 else np.float64
    if prop.is_ieee():
        return np.frombuffer(raw, dtype=f"<f{prop.size}").astype(out_dtype)
    bits = 8 * prop.size
    if prop.mantissa_normalization == 3:
        raise UnsupportedValue("mantissa normalization 3", 0, "datatype.mantissa_normalization")
    if not 1 <= prop.exponent_size <= 32:
        raise UnsupportedValue("exponent size outside 1..32", 0, "datatype.exponent_size")
    if prop.mantissa_size > 63:
        raise UnsupportedValue("mantissa size above 63", 0, "datatype.mantissa_size")
    if prop.sign_location >= bits:
        raise UnsupportedValue("sign bit outside element", 0, "datatype.sign_location")

    # bit positions past the element width read as zero
    word = np.frombuffer(raw, dtype=f"<u{prop.size}").astype(np.uint64)
    sign = _bits(word, prop.sign_location, 1)
    e = _bits(word, prop.exponent_location, prop.exponent_size).astype(np.int64)
    m = _bits(word, prop.mantissa_location, prop.mantissa_size)
    frac = np.ldexp(m.astype(np.float64), -prop.mantissa_size)
    e_eff = e - np.int64(prop.exponent_bias)
    with np.errstate(over="ignore", invalid="ignore"):
        if prop.mantissa_normalization == 2:
            emax = (1 << prop.exponent_size) - 1
            sub = e == 0
            signif = np.where(sub, frac, 1.0 + frac)
            e_eff = np.where(sub, 1 - np.int64(prop.exponent_bias), e_eff)
            val = np.ldexp(signif, np.clip(e_eff, -2**20, 2**20))
            special = e == emax
            val = np.where(special & (m == 0), np.inf, val)
            val = np.where(special & (m != 0), np.nan, val)
        else:
            val = np.ldexp(frac, np.clip(e_eff, -2**20, 2**20))
        val = np.where(sign == 1, -val, val)
        return val.astype(out_dtype)


def read_dataset(data: bytes, model: Hdf5Model | None = None) -> np.ndarray:
    """Decode the dataset; raw bytes past the physical end of file read as zero."""
    model = model or parse_file(data)
    n = model.n_elements * model.datatype.size
    if n > len(data):
        raise AddressOutOfBounds(f"dataset of {n} bytes larger than file",
                                 model.layout.offset, "dataspace.dims")
    start = model.layout.address
    raw = bytes(data[start:start + n])
    raw += b"\0" * (n - len(raw))
    return decode(raw, model.datatype).reshape(model.dims)
