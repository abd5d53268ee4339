"""Byte-to-field classification of the metadata region."""
from __future__ import annotations

import bisect
from dataclasses import dataclass

from .format import MSG_DATASPACE, MSG_DATATYPE, MSG_LAYOUT, MSG_SYMBOL_TABLE
from .parser import Hdf5Model, ObjectHeader

RESERVED = "reserved"
SIGNATURE = "signature"
VERSION = "version"
FP_PROPERTY = "fp-property"
LAYOUT = "layout"
DIMS = "dims"
OTHER = "other"
ROLES = (RESERVED, SIGNATURE, VERSION, FP_PROPERTY, LAYOUT, DIMS, OTHER)


@dataclass(frozen=True)
class Field:
    name: str
    start: int
    end: int
    role: str

    def __len__(self) -> int:
        return self.end - self.start


class FieldMap:
    """Disjoint, sorted spans covering ``[0, metadata_size)``."""

    def __init__(self, fields: list[Field], size: int):
        self.fields = sorted(fields, key=lambda f: f.start)
        self.size = size
        self._starts = [f.start for f in self.fields]

    def __iter__(self):
        return iter(self.fields)

    def __len__(self) -> int:
        return len(self.fields)

    def at(self, offset: int) -> Field:
        i = bisect.bisect_right(self._starts, offset) - 1
        if i < 0 or offset >= self.fields[i].end:
            raise KeyError(offset)
        return self.fields[i]

    def get(self, name: str) -> Field:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    def bytes_by_role(self) -> dict[str, int]:
        out = dict.fromkeys(ROLES, 0)
        for f in self.fields:
            out[f.role] += len(f)
        return out


class _Builder:
    def __init__(self):
        self.fields: list[Field] = []

    def add(self, name: str, start: int, length: int, role: str) -> None:
        if length > 0:
            self.fields.append(Field(name, start, start + length, role))

    def seq(self, prefix: str, start: int, spec) -> int:
        pos = start
        for name, length, role in spec:
            self.add(f"{prefix}.{name}", pos, length, role)
            pos += length
        return pos


def _datatype_fields(b: _Builder, p: str, off: int, size: int) -> None:
    end = b.seq(p, off, [
        ("class_and_version", 1, VERSION),
        ("byte_order_padding_normalization", 1, FP_PROPERTY),
        ("sign_location", 1, FP_PROPERTY),
        ("class_bits_reserved", 1, RESERVED),
        ("size", 4, OTHER),
        ("bit_offset", 2, FP_PROPERTY),
        ("bit_precision", 2, FP_PROPERTY),
        ("exponent_location", 1, FP_PROPERTY),
        ("exponent_size", 1, FP_PROPERTY),
        ("mantissa_location", 1, FP_PROPERTY),
        ("mantissa_size", 1, FP_PROPERTY),
        ("exponent_bias", 4, FP_PROPERTY),
    ])
    b.add(f"{p}.padding", end, off + size - end, RESERVED)


def _message_body(b: _Builder, p: str, mtype: int, off: int, size: int,
                  model: Hdf5Model) -> None:
    end = off
    if mtype == MSG_SYMBOL_TABLE:
        end = b.seq(p, off, [("btree_address", 8, OTHER), ("heap_address", 8, OTHER)])
    elif mtype == MSG_DATASPACE:
        rank = len(model.dims)
        end = b.seq(p, off, [("version", 1, VERSION), ("rank", 1, DIMS),
                             ("flags", 1, OTHER), ("reserved", 5, RESERVED)])
        for i in range(rank):
            b.add(f"{p}.dims[{i}]", end, 8, DIMS)
            end += 8
    elif mtype == MSG_DATATYPE:
        return _datatype_fields(b, p, off, size)
    elif mtype == MSG_LAYOUT:
        end = b.seq(p, off, [("version", 1, VERSION), ("class", 1, LAYOUT),
                             ("address_of_raw_data", 8, LAYOUT), ("size", 8, LAYOUT)])
    else:
        b.add(f"{p}.body", off, size, OTHER)
        return
    b.add(f"{p}.padding", end, off + size - end, RESERVED)


_MSG_NAMES = {MSG_SYMBOL_TABLE: "symbol_table", MSG_DATASPACE: "dataspace",
              MSG_DATATYPE: "datatype", MSG_LAYOUT: "layout"}


def _object_header_fields(b: _Builder, p: str, oh: ObjectHeader, model: Hdf5Model) -> None:
    b.seq(p, oh.address, [("version", 1, VERSION), ("reserved", 1, RESERVED),
                          ("n_messages", 2, OTHER), ("reference_count", 4, OTHER),
                          ("header_size", 4, OTHER), ("padding", 4, RESERVED)])
    pos = oh.address + 16
    for m in oh.messages:
        mp = f"{p}.{_MSG_NAMES.get(m.type, f'message_{m.type:#06x}')}"
        b.seq(f"{mp}.header", m.header_offset, [("type", 2, OTHER), ("size", 2, OTHER),
                                                ("flags", 1, OTHER), ("reserved", 3, RESERVED)])
        _message_body(b, mp, m.type, m.data_offset, m.size, model)
        pos = m.data_offset + m.size
    b.add(f"{p}.unused", pos, oh.end - pos, RESERVED)


def build_field_map(model: Hdf5Model) -> FieldMap:
    b = _Builder()
    b.seq("superblock", 0, [
        ("signature", 8, SIGNATURE), ("version", 1, VERSION),
        ("freespace_version", 1, VERSION), ("root_entry_version", 1, VERSION),
        ("reserved0", 1, RESERVED), ("shared_header_version", 1, VERSION),
        ("size_of_offsets", 1, OTHER), ("size_of_lengths", 1, OTHER),
        ("reserved1", 1, RESERVED), ("group_leaf_k", 2, OTHER),
        ("group_internal_k", 2, OTHER), ("consistency_flags", 4, OTHER),
        ("base_address", 8, OTHER), ("freespace_address", 8, OTHER),
        ("eof_address", 8, OTHER), ("driver_info_address", 8, OTHER),
        ("root_entry.link_name_offset", 8, OTHER),
        ("root_entry.header_address", 8, OTHER), ("root_entry.cache_type", 4, OTHER),
        ("root_entry.reserved", 4, RESERVED), ("root_entry.scratch_pad", 16, OTHER),
    ])
    _object_header_fields(b, "root_header", model.root_header, model)

    bt = model.btree
    pos = b.seq("btree", bt.address, [
        ("signature", 4, SIGNATURE), ("node_type", 1, OTHER), ("node_level", 1, OTHER),
        ("entries_used", 2, OTHER), ("left_sibling", 8, OTHER),
        ("right_sibling", 8, OTHER)])
    for i in range(bt.entries_used):
        pos = b.seq("btree", pos, [(f"key[{i}]", 8, OTHER), (f"child[{i}]", 8, OTHER)])
    pos = b.seq("btree", pos, [(f"key[{bt.entries_used}]", 8, OTHER)])
    b.add("btree.unused", pos, bt.address + bt.size - pos, RESERVED)

    hp = model.heap
    b.seq("heap", hp.address, [
        ("signature", 4, SIGNATURE), ("version", 1, VERSION), ("reserved", 3, RESERVED),
        ("data_size", 8, OTHER), ("free_list_head", 8, OTHER), ("data_address", 8, OTHER)])
    free = hp.free_head if hp.free_head < hp.data_size else hp.data_size
    b.add("heap.data.names", hp.data_address, free, OTHER)
    b.add("heap.data.free_space", hp.data_address + free, hp.data_size - free, RESERVED)

    sn = model.snod
    pos = b.seq("snod", sn.address, [("signature", 4, SIGNATURE), ("version", 1, VERSION),
                                     ("reserved", 1, RESERVED), ("n_symbols", 2, OTHER)])
    for i in range(sn.n_symbols):
        pos = b.seq(f"snod.entry[{i}]", pos, [
            ("link_name_offset", 8, OTHER), ("header_address", 8, OTHER),
            ("cache_type", 4, OTHER), ("reserved", 4, RESERVED),
            ("scratch_pad", 16, RESERVED)])
    b.add("snod.unused_entries", pos, sn.address + sn.size - pos, RESERVED)

    _object_header_fields(b, "dataset_header", model.dataset_header, model)

    size = model.metadata_size
    fields = sorted(b.fields, key=lambda f: f.start)
    gaps, cursor = [], 0
    for f in fields:
        if f.start > cursor:
            gaps.append(Field(f"gap@{cursor}", cursor, f.start, RESERVED))
        cursor = max(cursor, f.end)
    if cursor < size:
        gaps.append(Field(f"gap@{cursor}", cursor, size, RESERVED))
    return FieldMap(fields + gaps, size)
