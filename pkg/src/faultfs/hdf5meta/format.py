"""Constants, errors and small value types for the supported HDF5 subset.

Supported: superblock v0 with 8-byte offsets/lengths, a root group held in a
v1 B-tree + local heap + symbol table node, one dataset whose v1 object header
carries a v1 dataspace, a class-1 (floating point) datatype and a v3
contiguous layout. Little-endian only; no checksums.
"""
from __future__ import annotations

from dataclasses import dataclass

from ..errors import FaultFSError

SIGNATURE = b"\x89HDF\r\n\x1a\n"
UNDEF = 0xFFFFFFFFFFFFFFFF
HEAP_FREE_NULL = 1  # "no free block" marker used by the reference library

MSG_NIL = 0x0000
MSG_DATASPACE = 0x0001
MSG_DATATYPE = 0x0003
MSG_LAYOUT = 0x0008
MSG_SYMBOL_TABLE = 0x0011

LEAF_K = 4
INTERNAL_K = 16
SYMBOL_ENTRY_SIZE = 40
SUPERBLOCK_SIZE = 56 + SYMBOL_ENTRY_SIZE


class Hdf5FormatError(FaultFSError):
    """A structure the reader refuses, with the file offset and field at fault."""

    def __init__(self, message: str, offset: int, field: str):
        super().__init__(f"{message} (field {field} at offset {offset})")
        self.offset = offset
        self.field = field


class BadSignature(Hdf5FormatError):
    pass


class UnsupportedVersion(Hdf5FormatError):
    pass


class UnsupportedValue(Hdf5FormatError):
    pass


class TruncatedMessage(Hdf5FormatError):
    pass


class AddressOutOfBounds(Hdf5FormatError):
    pass


class MissingObject(Hdf5FormatError):
    pass


@dataclass(frozen=True)
class FloatingPointProperty:
    """Datatype class-1 description: class bit field plus property block."""

    size: int  # element size, bytes
    byte_order: int = 0  # 0 = little endian
    pad_bits: int = 0  # class bits 1..3 (low/high/internal padding)
    mantissa_normalization: int = 2  # 0 none, 1 msb set, 2 msb implied
    sign_location: int = 63
    bit_offset: int = 0
    bit_precision: int = 64
    exponent_location: int = 52
    exponent_size: int = 11
    mantissa_location: int = 0
    mantissa_size: int = 52
    exponent_bias: int = 0x3FF

    @classmethod
    def ieee_single(cls) -> "FloatingPointProperty":
        return cls(size=4, sign_location=31, bit_precision=32, exponent_location=23,
                   exponent_size=8, mantissa_size=23, exponent_bias=0x7F)

    @classmethod
    def ieee_double(cls) -> "FloatingPointProperty":
        return cls(size=8)

    def is_ieee(self) -> bool:
        return self == (self.ieee_double() if self.size == 8 else self.ieee_single())

    def layout_consistent(self, bit_precision: int | None = None) -> bool:
        """The two field-layout constraints plus a zero mantissa location."""
        precision = self.bit_precision if bit_precision is None else bit_precision
        return (self.exponent_location == self.mantissa_size
                and self.mantissa_size + self.exponent_size == precision - 1
                and self.mantissa_location == 0)

    def class_bits(self) -> bytes:
        b0 = (self.byte_order & 1) | ((self.pad_bits & 0b111) << 1) \
            | ((self.mantissa_normalization & 0b11) << 4)
        return bytes([b0, self.sign_location & 0xFF, 0])
