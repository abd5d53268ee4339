"""Fault models: pure transformations from a healthy write into a faulty one.

Every function here is deterministic in its arguments. Bit ``k`` of a payload
lives in byte ``k // 8`` at position ``k % 8`` counted from the least
significant bit, so a flip span may straddle a byte boundary.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PreconditionError

BLOCK_SIZE = 4096
GRANULE_SIZE = 512
SCALAR_WIDTH = 4  # default serialized width of a scalar argument, bytes


class FaultKind(str, enum.Enum):
    BIT_FLIP = "BitFlip"
    SHORN_WRITE = "ShornWrite"
    DROPPED_WRITE = "DroppedWrite"


# Which primitives each model may be armed on.
SUPPORTED_PRIMITIVES = {
    FaultKind.BIT_FLIP: frozenset({"write", "mknod", "chmod"}),
    FaultKind.SHORN_WRITE: frozenset({"write"}),
    FaultKind.DROPPED_WRITE: frozenset({"write", "mknod", "chmod"}),
}


@dataclass(frozen=True)
class FaultModel:
    kind: FaultKind
    bitflip_n: int = 2
    shorn_keep_eighths: int = 7
    shorn_block: int = BLOCK_SIZE
    shorn_granule: int = GRANULE_SIZE

    def __post_init__(self):
        object.__setattr__(self, "kind", FaultKind(self.kind))
        if self.bitflip_n < 1:
            raise ConfigError(f"bitflip_n must be >= 1, got {self.bitflip_n}")
        if not 1 <= self.shorn_keep_eighths <= 7:
            raise ConfigError(
                f"shorn_keep_eighths must be in 1..7, got {self.shorn_keep_eighths}")
        if self.shorn_block % self.shorn_granule:
            raise ConfigError("shorn_block must be a multiple of shorn_granule")
        if self.shorn_keep_eighths * self.shorn_granule >= self.shorn_block:
            raise ConfigError("shorn write would keep the whole block")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "bitflip_n": self.bitflip_n,
                "shorn_keep_eighths": self.shorn_keep_eighths}

    @classmethod
    def from_dict(cls, d: dict) -> "FaultModel":
        return cls(FaultKind(d["kind"]), bitflip_n=d.get("bitflip_n", 2),
                   shorn_keep_eighths=d.get("shorn_keep_eighths", 7))


@dataclass(frozen=True)
class FaultSignature:
    """Everything needed to reproduce one injection."""

    model: FaultModel
    primitive: str = "write"
    rng_seed: int = 0

    def __post_init__(self):
        allowed = SUPPORTED_PRIMITIVES[self.model.kind]
        if self.primitive not in allowed:
            raise ConfigError(
                f"{self.model.kind.value} cannot be armed on {self.primitive!r}; "
                f"supported: {sorted(allowed)}")

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "primitive": self.primitive,
                "rng_seed": self.rng_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "FaultSignature":
        return cls(FaultModel.from_dict(d["model"]), d.get("primitive", "write"),
                   int(d.get("rng_seed", 0)))


@dataclass(frozen=True)
class WriteOp:
    path: str
    offset: int
    payload: bytes
    declared_size: int = field(default=-1)

    def __post_init__(self):
        if self.declared_size < 0:
            object.__setattr__(self, "declared_size", len(self.payload))
        if len(self.payload) != self.declared_size:
            raise PreconditionError(
                f"payload length {len(self.payload)} != declared size {self.declared_size}")
        if self.offset < 0 or self.offset + self.declared_size >= 2**64:
            raise PreconditionError("offset + size out of u64 range")


@dataclass(frozen=True)
class FaultedWrite:
    effective_payload: bytes
    reported_size: int


def _flip_bits(buf: bytearray, start_bit: int, n: int) -> None:
    for k in range(start_bit, start_bit + n):
        buf[k >> 3] ^= 1 << (k & 7)


def apply_bit_flip(op: WriteOp, start_bit: int, n: int) -> FaultedWrite:
    """Invert bits ``[start_bit, start_bit + n)`` of the payload."""
    if n < 1 or start_bit < 0 or start_bit + n > 8 * op.declared_size:
        raise PreconditionError(
            f"bit span [{start_bit}, {start_bit + n}) outside "
            f"{8 * op.declared_size}-bit payload")
    buf = bytearray(op.payload)
    _flip_bits(buf, start_bit, n)
    return FaultedWrite(bytes(buf), op.declared_size)


def shorn_extent(size: int, model: FaultModel, block: int) -> tuple[int, int, int]:
    """Return ``(keep_end, block_end, granule)`` for the affected block.

    Bytes ``[block_start, keep_end)`` survive; ``[keep_end, block_end)`` are
    clobbered. A block shorter than ``shorn_block`` keeps the same fraction,
    rounded up.
    """
    start = block * model.shorn_block
    if not 0 <= start < size:
        raise PreconditionError(f"block {block} outside {size}-byte payload")
    end = min(size, start + model.shorn_block)
    length = end - start
    if length == model.shorn_block:
        keep = model.shorn_keep_eighths * model.shorn_granule
        granule = model.shorn_granule
    else:
        keep = math.ceil(model.shorn_keep_eighths * length / 8)
        granule = min(model.shorn_granule, keep)
    return start + keep, end, granule


def apply_shorn_write(op: WriteOp, model: FaultModel, fill_seed: int,
                      block: int = 0) -> FaultedWrite:
    """Lose the tail of one block, replacing it with near-copies of the kept data.

    The clobbered granules repeat the last preserved granule; each repeated
    granule then has one PRNG-chosen byte XORed with 0x01 so the garbage is
    deterministic in ``fill_seed`` but not a verbatim copy.
    """
    if op.declared_size <= 0:
        raise PreconditionError("shorn write needs a non-empty payload")
    keep_end, end, granule = shorn_extent(op.declared_size, model, block)
    buf = bytearray(op.payload)
    if keep_end >= end:
        return FaultedWrite(bytes(buf), op.declared_size)
    src = np.frombuffer(op.payload, dtype=np.uint8)[keep_end - granule:keep_end]
    tail = np.resize(src, end - keep_end)
    rng = np.random.default_rng(fill_seed)
    for g0 in range(0, len(tail), granule):
        g1 = min(g0 + granule, len(tail))
        tail[g0 + int(rng.integers(g1 - g0))] ^= 0x01
    buf[keep_end:end] = tail.tobytes()
    return FaultedWrite(bytes(buf), op.declared_size)


def apply_dropped_write(op: WriteOp) -> FaultedWrite:
    return FaultedWrite(b"", op.declared_size)


def corrupt_scalar_args(args: tuple[int, ...], start_bit: int, n: int,
                        widths: tuple[int, ...] | None = None) -> tuple[int, ...]:
    """Flip bits in the little-endian concatenation of small integer arguments.

    Each argument occupies ``widths[i]`` bytes (``SCALAR_WIDTH`` by default),
    argument 0 first.
    """
    widths = widths or (SCALAR_WIDTH,) * len(args)
    if len(widths) != len(args):
        raise PreconditionError("one width per argument")
    blob = bytearray()
    for value, w in zip(args, widths):
        blob += int(value).to_bytes(w, "little", signed=False)
    if n < 1 or start_bit < 0 or start_bit + n > 8 * len(blob):
        raise PreconditionError(
            f"bit span [{start_bit}, {start_bit + n}) outside {8 * len(blob)}-bit args")
    _flip_bits(blob, start_bit, n)
    out, pos = [], 0
    for w in widths:
        out.append(int.from_bytes(blob[pos:pos + w], "little"))
        pos += w
    return tuple(out)


def draw_parameters(model: FaultModel, size: int, rng: np.random.Generator) -> dict:
    """Sample the concrete fault point for a payload of ``size`` bytes.

    ``size`` is the payload length in bytes (the serialized length for scalar
    arguments). The returned dict feeds :func:`apply_fault` and is recorded
    verbatim in session logs.
    """
    if model.kind is FaultKind.BIT_FLIP:
        nbits = 8 * size
        if nbits < model.bitflip_n:
            raise PreconditionError("payload too small for the flip span")
        return {"start_bit": int(rng.integers(nbits - model.bitflip_n + 1)),
                "n": model.bitflip_n}
    if model.kind is FaultKind.SHORN_WRITE:
        if size <= 0:
            raise PreconditionError("shorn write needs a non-empty payload")
        point = int(rng.integers(size))
        return {"block": point // model.shorn_block,
                "fill_seed": int(rng.integers(2**63))}
    return {}


def apply_fault(op: WriteOp, model: FaultModel, params: dict) -> FaultedWrite:
    if model.kind is FaultKind.BIT_FLIP:
        return apply_bit_flip(op, params["start_bit"], params["n"])
    if model.kind is FaultKind.SHORN_WRITE:
        return apply_shorn_write(op, model, params["fill_seed"], params["block"])
    return apply_dropped_write(op)
