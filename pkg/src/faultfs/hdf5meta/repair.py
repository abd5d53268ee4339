"""Detect and repair metadata faults in files whose data averages to one.

The detector leans on a domain invariant: a mass-conserving density field
has a mean of exactly 1. How the observed mean departs from 1 points at the
faulty field:

* a mean that is an exact power of two other than 1 means the exponent bias
  moved (every value scaled by the same power of two);
* a datatype whose bit-field layout is internally inconsistent means one of
  exponent location, mantissa location/size or exponent size was hit (this
  is checked whatever the mean, since e.g. a wider exponent can still
  decode non-negative data unchanged);
* the raw-data address must equal the metadata size because metadata is laid
  out first; a mismatch is a faulty address whatever the mean says.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace

from .._numeric import exact_mean, power_of_two_exponent
from ..errors import FaultFSError, PreconditionError
from .format import FloatingPointProperty
from .parser import Hdf5Model, parse_file, read_dataset
from .writer import datatype_body

TOLERANCE = {8: 1e-12, 4: 1e-6}


class Unrepairable(FaultFSError):
    pass


class DiagnosisKind(str, enum.Enum):
    CLEAN = "Clean"
    EXPONENT_BIAS = "ExponentBiasFault"
    FP_LAYOUT = "FpLayoutFault"
    ARD = "ArdFault"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class Diagnosis:
    kind: DiagnosisKind
    average: float
    detail: dict = field(default_factory=dict)

    def __str__(self) -> str:
        extra = " ".join(f"{k}={v}" for k, v in self.detail.items())
        return f"{self.kind.value} (average={self.average!r}{' ' + extra if extra else ''})"


def diagnose(model: Hdf5Model, average: float) -> Diagnosis:
    tol = TOLERANCE.get(model.datatype.size, 1e-6)
    meta = model.metadata_size
    if model.layout.address != meta:
        return Diagnosis(DiagnosisKind.ARD, average,
                         {"address": model.layout.address, "metadata_size": meta})
    # checked before the mean: some layout faults decode to the same values
    if not model.datatype.layout_consistent(8 * model.datatype.size):
        return Diagnosis(DiagnosisKind.FP_LAYOUT, average)
    if abs(average - 1.0) <= tol:
        return Diagnosis(DiagnosisKind.CLEAN, average)
    k = power_of_two_exponent(average)
    if k is not None:
        return Diagnosis(DiagnosisKind.EXPONENT_BIAS, average, {"log2": k})
    return Diagnosis(DiagnosisKind.UNKNOWN, average)


def correct_exponent_bias(prop: FloatingPointProperty, average: float) -> FloatingPointProperty:
    """Shift the bias by log2 of the observed mean so the mean returns to 1."""
    k = power_of_two_exponent(average)
    if k is None:
        raise PreconditionError(f"average {average!r} is not a power of two")
    return replace(prop, exponent_bias=prop.exponent_bias + k)


def correct_fp_layout(prop: FloatingPointProperty, bit_precision: int) -> FloatingPointProperty:
    """Restore ``exponent_location == mantissa_size`` and
    ``mantissa_size + exponent_size == bit_precision - 1``, assuming one field is wrong.

    ``mantissa_location`` is reset to 0.
    """
    eloc, esize, msize = prop.exponent_location, prop.exponent_size, prop.mantissa_size
    span = bit_precision - 1
    loc_ok = eloc == msize
    sum_ok = msize + esize == span
    if loc_ok and sum_ok:
        pass
    elif loc_ok:
        esize = span - msize
    elif sum_ok:
        eloc = msize
    else:
        msize = eloc
        if msize + esize != span:
            raise Unrepairable("layout constraints cannot be met by changing one field")
    if esize <= 0 or msize <= 0:
        raise Unrepairable("repair would produce an empty exponent or mantissa")
    return replace(prop, exponent_location=eloc, exponent_size=esize,
                   mantissa_size=msize, mantissa_location=0)


def correct_ard(model: Hdf5Model) -> Hdf5Model:
    return replace(model, layout=replace(model.layout, address=model.metadata_size))


def patch_datatype(data: bytes, model: Hdf5Model, prop: FloatingPointProperty) -> bytes:
    out = bytearray(data)
    body = datatype_body(prop)
    out[model.datatype_offset:model.datatype_offset + len(body)] = body
    return bytes(out)


def patch_layout(data: bytes, model: Hdf5Model) -> bytes:
    out = bytearray(data)
    struct.pack_into("<Q", out, model.layout.offset + 2, model.layout.address)
    return bytes(out)


@dataclass
class RepairReport:
    before: Diagnosis
    after: Diagnosis
    actions: list[str]
    data: bytes


def diagnose_bytes(data: bytes) -> tuple[Hdf5Model, Diagnosis]:
    model = parse_file(data)
    return model, diagnose(model, exact_mean(read_dataset(data, model)))


def repair(data: bytes) -> RepairReport:
    """Diagnose, apply the matching correction, and diagnose again."""
    model, before = diagnose_bytes(data)
    actions: list[str] = []
    fixed = data
    if before.kind is DiagnosisKind.ARD:
        new = correct_ard(model)
        fixed = patch_layout(data, new)
        actions.append(f"address of raw data {model.layout.address} -> {new.layout.address}")
    elif before.kind is DiagnosisKind.EXPONENT_BIAS:
        prop = correct_exponent_bias(model.datatype, before.average)
        fixed = patch_datatype(data, model, prop)
        actions.append(f"exponent bias {model.datatype.exponent_bias:#010x} -> "
                       f"{prop.exponent_bias:#010x}")
    elif before.kind is DiagnosisKind.FP_LAYOUT:
        prop = correct_fp_layout(model.datatype, 8 * model.datatype.size)
        fixed = patch_datatype(data, model, prop)
        for name in ("exponent_location", "exponent_size", "mantissa_location",
                     "mantissa_size"):
            a, b = getattr(model.datatype, name), getattr(prop, name)
            if a != b:
                actions.append(f"{name} {a} -> {b}")
    after = diagnose_bytes(fixed)[1] if actions else before
    return RepairReport(before, after, actions, fixed)
