import math
import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faultfs._numeric import exact_mean, normalize_to_unit_mean
from faultfs.classify import OutcomeClass
from faultfs.errors import ConfigError, PreconditionError
from faultfs.hdf5meta.fieldmap import FP_PROPERTY, RESERVED, build_field_map
from faultfs.hdf5meta.format import (BadSignature, FloatingPointProperty, Hdf5FormatError,
                                     UnsupportedVersion)
from faultfs.hdf5meta.parser import decode, parse_file, read_dataset
from faultfs.hdf5meta.repair import (DiagnosisKind, Unrepairable, correct_ard,
                                     correct_exponent_bias, correct_fp_layout, diagnose,
                                     diagnose_bytes, patch_datatype, patch_layout, repair)
from faultfs.hdf5meta.sweep import records_csv, summarize, sweep_metadata
from faultfs.hdf5meta.writer import encode_dataset, write_dataset, write_plan
from faultfs.toy import halo_finder, make_halo_classifier

from conftest import FIXTURE_MIN_CELLS

# datatype body offsets of the fields a test corrupts
EXP_LOC, EXP_SIZE, MAN_LOC, MAN_SIZE, BIAS = 12, 13, 14, 15, 16


def py_decode(word: int, p: FloatingPointProperty) -> float:
    """Per-element reference decoder written straight from the field definitions."""
    def field(loc, size):
        return (word >> loc) & ((1 << size) - 1) if loc < 64 else 0
    sign = field(p.sign_location, 1)
    e = field(p.exponent_location, p.exponent_size)
    m = field(p.mantissa_location, p.mantissa_size)
    frac = m / 2 ** p.mantissa_size
    if p.mantissa_normalization == 2:
        if e == (1 << p.exponent_size) - 1:
            v = math.inf if m == 0 else math.nan
        elif e == 0:
            v = math.ldexp(frac, 1 - p.exponent_bias)
        else:
            v = math.ldexp(1 + frac, e - p.exponent_bias)
    else:
        v = math.ldexp(frac, e - p.exponent_bias)
    return -v if sign else v


def with_datatype_byte(data: bytes, model, offset: int, value: int) -> bytes:
    b = bytearray(data)
    b[model.datatype_offset + offset] = value
    return bytes(b)


def with_bias(data: bytes, model, bias: int) -> bytes:
    b = bytearray(data)
    struct.pack_into("<I", b, model.datatype_offset + BIAS, bias)
    return bytes(b)


# -- writer / parser -------------------------------------------------------

def test_writer_examples():
    data = write_dataset(np.ones((2, 2, 2)), "f64")
    assert data[:8] == bytes([0x89, 0x48, 0x44, 0x46, 0x0D, 0x0A, 0x1A, 0x0A])
    m = parse_file(data)
    raw = data[m.layout.address:m.layout.address + m.layout.size]
    assert raw == struct.pack("<Q", 0x3FF0000000000000) * 8
    assert m.layout.address == m.metadata_size


def test_unsupported_precision():
    with pytest.raises(ConfigError):
        write_dataset(np.ones(4), "f16")
    with pytest.raises(ConfigError):
        write_dataset(np.ones((0, 3)), "f64")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 16), min_size=1, max_size=3), st.sampled_from(["f32", "f64"]),
       st.integers(0, 2**32))
def test_roundtrip(dims, precision, seed):
    dt = np.float32 if precision == "f32" else np.float64
    g = np.random.default_rng(seed).standard_normal(dims).astype(dt)
    data = write_dataset(g, precision)
    m = parse_file(data)
    out = read_dataset(data, m)
    assert out.dtype == dt and out.shape == tuple(dims)
    assert out.tobytes() == g.tobytes()
    assert m.datatype.layout_consistent(8 * m.datatype.size)
    assert m.layout.address == m.metadata_size


def test_h5py_reads_our_files(tmp_path, fixture_grid):
    h5py = pytest.importorskip("h5py")
    for precision, dt in (("f32", np.float32), ("f64", np.float64)):
        g = fixture_grid.astype(dt)
        path = tmp_path / f"{precision}.h5"
        write_dataset(g, precision, path)
        with h5py.File(path, "r") as f:
            assert np.array_equal(f["density"][...], g)


def test_write_plan_order(fixture_grid):
    img = encode_dataset(np.ones((32, 32, 32)), "f64")
    plan = write_plan(img)
    assert len(plan) == 64 + 2
    assert plan[-1][0] == 0 and plan[-2][0] == 96
    assert all(off >= img.raw_address for off, _ in plan[:-2])


def test_parse_errors_name_offset(fixture_bytes, fixture_model):
    snod = fixture_model.snod.address
    b = bytearray(fixture_bytes)
    b[snod + 1] ^= 1
    with pytest.raises(BadSignature) as e:
        parse_file(bytes(b))
    assert e.value.offset == snod and "snod" in e.value.field.lower()

    oh = fixture_model.dataset_header.address
    b = bytearray(fixture_bytes)
    b[oh] ^= 1
    with pytest.raises(UnsupportedVersion) as e:
        parse_file(bytes(b))
    assert e.value.offset == oh


def test_truncated_file_is_format_error(fixture_bytes):
    for n in (0, 50, 200, 900):
        with pytest.raises(Hdf5FormatError):
            parse_file(fixture_bytes[:n])


@settings(max_examples=200)
@given(st.integers(0, 2**64 - 1), st.integers(2, 11), st.integers(40, 52),
       st.integers(0, 3000), st.integers(0, 1))
def test_generic_decoder_matches_reference(word, esize, msize, bias, norm):
    p = replace(FloatingPointProperty.ieee_double(), exponent_size=esize, mantissa_size=msize,
                exponent_location=msize, exponent_bias=bias, mantissa_normalization=2 * norm)
    got = float(decode(struct.pack("<Q", word), p)[0])
    want = py_decode(word, p)
    assert (math.isnan(got) and math.isnan(want)) or got == want


def test_ieee_fast_path_matches_reference():
    rng = np.random.default_rng(0)
    words = rng.integers(0, 2**63, 2000, dtype=np.uint64)
    p = FloatingPointProperty.ieee_double()
    got = decode(words.astype("<u8").tobytes(), p)
    for w, g in zip(words.tolist(), got):
        want = py_decode(w, p)
        assert (math.isnan(g) and math.isnan(want)) or g == want


# -- field map --------------------------------------------------------------

def test_field_map_partitions_metadata(fixture_model):
    fmap = build_field_map(fixture_model)
    spans = sorted((f.start, f.end) for f in fmap)
    assert spans[0][0] == 0 and spans[-1][1] == fixture_model.layout.address
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    assert sum(len(f) for f in fmap) == fixture_model.layout.address


def test_field_map_exponent_bias(fixture_model):
    fmap = build_field_map(fixture_model)
    f = fmap.get("dataset_header.datatype.exponent_bias")
    assert len(f) == 4 and f.role == FP_PROPERTY
    assert f.start == fixture_model.datatype_offset + BIAS
    assert fmap.at(f.start + 3) is f


def test_field_map_mostly_reserved(fixture_model):
    roles = build_field_map(fixture_model).bytes_by_role()
    assert roles[RESERVED] / sum(roles.values()) >= 0.5


# -- sweep -------------------------------------------------------------------

def test_sweep_on_fixture(fixture_bytes):
    fn = make_halo_classifier(fixture_bytes, min_cells=FIXTURE_MIN_CELLS)
    records = sweep_metadata(fixture_bytes, fn)
    size = parse_file(fixture_bytes).metadata_size
    assert [r.offset for r in records] == list(range(size))
    assert all(r.outcome is OutcomeClass.BENIGN for r in records if r.role == RESERVED)
    assert all(r.outcome is OutcomeClass.CRASH for r in records
               if r.role in ("signature", "version"))
    summary = summarize(records)
    assert sum(c["count"] for c in summary["classes"].values()) == size
    assert records_csv(records).count("\n") == size + 1


def test_sweep_per_bit_and_crashing_classifier(fixture_bytes):
    def boom(data):
        raise RuntimeError("analysis died")
    records = sweep_metadata(fixture_bytes[:], boom, per_bit=True)
    assert len(records) == 8 * parse_file(fixture_bytes).metadata_size
    assert {r.outcome for r in records} == {OutcomeClass.CRASH}


# -- diagnosis and repair ------------------------------------------------------

def test_exponent_bias_single_precision_example():
    p = replace(FloatingPointProperty.ieee_single(), exponent_bias=0x73)
    assert correct_exponent_bias(p, 4096.0).exponent_bias == 0x7F
    q = FloatingPointProperty.ieee_single()
    assert correct_exponent_bias(q, 1.0) == q
    with pytest.raises(PreconditionError):
        correct_exponent_bias(q, 3.0)


def test_exponent_bias_low_average_decode_oracle(fixture_grid):
    data = write_dataset(normalize_to_unit_mean(fixture_grid.astype(np.float32)), "f32")
    m = parse_file(data)
    bad = with_bias(data, m, 0x81)
    avg = exact_mean(read_dataset(bad))
    assert avg == 0.25
    fixed_prop = correct_exponent_bias(parse_file(bad).datatype, avg)
    assert fixed_prop.exponent_bias == 0x7F
    fixed = patch_datatype(bad, parse_file(bad), fixed_prop)
    assert exact_mean(read_dataset(fixed)) == 1.0


def test_exponent_bias_4096_f64(fixture_bytes, fixture_model):
    bad = with_bias(fixture_bytes, fixture_model, 0x3F3)
    model, d = diagnose_bytes(bad)
    assert d.average == 4096.0
    assert d.kind is DiagnosisKind.EXPONENT_BIAS and d.detail["log2"] == 12
    r = repair(bad)
    assert r.data == fixture_bytes and r.after.kind is DiagnosisKind.CLEAN


@pytest.mark.parametrize("precision,field,value,expect", [
    ("f32", MAN_SIZE, 21, ("mantissa_size", 23)),
    ("f32", EXP_LOC, 25, ("exponent_location", 23)),
    ("f64", EXP_SIZE, 13, ("exponent_size", 11)),
    ("f64", EXP_LOC, 50, ("exponent_location", 52)),
    ("f64", MAN_SIZE, 50, ("mantissa_size", 52)),
    ("f64", MAN_LOC, 3, ("mantissa_location", 0)),
])
def test_fp_layout_repair(fixture_grid, precision, field, value, expect):
    dt = np.float32 if precision == "f32" else np.float64
    g = normalize_to_unit_mean(fixture_grid.astype(dt))
    data = write_dataset(g, precision)
    m = parse_file(data)
    bad = with_datatype_byte(data, m, field, value)
    model, d = diagnose_bytes(bad)
    assert d.kind is DiagnosisKind.FP_LAYOUT
    prop = correct_fp_layout(model.datatype, 8 * model.datatype.size)
    assert getattr(prop, expect[0]) == expect[1]
    fixed = patch_datatype(bad, model, prop)
    assert fixed == data
    assert read_dataset(fixed).tobytes() == g.tobytes()


def test_fp_layout_unrepairable():
    p = replace(FloatingPointProperty.ieee_single(), exponent_location=20, exponent_size=5)
    with pytest.raises(Unrepairable):
        correct_fp_layout(p, 32)


def test_ard_shift(fixture_bytes, fixture_model, fixture_grid):
    bad = patch_layout(fixture_bytes, replace(
        fixture_model, layout=replace(fixture_model.layout,
                                      address=fixture_model.layout.address + 64)))
    grid = read_dataset(bad)
    # shifted by 8 cells; the tail reads past the end of file as zeros
    assert np.array_equal(grid.ravel()[:-8], fixture_grid.ravel()[8:])
    model, d = diagnose_bytes(bad)
    assert d.kind is DiagnosisKind.ARD
    assert abs(d.average - 1) < 0.01
    fixed = patch_layout(bad, correct_ard(model))
    assert fixed == fixture_bytes
    assert diagnose_bytes(fixed)[1].kind is DiagnosisKind.CLEAN
    assert correct_ard(fixture_model) == fixture_model


def test_clean_fixture(fixture_bytes):
    r = repair(fixture_bytes)
    assert r.before.kind is DiagnosisKind.CLEAN and not r.actions and r.data == fixture_bytes


def test_mantissa_normalization_is_unknown(fixture_bytes, fixture_model):
    # byte 1 of the datatype holds the normalization bits 4-5 (2 -> 0)
    b = bytearray(fixture_bytes)
    b[fixture_model.datatype_offset + 1] &= ~0x30
    model, d = diagnose_bytes(bytes(b))
    assert d.kind is DiagnosisKind.UNKNOWN


@pytest.mark.parametrize("name,mutate", [
    ("exponent_bias", lambda p: replace(p, exponent_bias=p.exponent_bias + 3)),
    ("exponent_location", lambda p: replace(p, exponent_location=p.exponent_location - 2)),
    ("mantissa_location", lambda p: replace(p, mantissa_location=4)),
    ("mantissa_size", lambda p: replace(p, mantissa_size=p.mantissa_size - 5)),
    ("exponent_size", lambda p: replace(p, exponent_size=p.exponent_size + 2)),
])
def test_diagnosis_never_clean_on_single_field_faults(fixture_bytes, fixture_model, name,
                                                      mutate):
    bad = patch_datatype(fixture_bytes, fixture_model, mutate(fixture_model.datatype))
    d = diagnose_bytes(bad)[1]
    assert d.kind is not DiagnosisKind.CLEAN
    want = DiagnosisKind.EXPONENT_BIAS if name == "exponent_bias" else DiagnosisKind.FP_LAYOUT
    assert d.kind is want
    assert repair(bad).data == fixture_bytes


def test_diagnose_order_ard_wins(fixture_model):
    shifted = replace(fixture_model, layout=replace(fixture_model.layout, address=1312))
    assert diagnose(shifted, 4096.0).kind is DiagnosisKind.ARD
    assert diagnose(fixture_model, 1.0 + 1e-13).kind is DiagnosisKind.CLEAN
    assert diagnose(fixture_model, 1.3).kind is DiagnosisKind.UNKNOWN


@given(st.integers(0x3F0, 0x40F))
def test_repair_idempotent(bias):
    p = replace(FloatingPointProperty.ieee_double(), exponent_bias=bias)
    # a bias raised by d divides every value, and so the mean, by 2**d
    once = correct_exponent_bias(p, 2.0 ** (0x3FF - bias))
    assert once == FloatingPointProperty.ieee_double()
    assert correct_exponent_bias(once, 1.0) == once
    assert correct_fp_layout(once, 64) == once


@settings(max_examples=40, deadline=None)
@given(st.integers(-20, 20))
def test_bias_fault_scales_values_exactly(fixture_bytes, fixture_model, fixture_grid, delta):
    bad = with_bias(fixture_bytes, fixture_model, 0x3FF + delta)
    grid = read_dataset(bad)
    assert np.array_equal(grid, np.ldexp(fixture_grid, -delta))
    halos = halo_finder(grid, min_cells=FIXTURE_MIN_CELLS)
    gold = halo_finder(fixture_grid, min_cells=FIXTURE_MIN_CELLS)
    assert [h.cells for h in halos] == [h.cells for h in gold]
    assert [h.centroid for h in halos] == [h.centroid for h in gold]
    assert [h.mass for h in halos] == [math.ldexp(h.mass, -delta) for h in gold]
