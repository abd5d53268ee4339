"""Acceptance criteria, one test each, printing a PASS/FAIL line per criterion.

    pytest tests/test_acceptance.py -v -s
"""
import math
import os
import stat
import statistics
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from faultfs.campaign import (CampaignConfig, confidence_interval, generate_signature,
                              pick_target, run_campaign, target_rng, toy_config)
from faultfs.classify import OutcomeClass
from faultfs.faultmodel import (FaultKind, FaultModel, FaultSignature, WriteOp, apply_bit_flip,
                                apply_shorn_write, shorn_extent)
from faultfs.hdf5meta.fieldmap import RESERVED
from faultfs.hdf5meta.parser import parse_file, read_dataset
from faultfs.hdf5meta.repair import (DiagnosisKind, correct_ard, correct_fp_layout,
                                     diagnose_bytes, patch_datatype, patch_layout, repair)
from faultfs.hdf5meta.sweep import summarize, sweep_metadata
from faultfs.hdf5meta.writer import write_dataset
from faultfs.interpose import InjectionController, Session
from faultfs.toy import halo_finder, make_halo_classifier

from conftest import FIXTURE_MIN_CELLS, bfs_halos

DATATYPE_BIAS, DATATYPE_EXP_LOC, DATATYPE_EXP_SIZE, DATATYPE_MAN_SIZE = 16, 12, 13, 15


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {name}: {detail}")
        assert ok, f"criterion {name}: {detail}"
    return emit


def with_datatype(data, model, offset, fmt_value):
    b = bytearray(data)
    if offset == DATATYPE_BIAS:
        b[model.datatype_offset + offset:model.datatype_offset + offset + 4] = \
            fmt_value.to_bytes(4, "little")
    else:
        b[model.datatype_offset + offset] = fmt_value
    return bytes(b)


# -- 1. fault-model fidelity -----------------------------------------------------

def test_c1_fault_model_fidelity(tmp_path, verdict):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    failures = {"involution": 0, "shorn_prefix": 0, "dropped_store": 0}
    for _ in range(1000):
        payload = rng.bytes(int(rng.integers(1, 512)))
        n = int(rng.integers(1, min(64, 8 * len(payload)) + 1))
        start = int(rng.integers(0, 8 * len(payload) - n + 1))
        op = WriteOp("/f", 0, payload)
        once = apply_bit_flip(op, start, n).effective_payload
        twice = apply_bit_flip(WriteOp("/f", 0, once), start, n).effective_payload
        diff = int.from_bytes(once, "little") ^ int.from_bytes(payload, "little")
        failures["involution"] += twice != payload or diff != ((1 << n) - 1) << start
    for _ in range(1000):
        payload = rng.bytes(int(rng.integers(1, 3 * 4096)))
        m = FaultModel(FaultKind.SHORN_WRITE, shorn_keep_eighths=int(rng.integers(1, 8)))
        block = int(rng.integers(0, (len(payload) - 1) // 4096 + 1))
        keep_end, end, _ = shorn_extent(len(payload), m, block)
        out = apply_shorn_write(WriteOp("/f", 0, payload), m, int(rng.integers(2**32)), block)
        failures["shorn_prefix"] += (out.effective_payload[:keep_end] != payload[:keep_end]
                                     or out.effective_payload[end:] != payload[end:]
                                     or out.reported_size != len(payload))
    backing = tmp_path / "f"
    sig = FaultSignature(FaultModel(FaultKind.DROPPED_WRITE), "write", 0)
    for _ in range(1000):
        before = rng.bytes(int(rng.integers(0, 256)))
        backing.write_bytes(before)
        data = rng.bytes(int(rng.integers(1, 256)))
        offset = int(rng.integers(0, 300))
        fs = Session(tmp_path, InjectionController(sig, 0))
        fh = fs.open("/f", os.O_WRONLY)
        reported = fs.write("/f", data, offset, fh)
        fs.release("/f", fh)
        failures["dropped_store"] += reported != len(data) or backing.read_bytes() != before
    elapsed = time.perf_counter() - t0
    ok = not any(failures.values()) and elapsed < 10
    verdict(1, ok, f"3x1000 cases, failures={failures}, {elapsed:.2f}s (< 10s)")


# -- 2. transparency -------------------------------------------------------------

def random_program(rng):
    names = [f"/f{i}" for i in range(int(rng.integers(1, 4)))]
    prog = [("create", n, 0o600 | int(rng.integers(0, 0o100))) for n in names]
    for _ in range(int(rng.integers(5, 40))):
        n = names[int(rng.integers(len(names)))]
        kind = rng.choice(["write", "write", "truncate", "chmod"])
        if kind == "write":
            prog.append(("write", n, int(rng.integers(0, 9000)),
                         rng.bytes(int(rng.integers(1, 5000)))))
        elif kind == "truncate":
            prog.append(("truncate", n, int(rng.integers(0, 12000))))
        else:
            prog.append(("chmod", n, 0o400 | int(rng.integers(0, 0o400))))
    return prog


def run_via_session(root, prog):
    fs = Session(root)
    fhs = {}
    for step in prog:
        kind, name = step[0], step[1]
        if kind == "create":
            fhs[name] = fs.create(name, step[2])
        elif kind == "write":
            assert fs.write(name, step[3], step[2], fhs[name]) == len(step[3])
        elif kind == "truncate":
            fs.truncate(name, step[2], fhs[name])
        else:
            fs.chmod(name, step[2])
    for name, fh in fhs.items():
        fs.release(name, fh)


def run_direct(root, prog):
    fds = {}
    for step in prog:
        kind, path = step[0], os.path.join(root, step[1].lstrip("/"))
        if kind == "create":
            fds[path] = os.open(path, os.O_RDWR | os.O_CREAT | os.O_TRUNC, step[2])
        elif kind == "write":
            os.pwrite(fds[path], step[3], step[2])
        elif kind == "truncate":
            os.ftruncate(fds[path], step[2])
        else:
            os.chmod(path, step[2])
    for fd in fds.values():
        os.close(fd)


def snapshot(root):
    out = {}
    for name in sorted(os.listdir(root)):
        p = os.path.join(root, name)
        with open(p, "rb") as fh:
            out[name] = (stat.S_IMODE(os.stat(p).st_mode), fh.read())
    return out


def test_c2_transparency(tmp_path, verdict):
    rng = np.random.default_rng(2)
    mismatches = 0
    for i in range(50):
        prog = random_program(rng)
        a, b = tmp_path / f"s{i}", tmp_path / f"d{i}"
        a.mkdir()
        b.mkdir()
        run_via_session(a, prog)
        run_direct(b, prog)
        mismatches += snapshot(a) != snapshot(b)
    verdict(2, mismatches == 0, f"50 random workloads, {mismatches} trees differ")


# -- 3. injector uniformity ---------------------------------------------------------

def test_c3_injector_uniformity(verdict):
    cfg = CampaignConfig.from_dict(toy_config(n_runs=1, seed=3))
    counts = np.zeros(10, dtype=int)
    for run_id in range(100_000):
        counts[pick_target(10, target_rng(generate_signature(cfg, run_id)))] += 1
    p = stats.chisquare(counts).pvalue
    verdict(3, p > 0.001, f"100k targets over count=10, chi2 p={p:.4f} (> 0.001), "
                          f"counts {counts.min()}..{counts.max()}")


# -- 4. confidence intervals ----------------------------------------------------------

def test_c4_confidence_intervals(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for k in (0, 2, 20, 500):
        lo, hi = confidence_interval(k, 1000)
        # Clopper-Pearson through the beta quantiles
        clo = 0.0 if k == 0 else stats.beta.ppf(0.025, k, 1000 - k + 1)
        chi = 1.0 if k == 1000 else stats.beta.ppf(0.975, k + 1, 1000 - k)
        worst = max(worst, abs(lo - clo), abs(hi - chi))
    half = [(hi - lo) / 2 for lo, hi in (confidence_interval(k, 1000) for k in range(1, 151))]
    mean_half = statistics.mean(half)
    elapsed = time.perf_counter() - t0
    ok = worst < 0.005 and 0.01 <= mean_half <= 0.02 and elapsed < 1
    verdict(4, ok, f"max |Wilson - CP| = {100 * worst:.3f} pp (< 0.5), mean half-width "
                   f"for rates <= 15% at n=1000 = {100 * mean_half:.2f}% (1-2%), "
                   f"{elapsed:.3f}s")


# -- 5. HDF5 round trip -------------------------------------------------------------------

def test_c5_hdf5_roundtrip(tmp_path, verdict):
    rng = np.random.default_rng(5)
    bad = 0
    samples = []
    for i in range(200):
        dims = tuple(int(d) for d in rng.integers(1, 17, int(rng.integers(1, 4))))
        precision = "f32" if i % 2 else "f64"
        g = rng.lognormal(0, 1, dims).astype(np.float32 if i % 2 else np.float64)
        data = write_dataset(g, precision)
        out = read_dataset(data, parse_file(data))
        bad += out.shape != g.shape or out.tobytes() != g.tobytes()
        if i < 4:
            samples.append((g, data))
    external = "h5py not installed"
    try:
        import h5py
    except ImportError:
        pass
    else:
        agree = 0
        for j, (g, data) in enumerate(samples):
            p = tmp_path / f"x{j}.h5"
            p.write_bytes(data)
            with h5py.File(p, "r") as f:
                agree += np.array_equal(f["density"][()], g)
        external = f"h5py reads {agree}/{len(samples)}"
    verdict(5, bad == 0, f"200 grids, {bad} mismatches; optional external check: {external}")


# -- 6. repair suite ----------------------------------------------------------------------

def test_c6a_exponent_bias(fixture_bytes, fixture_model, verdict):
    t0 = time.perf_counter()
    bad = with_datatype(fixture_bytes, fixture_model, DATATYPE_BIAS, 0x3F3)
    model, d = diagnose_bytes(bad)
    r = repair(bad)
    fixed_mean = diagnose_bytes(r.data)[1].average
    elapsed = time.perf_counter() - t0
    ok = (d.average == 4096.0 and d.kind is DiagnosisKind.EXPONENT_BIAS
          and parse_file(r.data).datatype.exponent_bias == 0x3FF and fixed_mean == 1.0
          and r.data == fixture_bytes and elapsed < 1)
    verdict("6a", ok, f"bias 0x3F3: mean {d.average}, {d.kind.value}; repaired mean "
                      f"{fixed_mean}, {elapsed:.3f}s")


def test_c6b_fp_layout(fixture_bytes, fixture_model, fixture_grid, verdict):
    t0 = time.perf_counter()
    results = []
    for name, offset, value in (("mantissa_size", DATATYPE_MAN_SIZE, 50),
                                ("exponent_location", DATATYPE_EXP_LOC, 50),
                                ("exponent_size", DATATYPE_EXP_SIZE, 13)):
        bad = with_datatype(fixture_bytes, fixture_model, offset, value)
        model, d = diagnose_bytes(bad)
        prop = correct_fp_layout(model.datatype, 8 * model.datatype.size)
        fixed = patch_datatype(bad, model, prop)
        ok = (d.kind is DiagnosisKind.FP_LAYOUT
              and prop.exponent_location == prop.mantissa_size
              and prop.mantissa_size + prop.exponent_size == 63
              and read_dataset(fixed).tobytes() == fixture_grid.tobytes())
        results.append(f"{name}={value}:{'ok' if ok else 'bad'}")
    elapsed = time.perf_counter() - t0
    verdict("6b", all(r.endswith("ok") for r in results) and elapsed < 1,
            f"{', '.join(results)}, {elapsed:.3f}s")


def test_c6c_ard_shift(fixture_bytes, fixture_model, fixture_grid, verdict):
    t0 = time.perf_counter()
    shifted = replace(fixture_model, layout=replace(fixture_model.layout,
                                                    address=fixture_model.layout.address + 64))
    bad = patch_layout(fixture_bytes, shifted)
    model, d = diagnose_bytes(bad)
    gold = halo_finder(fixture_grid, min_cells=FIXTURE_MIN_CELLS)
    got = halo_finder(read_dataset(bad), min_cells=FIXTURE_MIN_CELLS)
    moved = [h.centroid for h in got] != [h.centroid for h in gold]
    masses = sorted(h.mass for h in got) == sorted(h.mass for h in gold)
    fixed = patch_layout(bad, correct_ard(model))
    elapsed = time.perf_counter() - t0
    ok = (d.kind is DiagnosisKind.ARD and moved and masses and abs(d.average - 1) < 0.01
          and fixed == fixture_bytes and elapsed < 1)
    verdict("6c", ok, f"ARD+64: {d.kind.value}, halos moved={moved}, masses equal={masses}, "
                      f"mean {d.average:.4f}, bitwise restore={fixed == fixture_bytes}, "
                      f"{elapsed:.3f}s")


def test_c6d_bias_scaling_keeps_halos(fixture_bytes, fixture_model, fixture_grid, verdict):
    t0 = time.perf_counter()
    gold = halo_finder(fixture_grid, min_cells=FIXTURE_MIN_CELLS)
    bad_deltas = []
    for delta in (-12, -3, 1, 5, 12):
        data = with_datatype(fixture_bytes, fixture_model, DATATYPE_BIAS, 0x3FF + delta)
        got = halo_finder(read_dataset(data), min_cells=FIXTURE_MIN_CELLS)
        if ([h.cells for h in got] != [h.cells for h in gold]
                or [h.centroid for h in got] != [h.centroid for h in gold]
                or [h.mass for h in got] != [math.ldexp(h.mass, -delta) for h in gold]):
            bad_deltas.append(delta)
    elapsed = time.perf_counter() - t0
    verdict("6d", not bad_deltas and gold and elapsed < 1,
            f"{len(gold)} halos, bias deltas failing: {bad_deltas}, {elapsed:.3f}s")


# -- 7. metadata sweep ----------------------------------------------------------------------

def test_c7_metadata_sweep(fixture_bytes, verdict):
    records = sweep_metadata(fixture_bytes, make_halo_classifier(fixture_bytes,
                                                                 min_cells=FIXTURE_MIN_CELLS))
    size = parse_file(fixture_bytes).metadata_size
    every_byte = [r.offset for r in records] == list(range(size))
    sig_crash = all(r.outcome is OutcomeClass.CRASH for r in records
                    if r.role in ("signature", "version"))
    reserved_benign = all(r.outcome is OutcomeClass.BENIGN for r in records
                          if r.role == RESERVED)
    summary = summarize(records)
    partition = sum(c["count"] for c in summary["classes"].values()) == size
    shape = ", ".join(f"{k} {100 * v['rate']:.1f}%" for k, v in summary["classes"].items())
    verdict(7, every_byte and sig_crash and reserved_benign and partition,
            f"{size} bytes: {shape}")


# -- 8. end-to-end campaigns ----------------------------------------------------------------

@pytest.mark.slow
def test_c8_campaigns(tmp_path, verdict):
    t0 = time.perf_counter()
    results = {}
    for model in ("DroppedWrite", "BitFlip"):
        cfg = CampaignConfig.from_dict(toy_config(model, n_runs=200, parallelism=4))
        results[model] = run_campaign(cfg, tmp_path / model)
        results[model + "-rerun"] = run_campaign(cfg, tmp_path / (model + "-rerun"))
    elapsed = time.perf_counter() - t0

    dropped, flipped = results["DroppedWrite"], results["BitFlip"]
    ard = 1248  # metadata size of a rank-3 dataset
    data_hits = [r for r in dropped.records if r.fault["args"]["offset"] >= ard]
    benign_hits = sum(r.outcome is OutcomeClass.BENIGN for r in data_hits)
    flagged = [r for r in data_hits if r.outcome is not OutcomeClass.BENIGN]
    detected = sum(
        (r.observations.get("summary.json") or {}).get("verdict") == "Suspect"
        and r.observations["summary.json"]["mean"] <= 1 - 0.001
        for r in flagged)
    b = OutcomeClass.BENIGN
    s = OutcomeClass.SDC
    ordering = flipped.rate(b) > dropped.rate(b) and flipped.rate(s) < dropped.rate(s)
    repro = all(results[m].counts == results[m + "-rerun"].counts
                for m in ("DroppedWrite", "BitFlip"))

    def fmt(res):
        return " ".join(f"{c.value}={res.counts[c]}" for c in OutcomeClass)

    verdict("8a", benign_hits == 0 and flagged and detected == len(flagged),
            f"DroppedWrite: {len(data_hits)} data-region hits, {benign_hits} benign, "
            f"detector flags {detected}/{len(flagged)} with mean drop >= 0.1%")
    verdict("8b", ordering, f"BitFlip [{fmt(flipped)}] vs DroppedWrite [{fmt(dropped)}]")
    verdict("8c", repro and elapsed < 600,
            f"reruns identical={repro}, 4x200 runs in {elapsed:.1f}s (< 600s)")


# -- 9. halo finder oracle --------------------------------------------------------------------

def test_c9_halo_finder_oracle(verdict):
    rng = np.random.default_rng(9)
    mismatches = 0
    nonempty = 0
    for _ in range(500):
        dims = tuple(int(d) for d in rng.integers(1, 17, 3))
        min_cells = int(rng.integers(1, 5))
        # half the grids use the production threshold (sparse spikes), half a low one
        if rng.random() < 0.5:
            factor, frac = 81.66, float(rng.uniform(0.001, 0.012))
        else:
            factor, frac = float(rng.uniform(1.2, 4)), float(rng.uniform(0.02, 0.3))
        g = rng.lognormal(0, 1, dims)
        g[rng.random(dims) < frac] *= 500
        got = sorted(h.cells for h in halo_finder(g, factor, min_cells))
        want = bfs_halos(g, factor, min_cells)
        mismatches += got != want
        nonempty += bool(want)
    verdict(9, mismatches == 0, f"500 grids ({nonempty} with halos), {mismatches} mismatches")
