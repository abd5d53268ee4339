"""Flip metadata bits one at a time and classify what the analysis makes of it."""
from __future__ import annotations

import csv
import io
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable

from ..classify import OUTCOME_ORDER, OutcomeClass
from .fieldmap import FieldMap, build_field_map
from .parser import parse_file


@dataclass(frozen=True)
class SweepRecord:
    offset: int
    bit: int
    field: str
    role: str
    outcome: OutcomeClass


def _run(classify_fn, data: bytes, offset: int, bit: int) -> OutcomeClass:
    buf = bytearray(data)
    buf[offset] ^= 1 << bit
    try:
        return OutcomeClass(classify_fn(bytes(buf)))
    except Exception:
        return OutcomeClass.CRASH


def _run_batch(args) -> list[OutcomeClass]:
    classify_fn, data, points = args
    return [_run(classify_fn, data, o, b) for o, b in points]


def sweep_metadata(data: bytes, classify_fn: Callable[[bytes], OutcomeClass],
                   per_bit: bool = False, workers: int = 1,
                   fieldmap: FieldMap | None = None) -> list[SweepRecord]:
    """One record per metadata byte (bit 0 flipped), or per bit with ``per_bit``.

    ``classify_fn`` receives the corrupted image; an exception it raises is
    recorded as a crash. With ``workers > 1`` it must be picklable.
    """
    fmap = fieldmap or build_field_map(parse_file(data))
    bits = range(8) if per_bit else (0,)
    points = [(o, b) for o in range(fmap.size) for b in bits]
    if workers > 1:
        step = -(-len(points) // (4 * workers))
        batches = [(classify_fn, data, points[i:i + step]) for i in range(0, len(points), step)]
        with ProcessPoolExecutor(workers) as pool:
            outcomes = [o for part in pool.map(_run_batch, batches) for o in part]
    else:
        outcomes = [_run(classify_fn, data, o, b) for o, b in points]
    records = []
    for (offset, bit), outcome in zip(points, outcomes):
        f = fmap.at(offset)
        records.append(SweepRecord(offset, bit, f.name, f.role, outcome))
    return records


def summarize(records: list[SweepRecord]) -> dict:
    """Overall class rates plus, per class, the fields that produced it."""
    total = len(records)
    counts = Counter(r.outcome for r in records)
    fields: dict[OutcomeClass, set] = defaultdict(set)
    for r in records:
        fields[r.outcome].add(r.field)
    return {
        "total": total,
        "classes": {c.value: {"count": counts.get(c, 0),
                              "rate": counts.get(c, 0) / total if total else 0.0,
                              "fields": sorted(fields.get(c, ()))}
                    for c in OUTCOME_ORDER},
    }


def format_summary(summary: dict) -> str:
    lines = [f"{'class':<9} {'count':>6} {'rate':>8}  fields"]
    for cls, row in summary["classes"].items():
        shown = ", ".join(row["fields"][:6])
        more = len(row["fields"]) - 6
        if more > 0:
            shown += f", ... (+{more})"
        lines.append(f"{cls:<9} {row['count']:>6} {100 * row['rate']:>7.2f}%  {shown}")
    lines.append(f"{'total':<9} {summary['total']:>6}")
    return "\n".join(lines)


def records_csv(records: list[SweepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["offset", "bit", "field", "role", "class"])
    for r in records:
        w.writerow([r.offset, r.bit, r.field, r.role, r.outcome.value])
    return buf.getvalue()
