"""Synthetic density-grid workload standing in for a cosmology post-analysis.

``write`` generates a grid whose mean is exactly 1 and stores it as an HDF5
file through the interposition session (if one is attached). ``analyze``
reads the file back, finds halos and runs the average-value detector,
emitting ``catalog.csv`` and ``summary.json``.

    python3 -m faultfs.toy write --dims 32 32 32 --seed 7 --halos 4 --out run/
    python3 -m faultfs.toy analyze --input run/density.h5 --out run/
"""
from __future__ import annotations

import argparse
import enum
import io
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._numeric import exact_mean, normalize_to_unit_mean
from .classify import OutcomeClass
from .errors import ConfigError
from .hdf5meta.parser import parse_file, read_dataset
from .hdf5meta.writer import PRECISIONS, write_dataset
from .interpose import attach, session_path

THRESHOLD_FACTOR = 81.66
MIN_CELLS = 8
DETECT_REL_TOL = 0.001
BACKGROUND_CLAMP = 10.0  # background cells never exceed this multiple of the base
DATA_FILE = "density.h5"
CATALOG_FILE = "catalog.csv"
SUMMARY_FILE = "summary.json"

_NEIGHBOURS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


@dataclass(frozen=True)
class HaloSpec:
    """``count`` clusters of ``cells`` face-connected cells at ``amplitude`` x base.

    ``spread`` jitters each cell's amplitude by a relative ``U(-spread, spread)``.
    ``skirt`` extra cells per cluster are set just under the halo threshold
    (``skirt_level`` of it), so any drop of the grid mean pulls them in.
    """
    count: int = 0
    cells: int = 10
    amplitude: float = 200.0
    spread: float = 0.0
    skirt: int = 0
    skirt_level: float = 0.995

    def __post_init__(self):
        if self.count < 0 or self.cells < 1 or self.skirt < 0:
            raise ConfigError(f"invalid halo spec {self}")
        if not 0 <= self.spread < 1 or self.amplitude <= 0 or not 0 < self.skirt_level < 1:
            raise ConfigError(f"invalid halo spec {self}")


def _grow_cluster(rng: np.random.Generator, dims: tuple[int, ...], size: int,
                  taken: set) -> list[tuple[int, ...]] | None:
    start = tuple(int(rng.integers(d)) for d in dims)
    if start in taken:
        return None
    cluster = [start]
    members = {start}
    for _ in range(50 * size):
        if len(cluster) == size:
            return cluster
        base = cluster[int(rng.integers(len(cluster)))]
        step = _NEIGHBOURS[int(rng.integers(len(_NEIGHBOURS)))][:len(dims)]
        cell = tuple(b + s for b, s in zip(base, step))
        if cell in members or cell in taken or not all(0 <= c < d for c, d in zip(cell, dims)):
            continue
        cluster.append(cell)
        members.add(cell)
    return cluster if len(cluster) == size else None


def _halo_of(cells, dims) -> set:
    """Cells plus their face neighbours, so clusters never touch."""
    out = set()
    for cell in cells:
        out.add(cell)
        for step in _NEIGHBOURS[:2 * len(dims)]:
            out.add(tuple(c + s for c, s in zip(cell, step[:len(dims)])))
    return out


def generate_grid(dims, seed: int, halos: HaloSpec | None = None, sigma: float = 0.5,
                  precision: str = "f64", threshold_factor: float = THRESHOLD_FACTOR
                  ) -> np.ndarray:
    dims = tuple(int(d) for d in dims)
    if not dims or min(dims) < 1:
        raise ConfigError(f"grid dims must all be >= 1, got {dims}")
    dtype = PRECISIONS.get(precision)
    if dtype is None:
        raise ConfigError(f"unsupported precision {precision!r}")
    halos = halos or HaloSpec()
    n = math.prod(dims)
    per = halos.cells + halos.skirt
    if halos.count and (per > n or 4 * halos.count * per > n):
        raise ConfigError(f"{halos.count} clusters of {per} cells do not fit in {dims}")

    rng = np.random.default_rng(seed)
    grid = np.minimum(rng.lognormal(0.0, sigma, dims), BACKGROUND_CLAMP)
    taken: set = set()
    cores, skirts = [], []
    for _ in range(halos.count):
        for _attempt in range(200):
            cluster = _grow_cluster(rng, dims, per, taken)
            if cluster is not None:
                break
        else:
            raise ConfigError(f"could not place {halos.count} separate clusters in {dims}")
        taken |= _halo_of(cluster, dims)
        cores.extend(cluster[:halos.cells])
        skirts.extend(cluster[halos.cells:])
    for cell in cores:
        grid[cell] = halos.amplitude * (1 + halos.spread * rng.uniform(-1, 1))
    if skirts:
        # solve s = level * factor * mean with the skirt cells included in the mean
        for cell in skirts:
            grid[cell] = 0.0
        level = halos.skirt_level * threshold_factor
        s = level * math.fsum(grid.ravel().tolist()) / (n - level * len(skirts))
        for cell in skirts:
            grid[cell] = s
    return normalize_to_unit_mean(grid.astype(dtype))


@dataclass(frozen=True)
class Halo:
    cells: tuple[tuple[int, ...], ...]
    mass: float
    centroid: tuple[float, ...]

    @property
    def n_cells(self) -> int:
        return len(self.cells)


def halo_finder(grid: np.ndarray, threshold_factor: float = THRESHOLD_FACTOR,
                min_cells: int = MIN_CELLS) -> list[Halo]:
    """Face-connected components of cells above ``threshold_factor * mean``."""
    grid = np.asarray(grid)
    threshold = threshold_factor * exact_mean(grid)
    with np.errstate(invalid="ignore"):
        candidates = grid > threshold
    structure = ndimage.generate_binary_structure(grid.ndim, 1)
    labels, n = ndimage.label(candidates, structure=structure)
    halos = []
    for sl, lab in zip(ndimage.find_objects(labels), range(1, n + 1)):
        local = np.argwhere(labels[sl] == lab)
        if len(local) < min_cells:
            continue
        idx = local + np.array([s.start for s in sl])
        cells = tuple(sorted(tuple(int(v) for v in row) for row in idx))
        mass = math.fsum(float(grid[c]) for c in cells)
        centroid = tuple(math.fsum(c[d] for c in cells) / len(cells) for d in range(grid.ndim))
        halos.append(Halo(cells, mass, centroid))
    halos.sort(key=lambda h: (-h.mass, h.centroid))
    return halos


class Verdict(str, enum.Enum):
    CLEAN = "Clean"
    SUSPECT = "Suspect"


def average_value_detect(grid, rel_tol: float = DETECT_REL_TOL) -> Verdict:
    mean = exact_mean(grid)
    if not math.isfinite(mean) or abs(mean - 1.0) >= rel_tol:
        return Verdict.SUSPECT
    return Verdict.CLEAN


def catalog_csv(halos: list[Halo]) -> bytes:
    buf = io.StringIO()
    buf.write("id,n_cells,mass,cx,cy,cz\n")
    for i, h in enumerate(halos):
        c = tuple(h.centroid) + (0.0,) * (3 - len(h.centroid))
        buf.write(f"{i},{h.n_cells},{h.mass!r},{c[0]!r},{c[1]!r},{c[2]!r}\n")
    return buf.getvalue().encode()


def summary_json(grid, halos: list[Halo], rel_tol: float = DETECT_REL_TOL) -> bytes:
    mean = exact_mean(grid)
    doc = {"mean": mean if math.isfinite(mean) else str(mean), "n_halos": len(halos),
           "verdict": average_value_detect(grid, rel_tol).value}
    return (json.dumps(doc, sort_keys=True) + "\n").encode()


def analyze_bytes(data: bytes, threshold_factor: float = THRESHOLD_FACTOR,
                  min_cells: int = MIN_CELLS, rel_tol: float = DETECT_REL_TOL
                  ) -> tuple[bytes, bytes]:
    """``(catalog, summary)`` for an HDF5 image; format errors propagate."""
    grid = read_dataset(data, parse_file(data))
    halos = halo_finder(grid, threshold_factor, min_cells)
    return catalog_csv(halos), summary_json(grid, halos, rel_tol)


class HaloClassifier:
    """Classifier for byte-level sweeps: crash on any read error, benign when
    the catalog is bitwise golden, detected when no halo survives, else SDC.

    A plain class rather than a closure so sweeps can ship it to worker
    processes.
    """

    def __init__(self, golden: bytes, threshold_factor: float = THRESHOLD_FACTOR,
                 min_cells: int = MIN_CELLS):
        self.threshold_factor = threshold_factor
        self.min_cells = min_cells
        self.golden_catalog = analyze_bytes(golden, threshold_factor, min_cells)[0]

    def __call__(self, data: bytes) -> OutcomeClass:
        try:
            catalog, summary = analyze_bytes(data, self.threshold_factor, self.min_cells)
        except Exception:
            return OutcomeClass.CRASH
        if catalog == self.golden_catalog:
            return OutcomeClass.BENIGN
        if json.loads(summary)["n_halos"] == 0:
            return OutcomeClass.DETECTED
        return OutcomeClass.SDC


make_halo_classifier = HaloClassifier


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="python -m faultfs.toy")
    sub = p.add_subparsers(dest="cmd", required=True)
    w = sub.add_parser("write", help="generate a grid and write it as HDF5")
    w.add_argument("--dims", type=int, nargs="+", default=[32, 32, 32])
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--halos", type=int, default=4, help="number of planted clusters")
    w.add_argument("--halo-cells", type=int, default=12)
    w.add_argument("--halo-amplitude", type=float, default=300.0)
    w.add_argument("--halo-spread", type=float, default=0.5)
    w.add_argument("--halo-skirt", type=int, default=2)
    w.add_argument("--precision", choices=sorted(PRECISIONS), default="f64")
    w.add_argument("--out", default=".")
    a = sub.add_parser("analyze", help="find halos and run the average-value detector")
    a.add_argument("--input", required=True)
    a.add_argument("--out", default=".")
    a.add_argument("--threshold", type=float, default=THRESHOLD_FACTOR)
    a.add_argument("--min-cells", type=int, default=MIN_CELLS)
    a.add_argument("--rel-tol", type=float, default=DETECT_REL_TOL)
    return p


def write_main(args: argparse.Namespace) -> int:
    spec = HaloSpec(args.halos, args.halo_cells, args.halo_amplitude, args.halo_spread,
                    args.halo_skirt)
    grid = generate_grid(args.dims, args.seed, spec, precision=args.precision)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with attach(out) as fs:
        write_dataset(grid, args.precision, session_path(fs, out / DATA_FILE), fs=fs)
    return 0


def analyze_main(args: argparse.Namespace) -> int:
    try:
        data = Path(args.input).read_bytes()
        catalog, summary = analyze_bytes(data, args.threshold, args.min_cells, args.rel_tol)
    except Exception as exc:
        print(f"analyze: cannot read {args.input}: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / CATALOG_FILE).write_bytes(catalog)
    (out / SUMMARY_FILE).write_bytes(summary)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    return write_main(args) if args.cmd == "write" else analyze_main(args)


if __name__ == "__main__":
    sys.exit(main())
