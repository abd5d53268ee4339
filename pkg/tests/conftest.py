import math
from collections import deque
from pathlib import Path

import numpy as np
import pytest

from faultfs.hdf5meta.parser import parse_file
from faultfs.hdf5meta.writer import write_dataset
from faultfs.toy import HaloSpec, generate_grid

# 8^3 cannot hold 8 cells above 81.66x the mean, so the small fixture uses
# two 2-cell halos and min_cells=2.
FIXTURE_MIN_CELLS = 2

# small cooperating workloads used by the campaign and CLI tests
WORKLOADS = Path(__file__).parent / "workloads"


@pytest.fixture(scope="session")
def fixture_grid() -> np.ndarray:
    return generate_grid((8, 8, 8), 1, HaloSpec(count=2, cells=2, amplitude=4000.0))


@pytest.fixture(scope="session")
def fixture_bytes(fixture_grid) -> bytes:
    return write_dataset(fixture_grid, "f64")


@pytest.fixture(scope="session")
def fixture_model(fixture_bytes):
    return parse_file(fixture_bytes)


def bfs_halos(grid, factor=81.66, min_cells=8):
    """Exhaustive connected components over face neighbours, no scipy."""
    g = np.asarray(grid, dtype=np.float64)
    thr = factor * (math.fsum(g.ravel().tolist()) / g.size)
    cand = {tuple(int(i) for i in idx) for idx in zip(*np.nonzero(g > thr))}
    seen, comps = set(), []
    for start in sorted(cand):
        if start in seen:
            continue
        comp, queue = [], deque([start])
        seen.add(start)
        while queue:
            c = queue.popleft()
            comp.append(c)
            for d in range(g.ndim):
                for s in (-1, 1):
                    n = c[:d] + (c[d] + s,) + c[d + 1:]
                    if n in cand and n not in seen:
                        seen.add(n)
                        queue.append(n)
        if len(comp) >= min_cells:
            comps.append(tuple(sorted(comp)))
    return sorted(comps)
