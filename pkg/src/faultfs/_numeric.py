from __future__ import annotations

import math

import numpy as np


def exact_mean(values) -> float:
    """Correctly rounded sum divided by the count.

    Order-independent, so a grid scaled by ``2**k`` has a mean of exactly
    ``2**k`` times the original.
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    try:
        return math.fsum(arr.tolist()) / arr.size
    except OverflowError:
        with np.errstate(over="ignore", invalid="ignore"):
            return float(np.sum(arr) / arr.size)


def power_of_two_exponent(x: float) -> int | None:
    """``k`` when ``x == 2**k`` exactly, else ``None``."""
    if not math.isfinite(x) or x <= 0:
        return None
    mantissa, exponent = math.frexp(x)
    return exponent - 1 if mantissa == 0.5 else None


def normalize_to_unit_mean(grid: np.ndarray, max_iter: int = 200) -> np.ndarray:
    """Rescale so that :func:`exact_mean` returns exactly 1.0.

    Division leaves a residual of a few ulps. Each pass hands the residual to
    the cell with the coarsest ulp that still fits inside it, so the residual
    shrinks geometrically down to the finest ulp in the grid.
    """
    out = np.asarray(grid / exact_mean(grid), dtype=grid.dtype).copy()
    flat = out.reshape(-1)
    kind = flat.dtype.type
    target = float(flat.size)
    for _ in range(max_iter):
        s = math.fsum(flat.astype(np.float64).tolist())
        if s == target:
            return out
        r = target - s
        step = np.spacing(np.abs(flat)).astype(np.float64)
        fits = step <= abs(r)
        k = int(np.argmax(np.where(fits, step, -1.0))) if fits.any() else int(np.argmin(step))
        cell = kind(float(flat[k]) + r)
        if cell == flat[k]:
            cell = np.nextafter(flat[k], kind(np.inf if r > 0 else -np.inf))
        flat[k] = cell
    raise ArithmeticError("could not normalize grid to unit mean")
