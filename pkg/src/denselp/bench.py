"""Timing harness for the ordered filter against the brute-force reference."""

from __future__ import annotations

import csv
import io
import math
import time

import numpy as np

from .model import FeatureField, GaussianKernel, make_features
from .permutohedral import NAIVE_MAX_N, build_lattice, filter, naive_gaussian_filter, naive_ordered_filter, ordered_filter

BENCH_COLUMNS = ("n", "m", "d", "t_ordered_ms", "t_naive_ms", "speedup", "max_rel_err")

BENCH_KERNELS = {
    "spatial": GaussianKernel(1.0, "spatial", (3.0,)),
    "bilateral": GaussianKernel(1.0, "bilateral", (10.0, 20.0)),
}


def image_shape(n: int) -> tuple[int, int]:
    """(width, height) of a square or 2:1 image with at most ``n`` pixels, exact when possible."""
    side = math.isqrt(n)
    if side * side == n:
        return side, side
    height = max(1, math.isqrt(n // 2))
    return max(1, n // height), height


def bench_image(width: int, height: int, seed: int = 0) -> FeatureField:
    """Smooth colour ramps plus noise, so bilateral features look image-like."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    rgb = np.stack(
        [
            255.0 * xx / max(width - 1, 1),
            255.0 * yy / max(height - 1, 1),
            127.5 + 127.5 * np.sin(xx / 17.0) * np.cos(yy / 23.0),
        ],
        axis=-1,
    )
    rgb += rng.normal(0.0, 8.0, rgb.shape)
    return FeatureField(width, height, np.clip(rgb, 0, 255).reshape(-1, 3))


def doubling_sizes(max_n: int, start: int = 10_000) -> list[int]:
    sizes = []
    n = start
    while n <= max_n:
        sizes.append(n)
        n *= 2
    return sizes


def _normalized_error(approx, exact):
    return float(np.max(np.abs(approx - exact)) / max(np.max(np.abs(exact)), 1e-300))


def bench_filter(sizes, labels: int = 2, levels: int = 10, kernel: str = "bilateral", reps: int = 5, seed: int = 0):
    """One row per size; the naive columns are filled only where n fits the brute-force guard.

    ``t_ordered_ms`` is the mean over ``reps`` timed calls on a prebuilt
    lattice.  Repetitions run round-robin over the sizes so that slow
    stretches on a shared machine hit every size alike.  ``max_rel_err``
    compares outputs normalized by the filtered all-ones signal, with scores on
    exact level values so both sides order pairs alike.
    """
    kern = BENCH_KERNELS[kernel]
    rng = np.random.default_rng(seed)
    cases = []
    for n in sizes:
        width, height = image_shape(n)
        feats = make_features(bench_image(width, height, seed), kern)
        npts = feats.shape[0]
        values = rng.random((npts, labels))
        scores = rng.integers(0, levels, (npts, labels)).astype(np.float64)
        scores[0], scores[1] = 0.0, levels - 1.0  # pin the range so level k is exactly bin k
        cases.append((feats, build_lattice(feats), values, scores))

    times = np.zeros((reps, len(cases)))
    for _, lattice, values, scores in cases:
        ordered_filter(lattice, values, scores, levels, "geq")  # warm-up, not timed
    for rep in range(reps):
        for i, (_, lattice, values, scores) in enumerate(cases):
            start = time.perf_counter()
            ordered_filter(lattice, values, scores, levels, "geq")
            times[rep, i] = time.perf_counter() - start

    rows = []
    for i, (feats, lattice, values, scores) in enumerate(cases):
        npts = feats.shape[0]
        t_ordered = 1e3 * float(times[:, i].mean())
        row = {"n": npts, "m": labels, "d": feats.shape[1], "t_ordered_ms": t_ordered}
        if npts <= NAIVE_MAX_N:
            start = time.perf_counter()
            exact = naive_ordered_filter(feats, values, scores, "geq")
            t_naive = 1e3 * (time.perf_counter() - start)
            exact_norm = naive_gaussian_filter(feats, np.ones(npts))
            approx = ordered_filter(lattice, values, scores, levels, "geq")
            approx_norm = filter(lattice, np.ones(npts))
            row["t_naive_ms"] = t_naive
            row["speedup"] = t_naive / t_ordered
            row["max_rel_err"] = _normalized_error(approx / approx_norm[:, None], exact / exact_norm[:, None])
        rows.append(row)
    return rows


def scaling_ratios(rows) -> list[float]:
    return [b["t_ordered_ms"] / a["t_ordered_ms"] for a, b in zip(rows, rows[1:])]


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_COLUMNS)
    for row in rows:
        writer.writerow(
            [row["n"], row["m"], row["d"]]
            + [f"{row[c]:.6g}" if c in row else "" for c in BENCH_COLUMNS[3:]]
        )
    return buf.getvalue()
