"""MapReduce-style K-Means workload: dataset generator, a map task emitting
per-centroid partial sums, a reduce task folding partials into new centroids,
and an independent single-process oracle.

Coordinates are uniform in [0,1)^3 but quantized to the 2^-24 dyadic grid, so
every partial sum of up to ~10^6 points is exact in float64.  Exact sums make
addition associative here, which is what lets any partitioning of the map
phase reproduce the oracle's centroids bit for bit.  Ties in the nearest-
centroid search go to the lowest centroid index on both paths.

The map and reduce entry points run as standalone executables
(``python -m pilotlet.kmeans map|reduce``) so they can be submitted as
compute units under any launch method.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from .errors import MalformedInput, ShapeMismatch, ValidationError

GRID = 2 ** 24  # coordinate quantization denominator


@dataclass(frozen=True)
class KMeansScenario:
    n_points: int
    k_clusters: int
    dim: int = 3
    iterations: int = 2
    n_tasks: int = 1
    seed: int = 42

    @property
    def name(self) -> str:
        return f"{self.n_points}x{self.k_clusters}"

    def violations(self) -> list:
        out = []
        if self.n_points < 1:
            out.append("n_points must be >= 1")
        if self.k_clusters < 1:
            out.append("k_clusters must be >= 1")
        if self.n_tasks < 1:
            out.append("n_tasks must be >= 1")
        if self.dim != 3:
            out.append("only dim=3 is supported")
        if self.iterations < 1:
            out.append("iterations must be >= 1")
        return out

    def validate(self) -> "KMeansScenario":
        violations = self.violations()
        if violations:
            raise ValidationError(violations)
        return self

    def partitions(self) -> List[Tuple[int, int]]:
        """Row ranges per map task; the last partition takes the remainder."""
        base = self.n_points // self.n_tasks
        bounds = []
        for p in range(self.n_tasks):
            start = p * base
            end = (p + 1) * base if p < self.n_tasks - 1 else self.n_points
            bounds.append((start, end))
        return bounds


def _fmt(x: float) -> str:
    return format(x, ".17g")


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------

def write_points(path, header: Tuple[int, int, int, int], rows) -> None:
    n, k, dim, seed = header
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{n} {k} {dim} {seed}\n")
        for row in rows:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def read_points(path) -> Tuple[Tuple[int, int, int, int], List[Tuple[float, float, float]]]:
    try:
        with open(path, "r", encoding="ascii") as fh:
            first = fh.readline().split()
            if len(first) != 4:
                raise MalformedInput(f"{path}: expected header 'n k dim seed'")
            n, k, dim, seed = (int(v) for v in first)
            rows = []
            for lineno, line in enumerate(fh, start=2):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != dim:
                    raise MalformedInput(f"{path}:{lineno}: expected {dim} coordinates")
                rows.append(tuple(float(v) for v in parts))
    except (OSError, ValueError) as exc:
        raise MalformedInput(f"cannot read points file {path}: {exc}") from exc
    if len(rows) != n:
        raise MalformedInput(f"{path}: header says {n} points, found {len(rows)}")
    return (n, k, dim, seed), rows


def write_centroids(path, centroids) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for row in centroids:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def read_centroids(path) -> List[Tuple[float, float, float]]:
    rows = []
    try:
        with open(path, "r", encoding="ascii") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 3:
                    raise MalformedInput(f"{path}:{lineno}: expected 3 coordinates")
                rows.append(tuple(float(v) for v in parts))
    except (OSError, ValueError) as exc:
        raise MalformedInput(f"cannot read centroids file {path}: {exc}") from exc
    if not rows:
        raise MalformedInput(f"{path}: no centroids")
    return rows


def write_partials(path, sums, counts) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for i, (s, c) in enumerate(zip(sums, counts)):
            fh.write(f"{i} {_fmt(s[0])} {_fmt(s[1])} {_fmt(s[2])} {c}\n")


def read_partials(path) -> Tuple[List[List[float]], List[int]]:
    sums, counts = [], []
    try:
        with open(path, "r", encoding="ascii") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 5:
                    raise MalformedInput(f"{path}:{lineno}: expected 'index sx sy sz count'")
                idx = int(parts[0])
                if idx != len(sums):
                    raise MalformedInput(f"{path}:{lineno}: centroid indices must be dense and ordered")
                sums.append([float(parts[1]), float(parts[2]), float(parts[3])])
                counts.append(int(parts[4]))
    except (OSError, ValueError) as exc:
        raise MalformedInput(f"cannot read partials file {path}: {exc}") from exc
    return sums, counts


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------

def generate_dataset(scenario: KMeansScenario, points_path, centroids_path) -> None:
    """Deterministically write the dataset and the initial centroids.

    Both are prefixes of one counter-based random stream, so the initial
    centroids are the first k points (continuing past the dataset when
    k exceeds n).
    """
    import numpy as np

    scenario.validate()
    rng = np.random.Generator(np.random.Philox(key=scenario.seed))
    total = max(scenario.n_points, scenario.k_clusters)
    raw = rng.integers(0, GRID, size=(total, 3), dtype=np.int64)
    coords = raw.astype(np.float64) / GRID
    write_points(
        points_path,
        (scenario.n_points, scenario.k_clusters, scenario.dim, scenario.seed),
        coords[: scenario.n_points],
    )
    write_centroids(centroids_path, coords[: scenario.k_clusters])


def kmeans_map(
    points_path,
    centroids_path,
    out_path,
    row_start: Optional[int] = None,
    row_end: Optional[int] = None,
    assign_out=None,
) -> int:
    """Assign a row range to nearest centroids; emit per-centroid sums/counts.

    Returns the number of point-centroid distance computations performed.
    """
    _, points = read_points(points_path)
    centroids = read_centroids(centroids_path)
    k = len(centroids)
    start = 0 if row_start is None else row_start
    end = len(points) if row_end is None else row_end
    if not (0 <= start <= end <= len(points)):
        raise MalformedInput(f"row range [{start}, {end}) outside dataset of {len(points)} points")

    sums = [[0.0, 0.0, 0.0] for _ in range(k)]
    counts = [0] * k
    assignments = []
    for px, py, pz in points[start:end]:
        best = 0
        best_d = None
        for ci in range(k):
            cx, cy, cz = centroids[ci]
            dx = px - cx
            dy = py - cy
            dz = pz - cz
            d = dx * dx + dy * dy + dz * dz
            if best_d is None or d < best_d:
                best_d = d
                best = ci
        s = sums[best]
        s[0] += px
        s[1] += py
        s[2] += pz
        counts[best] += 1
        assignments.append(best)

    write_partials(out_path, sums, counts)
    if assign_out is not None:
        with open(assign_out, "w", encoding="ascii") as fh:
            for a in assignments:
                fh.write(f"{a}\n")
    return (end - start) * k


def kmeans_reduce(prev_centroids_path, partial_paths: Sequence, out_path) -> None:
    """Fold partial sums into new centroids.

    Partials merge in a canonical order (sorted by file name, which encodes
    the partition index) so permuted inputs give identical output.  A centroid
    that collected no points keeps its previous position.
    """
    prev = read_centroids(prev_centroids_path)
    k = len(prev)
    total_sums = [[0.0, 0.0, 0.0] for _ in range(k)]
    total_counts = [0] * k
    for path in sorted(partial_paths, key=lambda p: Path(p).name):
        sums, counts = read_partials(path)
        if len(sums) != k:
            raise ShapeMismatch(f"{path} has {len(sums)} centroids, expected {k}")
        for i in range(k):
            total_sums[i][0] += sums[i][0]
            total_sums[i][1] += sums[i][1]
            total_sums[i][2] += sums[i][2]
            total_counts[i] += counts[i]
    new = []
    for i in range(k):
        c = total_counts[i]
        if c == 0:
            new.append(tuple(prev[i]))
        else:
            s = total_sums[i]
            new.append((s[0] / c, s[1] / c, s[2] / c))
    write_centroids(out_path, new)


def kmeans_oracle(points, centroids, iterations: int) -> tuple:
    """Ground-truth single-process Lloyd iterations.

    Implemented independently of the map/reduce path (vectorized, chunked);
    exact grid sums make the two paths bitwise comparable.  Returns
    (final centroids, assignments of the last iteration).
    """
    import numpy as np

    pts = np.asarray(points, dtype=np.float64)
    cents = np.asarray(centroids, dtype=np.float64).copy()
    if pts.ndim != 2 or pts.shape[1] != 3 or cents.ndim != 2 or cents.shape[1] != 3:
        raise ShapeMismatch("points and centroids must be (n,3) and (k,3)")
    k = cents.shape[0]
    assignments = np.zeros(pts.shape[0], dtype=np.int64)
    for _ in range(iterations):
        sums = np.zeros((k, 3), dtype=np.float64)
        counts = np.zeros(k, dtype=np.int64)
        for lo in range(0, pts.shape[0], 4096):
            block = pts[lo : lo + 4096]
            dx = block[:, None, 0] - cents[None, :, 0]
            dy = block[:, None, 1] - cents[None, :, 1]
            dz = block[:, None, 2] - cents[None, :, 2]
            dist = dx * dx + dy * dy + dz * dz
            idx = np.argmin(dist, axis=1)  # first occurrence wins ties
            assignments[lo : lo + block.shape[0]] = idx
            counts += np.bincount(idx, minlength=k)
            for j in range(3):
                sums[:, j] += np.bincount(idx, weights=block[:, j], minlength=k)
        occupied = counts > 0
        cents[occupied] = sums[occupied] / counts[occupied, None]
    return cents, assignments


# --------------------------------------------------------------------------
# Executable entry points
# --------------------------------------------------------------------------

def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="pilotlet-kmeans")
    sub = parser.add_subparsers(dest="op", required=True)

    gen = sub.add_parser("gen", help="generate a dataset and initial centroids")
    gen.add_argument("--n-points", type=int, required=True)
    gen.add_argument("--k-clusters", type=int, required=True)
    gen.add_argument("--seed", type=int, default=42)
    gen.add_argument("--points", required=True)
    gen.add_argument("--centroids", required=True)

    mp = sub.add_parser("map", help="partial sums for one partition")
    mp.add_argument("--points", required=True)
    mp.add_argument("--centroids", required=True)
    mp.add_argument("--out", required=True)
    mp.add_argument("--row-start", type=int, default=None)
    mp.add_argument("--row-end", type=int, default=None)
    mp.add_argument("--assign-out", default=None)

    rd = sub.add_parser("reduce", help="merge partials into new centroids")
    rd.add_argument("--centroids", required=True, help="previous centroids")
    rd.add_argument("--out", required=True)
    rd.add_argument("partials", nargs="+")

    args = parser.parse_args(argv)
    if args.op == "gen":
        scenario = KMeansScenario(n_points=args.n_points, k_clusters=args.k_clusters, seed=args.seed)
        generate_dataset(scenario, args.points, args.centroids)
        return 0
    if args.op == "map":
        computed = kmeans_map(
            args.points, args.centroids, args.out,
            row_start=args.row_start, row_end=args.row_end, assign_out=args.assign_out,
        )
        print(f"dist_computations {computed}")
        return 0
    kmeans_reduce(args.centroids, args.partials, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
