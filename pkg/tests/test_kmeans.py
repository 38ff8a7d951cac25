import math

import numpy as np
import pytest

from pilotlet.errors import MalformedInput, ShapeMismatch, ValidationError
from pilotlet.kmeans import (
    GRID,
    KMeansScenario,
    generate_dataset,
    kmeans_map,
    kmeans_oracle,
    kmeans_reduce,
    read_centroids,
    read_points,
    write_centroids,
    write_points,
)


def grid_value(numerator: int) -> float:
    return numerator / GRID


class TestScenario:
    def test_partitions_last_takes_remainder(self):
        s = KMeansScenario(n_points=10, k_clusters=2, n_tasks=4)
        assert s.partitions() == [(0, 2), (2, 4), (4, 6), (6, 10)]

    def test_invalid_counts(self):
        with pytest.raises(ValidationError):
            KMeansScenario(n_points=0, k_clusters=1).validate()
        with pytest.raises(ValidationError):
            KMeansScenario(n_points=10, k_clusters=0).validate()

    def test_more_clusters_than_points_is_legal(self):
        KMeansScenario(n_points=100, k_clusters=5000).validate()


class TestGenerateDataset:
    def test_same_seed_byte_identical(self, tmp_path):
        s = KMeansScenario(n_points=500, k_clusters=10, seed=42)
        generate_dataset(s, tmp_path / "p1", tmp_path / "c1")
        generate_dataset(s, tmp_path / "p2", tmp_path / "c2")
        assert (tmp_path / "p1").read_bytes() == (tmp_path / "p2").read_bytes()
        assert (tmp_path / "c1").read_bytes() == (tmp_path / "c2").read_bytes()

    def test_row_counts_match_scenario(self, tmp_path):
        s = KMeansScenario(n_points=10000, k_clusters=5000, seed=1)
        generate_dataset(s, tmp_path / "p", tmp_path / "c")
        header, points = read_points(tmp_path / "p")
        assert header == (10000, 5000, 3, 1)
        assert len(points) == 10000
        assert len(read_centroids(tmp_path / "c")) == 5000

    def test_centroids_are_prefix_of_points(self, tmp_path):
        s = KMeansScenario(n_points=100, k_clusters=7, seed=3)
        generate_dataset(s, tmp_path / "p", tmp_path / "c")
        _, points = read_points(tmp_path / "p")
        assert read_centroids(tmp_path / "c") == points[:7]

    def test_coordinates_on_grid_in_unit_cube(self, tmp_path):
        s = KMeansScenario(n_points=200, k_clusters=5, seed=9)
        generate_dataset(s, tmp_path / "p", tmp_path / "c")
        _, points = read_points(tmp_path / "p")
        for row in points:
            for v in row:
                assert 0.0 <= v < 1.0
                assert v * GRID == int(v * GRID)

    def test_17_digit_round_trip(self, tmp_path):
        rows = [(1 / 3, 2 / 7, 0.1)]
        write_points(tmp_path / "p", (1, 1, 3, 0), rows)
        _, got = read_points(tmp_path / "p")
        assert got == rows


class TestMap:
    def test_point_on_centroid(self, tmp_path):
        centroids = [(0.5, 0.5, 0.5), (0.25, 0.25, 0.25)]
        points = [(0.25, 0.25, 0.25)]
        write_points(tmp_path / "p", (1, 2, 3, 0), points)
        write_centroids(tmp_path / "c", centroids)
        computed = kmeans_map(tmp_path / "p", tmp_path / "c", tmp_path / "out")
        assert computed == 2
        from pilotlet.kmeans import read_partials

        sums, counts = read_partials(tmp_path / "out")
        assert counts == [0, 1]
        assert sums[1] == [0.25, 0.25, 0.25]

    def test_axis_line_instance(self, tmp_path):
        # y=z=0: points {0,10} against centroids {1,9}.
        write_points(tmp_path / "p", (2, 2, 3, 0), [(0.0, 0.0, 0.0), (10.0, 0.0, 0.0)])
        write_centroids(tmp_path / "c", [(1.0, 0.0, 0.0), (9.0, 0.0, 0.0)])
        kmeans_map(tmp_path / "p", tmp_path / "c", tmp_path / "out")
        from pilotlet.kmeans import read_partials

        sums, counts = read_partials(tmp_path / "out")
        assert counts == [1, 1]
        assert [s[0] for s in sums] == [0.0, 10.0]

    def test_tie_goes_to_lowest_index(self, tmp_path):
        centroids = [(5.0, 5.0, 5.0)] * 2 + [(0.0, 1.0, 0.0)] + [(5.0, 5.0, 5.0)] * 2 + [(0.0, -1.0, 0.0)]
        write_points(tmp_path / "p", (1, 6, 3, 0), [(0.0, 0.0, 0.0)])
        write_centroids(tmp_path / "c", centroids)
        kmeans_map(tmp_path / "p", tmp_path / "c", tmp_path / "out")
        from pilotlet.kmeans import read_partials

        _, counts = read_partials(tmp_path / "out")
        assert counts[2] == 1  # equidistant to index 2 and 5; 2 wins

    def test_assignment_output(self, tmp_path):
        write_points(tmp_path / "p", (2, 2, 3, 0), [(0.0, 0.0, 0.0), (1.0, 1.0, 1.0)])
        write_centroids(tmp_path / "c", [(0.0, 0.0, 0.0), (1.0, 1.0, 1.0)])
        kmeans_map(tmp_path / "p", tmp_path / "c", tmp_path / "out", assign_out=tmp_path / "a")
        assert (tmp_path / "a").read_text().split() == ["0", "1"]

    def test_malformed_input(self, tmp_path):
        (tmp_path / "p").write_text("not a header\n")
        write_centroids(tmp_path / "c", [(0.0, 0.0, 0.0)])
        with pytest.raises(MalformedInput):
            kmeans_map(tmp_path / "p", tmp_path / "c", tmp_path / "out")


class TestReduce:
    def test_single_partial_identity(self, tmp_path):
        # Every point its own cluster: new centroids equal the points.
        points = [(grid_value(i), grid_value(2 * i), grid_value(3 * i)) for i in range(1, 5)]
        write_points(tmp_path / "p", (4, 4, 3, 0), points)
        write_centroids(tmp_path / "c", points)
        kmeans_map(tmp_path / "p", tmp_path / "c", tmp_path / "out")
        kmeans_reduce(tmp_path / "c", [tmp_path / "out"], tmp_path / "new")
        assert read_centroids(tmp_path / "new") == points

    def test_permuted_partials_identical_output(self, tmp_path):
        s = KMeansScenario(n_points=60, k_clusters=4, n_tasks=3, seed=5)
        generate_dataset(s, tmp_path / "p", tmp_path / "c")
        partials = []
        for p, (start, end) in enumerate(s.partitions()):
            out = tmp_path / f"part-{p:05d}.psum"
            kmeans_map(tmp_path / "p", tmp_path / "c", out, start, end)
            partials.append(out)
        kmeans_reduce(tmp_path / "c", partials, tmp_path / "fwd")
        kmeans_reduce(tmp_path / "c", list(reversed(partials)), tmp_path / "rev")
        assert (tmp_path / "fwd").read_bytes() == (tmp_path / "rev").read_bytes()

    def test_empty_centroid_keeps_position(self, tmp_path):
        write_points(tmp_path / "p", (1, 2, 3, 0), [(0.25, 0.25, 0.25)])
        prev = [(0.25, 0.25, 0.25), (0.75, 0.75, 0.75)]
        write_centroids(tmp_path / "c", prev)
        kmeans_map(tmp_path / "p", tmp_path / "c", tmp_path / "out")
        kmeans_reduce(tmp_path / "c", [tmp_path / "out"], tmp_path / "new")
        got = read_centroids(tmp_path / "new")
        assert got[0] == (0.25, 0.25, 0.25)
        assert got[1] == (0.75, 0.75, 0.75)  # unpopulated: unchanged

    def test_shape_mismatch(self, tmp_path):
        write_centroids(tmp_path / "c", [(0.0, 0.0, 0.0)] * 3)
        (tmp_path / "part").write_text("0 0 0 0 1\n1 0 0 0 0\n")  # k=2 partial
        with pytest.raises(ShapeMismatch):
            kmeans_reduce(tmp_path / "c", [tmp_path / "part"], tmp_path / "new")


class TestOracle:
    def test_k_equals_n_fixed_point(self, tmp_path):
        s = KMeansScenario(n_points=20, k_clusters=20, seed=8)
        generate_dataset(s, tmp_path / "p", tmp_path / "c")
        _, points = read_points(tmp_path / "p")
        cents, assign = kmeans_oracle(points, points, iterations=3)
        assert [tuple(c) for c in cents] == points
        assert list(assign) == list(range(20))

    def test_two_blobs_land_on_blob_means(self):
        lo = [(grid_value(100 + i), grid_value(200 + i), grid_value(300 + i)) for i in range(4)]
        hi = [(grid_value(GRID - 100 - i), grid_value(GRID - 200 - i), grid_value(GRID - 300 - i))
              for i in range(4)]
        points = [lo[0], hi[0], *lo[1:], *hi[1:]]
        centroids = points[:2]  # one seed in each blob
        cents, assign = kmeans_oracle(points, centroids, iterations=1)
        expected_lo = tuple(sum(p[d] for p in lo) / 4 for d in range(3))
        expected_hi = tuple(sum(p[d] for p in hi) / 4 for d in range(3))
        assert tuple(cents[0]) == expected_lo
        assert tuple(cents[1]) == expected_hi


def run_distributed(points_path, centroids_path, n_tasks, iterations, tmp_path):
    """Drive the map/reduce functions directly (no pilots) for a full run."""
    header, _ = read_points(points_path)
    scenario = KMeansScenario(n_points=header[0], k_clusters=header[1],
                              n_tasks=n_tasks, iterations=iterations)
    current = centroids_path
    assignments = []
    for it in range(1, iterations + 1):
        partials = []
        assign_files = []
        for p, (start, end) in enumerate(scenario.partitions()):
            out = tmp_path / f"it{it}-part-{p:05d}.psum"
            assign = tmp_path / f"it{it}-assign-{p:05d}.txt" if it == iterations else None
            kmeans_map(points_path, current, out, start, end, assign_out=assign)
            partials.append(out)
            if assign:
                assign_files.append(assign)
        new = tmp_path / f"it{it}-centroids.dat"
        kmeans_reduce(current, partials, new)
        current = new
        if it == iterations:
            for f in assign_files:
                assignments.extend(int(x) for x in f.read_text().split())
    return read_centroids(current), assignments


@pytest.mark.parametrize("n_tasks", [1, 2, 4, 8])
def test_distributed_equals_oracle_bitwise(tmp_path, n_tasks):
    s = KMeansScenario(n_points=1000, k_clusters=8, n_tasks=n_tasks, iterations=2, seed=17)
    generate_dataset(s, tmp_path / "p", tmp_path / "c")
    _, points = read_points(tmp_path / "p")
    initial = read_centroids(tmp_path / "c")

    got_cents, got_assign = run_distributed(tmp_path / "p", tmp_path / "c", n_tasks, 2, tmp_path)
    want_cents, want_assign = kmeans_oracle(points, initial, iterations=2)

    assert got_assign == list(want_assign)
    for got, want in zip(got_cents, want_cents):
        assert got == tuple(want)  # bitwise float equality


def test_random_small_instance_matches_oracle(tmp_path):
    s = KMeansScenario(n_points=200, k_clusters=8, n_tasks=4, iterations=1, seed=23)
    generate_dataset(s, tmp_path / "p", tmp_path / "c")
    _, points = read_points(tmp_path / "p")
    initial = read_centroids(tmp_path / "c")
    got_cents, got_assign = run_distributed(tmp_path / "p", tmp_path / "c", 4, 1, tmp_path)
    want_cents, want_assign = kmeans_oracle(points, initial, iterations=1)
    assert got_assign == list(want_assign)
    assert [tuple(c) for c in got_cents] == [tuple(c) for c in want_cents]


def test_dist_computation_count_is_partition_times_k(tmp_path):
    s = KMeansScenario(n_points=100, k_clusters=6, seed=2)
    generate_dataset(s, tmp_path / "p", tmp_path / "c")
    assert kmeans_map(tmp_path / "p", tmp_path / "c", tmp_path / "out", 10, 40) == 30 * 6
