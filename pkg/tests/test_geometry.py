import math

import numpy as np
import pytest

from mmp.errors import GeometryError, OutOfWorkspaceError
from mmp.geometry import (
    DIRECTIONS,
    SQRT3,
    build_partition,
    opposite,
    segment_signed_distance,
)
from tests.conftest import cell_center


def region_at(partition, col, row):
    for region in partition.regions:
        if (region.col, region.row) == (col, row):
            return region.id
    raise AssertionError(f"no region ({col}, {row})")


class TestPartition:
    """Hexagonal decomposition of the workspace"""

    @pytest.fixture
    def mission_partition(self):
        return build_partition((-10, -10, 10, 10), 1.0)

    def test_regions_cover_the_workspace(self, small_partition):
        """Clipped region areas add up to the workspace area"""
        total = sum(region.polygon.area for region in small_partition.regions)
        assert total == pytest.approx(36.0)

    def test_ids_follow_column_then_row(self, small_partition):
        """Region ids enumerate (column, row) in ascending order"""
        keys = [(r.col, r.row) for r in small_partition.regions]
        assert keys == sorted(keys)
        ids = [r.id for r in small_partition.regions]
        assert ids == list(range(len(small_partition)))

    def test_mission_start_positions_are_region_centers(self, mission_partition):
        """The three start points land on the centers of their cells"""
        starts = [
            ((0.0, 5 * SQRT3), (0, 5)),
            ((-6.0, -4 * SQRT3), (-4, -4)),
            ((7.5, -3.5 * SQRT3), (5, -4)),
        ]
        for point, cell in starts:
            region = mission_partition.region(mission_partition.point_to_region(point))
            assert (region.col, region.row) == cell
            assert region.center == pytest.approx(point)

    def test_shared_edge_resolves_to_smallest_id(self, small_partition):
        """A point on the edge between two hexagons belongs to the smaller id"""
        lower = region_at(small_partition, 0, 0)
        upper = region_at(small_partition, 0, 1)
        assert small_partition.point_to_region((0.0, SQRT3 / 2)) == min(lower, upper)

    def test_point_outside_raises(self, small_partition):
        """Points outside the bounds are rejected"""
        with pytest.raises(OutOfWorkspaceError):
            small_partition.point_to_region((3.5, 0.0))

    def test_neighbor_directions_around_origin(self, small_partition):
        """Directions run counter-clockwise from north"""
        origin = region_at(small_partition, 0, 0)
        expected = {
            1: (0, 1),
            2: (-1, 0),
            3: (-1, -1),
            4: (0, -1),
            5: (1, -1),
            6: (1, 0),
        }
        for direction, cell in expected.items():
            neighbor = small_partition.neighbor_in_direction(origin, direction)
            assert neighbor == region_at(small_partition, *cell)

    def test_opposite_directions(self):
        """opposite pairs 1-4, 2-5 and 3-6"""
        assert [opposite(d) for d in DIRECTIONS] == [4, 5, 6, 1, 2, 3]

    def test_neighbor_relation_is_symmetric(self, small_partition):
        """Moving in a direction and back returns to the start"""
        for region in small_partition.regions:
            for direction, neighbor in small_partition.neighbors(region.id).items():
                back = opposite(direction)
                returned = small_partition.neighbor_in_direction(neighbor, back)
                assert returned == region.id

    def test_boundary_region_has_fewer_neighbors(self, small_partition):
        """Regions on the border miss the directions that leave the workspace"""
        corner = small_partition.point_to_region((-2.9, -2.9))
        assert len(small_partition.neighbors(corner)) < 6

    def test_unknown_direction_rejected(self, small_partition):
        """Directions outside 1..6 raise"""
        with pytest.raises(GeometryError):
            small_partition.neighbor_in_direction(0, 7)

    def test_clipped_region_reference_inside(self, small_partition):
        """A hexagon whose center lies outside uses the centroid of its clipped part"""
        region = small_partition.region(region_at(small_partition, 0, 2))
        assert region.clipped
        assert small_partition.bounds.contains(*region.reference)
        assert small_partition.clearance(region.id) > 0

    def test_full_region_clearance_is_inscribed_radius(self, small_partition):
        """An unclipped hexagon's center is r_h away from its boundary"""
        origin = region_at(small_partition, 0, 0)
        assert small_partition.clearance(origin) == pytest.approx(SQRT3 / 2)

    def test_labels_from_map(self, small_bounds):
        """Labels are attached by region id"""
        partition = build_partition(small_bounds, 1.0, {3: ["goal"]})
        assert partition.labels(3) == frozenset({"goal"})
        assert partition.labels(4) == frozenset()

    def test_label_map_with_unknown_region(self, small_bounds):
        """Labels for regions that do not exist are rejected"""
        with pytest.raises(GeometryError):
            build_partition(small_bounds, 1.0, {999: ["goal"]})

    def test_invalid_side_length(self, small_bounds):
        """R must be positive"""
        with pytest.raises(GeometryError):
            build_partition(small_bounds, 0.0)

    def test_dump_lists_every_region(self, small_partition):
        """One header line plus one line per region"""
        lines = small_partition.dump().splitlines()
        assert lines[0] == "region_id, center_x, center_y, labels..."
        assert len(lines) == len(small_partition) + 1


class TestPairUnion:
    """Signed distance to the union of two adjacent regions"""

    def test_center_distance(self, small_partition):
        """The source center is r_h inside its union with the northern neighbor"""
        origin = region_at(small_partition, 0, 0)
        north = small_partition.neighbor_in_direction(origin, 1)
        value = small_partition.signed_distance_to_pair_union(origin, north, (0.0, 0.0))
        assert value == pytest.approx(-SQRT3 / 2)

    def test_shared_edge_is_interior(self, small_partition):
        """The midpoint of the shared edge lies strictly inside the union"""
        origin = region_at(small_partition, 0, 0)
        north = small_partition.neighbor_in_direction(origin, 1)
        midpoint = (0.0, SQRT3 / 2)
        value = small_partition.signed_distance_to_pair_union(origin, north, midpoint)
        assert value < -0.4

    def test_outside_is_positive(self, small_partition):
        """Points away from the union have positive distance"""
        origin = region_at(small_partition, 0, 0)
        north = small_partition.neighbor_in_direction(origin, 1)
        below = (0.0, -2.0)
        value = small_partition.signed_distance_to_pair_union(origin, north, below)
        assert value == pytest.approx(2.0 - SQRT3 / 2)

    def test_not_adjacent(self, small_partition):
        """Unions are only defined for adjacent regions"""
        origin = region_at(small_partition, 0, 0)
        far = region_at(small_partition, 0, 2)
        with pytest.raises(GeometryError):
            small_partition.pair_union_polygon(origin, far)

    def test_numpy_distance_matches_shapely(self, small_partition):
        """The segment-based distance agrees with the polygon query"""
        origin = region_at(small_partition, 0, 0)
        east = small_partition.neighbor_in_direction(origin, 6)
        rng = np.random.default_rng(7)
        points = rng.uniform(-2.5, 3.0, size=(200, 2))
        expected = small_partition.signed_distance_to_pair_union(origin, east, points)
        segments = small_partition.pair_union_segments(origin, east)
        actual = segment_signed_distance(segments, points)
        assert np.allclose(actual, expected, atol=1e-9)

    def test_vectorized_matches_scalar(self, small_partition):
        """Array queries answer point by point"""
        origin = region_at(small_partition, 0, 0)
        north = small_partition.neighbor_in_direction(origin, 1)
        points = np.array([cell_center(0, 0), cell_center(0, 1), (1.0, 1.0)])
        batch = small_partition.signed_distance_to_pair_union(origin, north, points)
        single = [
            small_partition.signed_distance_to_pair_union(origin, north, p)
            for p in points
        ]
        assert batch == pytest.approx(single)
        assert not math.isnan(batch[2])
