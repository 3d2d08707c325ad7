"""
Hexagonal decomposition of a rectangular workspace

Tiling: flat-top hexagons of side R. Column c has center x = 1.5 R c, row r has
center y = sqrt(3) R (r + (c mod 2) / 2), so odd columns sit half a row higher and
the hexagon (0, 0) is centered at the origin. Hexagons whose intersection with the
workspace has positive area are retained (boundary ones clipped) and numbered by
ascending (column, row).

Directions 1..6 start at north and turn counter-clockwise:
1 = N, 2 = NW, 3 = SW, 4 = S, 5 = SE, 6 = NE.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import (
    Dict,
    FrozenSet,
    Iterable,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Tuple,
    Union,
)

import numpy as np
import shapely
from shapely.geometry import Polygon, box
from shapely.ops import unary_union

from mmp.errors import GeometryError, OutOfWorkspaceError

logger = logging.getLogger(__name__)

SQRT3 = math.sqrt(3.0)
DIRECTIONS = (1, 2, 3, 4, 5, 6)
# tie-break slack for points on shared edges, relative to R
BOUNDARY_TOLERANCE = 1e-9

Point = Tuple[float, float]


class Bounds(NamedTuple):
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax

    def vertices(self) -> List[Point]:
        return [
            (self.xmin, self.ymin),
            (self.xmax, self.ymin),
            (self.xmax, self.ymax),
            (self.xmin, self.ymax),
        ]


def opposite(direction: int) -> int:
    """Direction pointing back: 1<->4, 2<->5, 3<->6"""
    return (direction + 2) % 6 + 1


def direction_offset(direction: int, side_length: float) -> Point:
    """Center-to-center displacement towards a direction"""
    angle = math.radians(90.0 + 60.0 * (direction - 1))
    step = SQRT3 * side_length
    return (step * math.cos(angle), step * math.sin(angle))


def hexagon_vertices(center: Point, side_length: float) -> List[Point]:
    cx, cy = center
    angles = [math.radians(60.0 * k) for k in range(6)]
    return [
        (cx + side_length * math.cos(a), cy + side_length * math.sin(a))
        for a in angles
    ]


@dataclass(frozen=True)
class HexRegion:
    id: int
    col: int
    row: int
    center: Point
    polygon: Polygon = field(compare=False, repr=False)
    reference: Point = field(compare=False)
    labels: FrozenSet[str] = frozenset()

    @property
    def clipped(self) -> bool:
        return self.reference != self.center


class Partition:
    """Immutable hexagonal partition with neighbor maps and distance queries"""

    def __init__(
        self, bounds: Bounds, side_length: float, regions: Iterable[HexRegion]
    ):
        self.bounds = bounds
        self.side_length = side_length
        self.regions: Tuple[HexRegion, ...] = tuple(regions)
        self._index = {(r.col, r.row): r.id for r in self.regions}
        self._unions: Dict[Tuple[int, int], Polygon] = {}
        for region in self.regions:
            shapely.prepare(region.polygon)

    def __len__(self) -> int:
        return len(self.regions)

    @property
    def inscribed_radius(self) -> float:
        return SQRT3 / 2.0 * self.side_length

    @property
    def ids(self) -> range:
        return range(len(self.regions))

    def region(self, region_id: int) -> HexRegion:
        if not 0 <= region_id < len(self.regions):
            raise GeometryError(f"unknown region id {region_id}")
        return self.regions[region_id]

    def labels(self, region_id: int) -> FrozenSet[str]:
        return self.region(region_id).labels

    def _cell_center(self, col: int, row: int) -> Point:
        return (
            1.5 * self.side_length * col,
            SQRT3 * self.side_length * (row + 0.5 * (col % 2)),
        )

    def _cell_of(self, x: float, y: float) -> Tuple[int, int]:
        col = int(round(x / (1.5 * self.side_length)))
        row = int(round(y / (SQRT3 * self.side_length) - 0.5 * (col % 2)))
        return col, row

    def _hex_norm(self, dx: float, dy: float) -> float:
        # support function of the flat-top hexagon; <= r_h inside
        slant = 0.5 * SQRT3 * dx
        return max(abs(dy), abs(slant + 0.5 * dy), abs(slant - 0.5 * dy))

    def point_to_region(self, point: Union[Point, np.ndarray]) -> int:
        """
        Region containing a point, smallest id on shared edges and vertices

        Raises:
            OutOfWorkspaceError: point outside the workspace bounds
        """
        x, y = float(point[0]), float(point[1])
        if not self.bounds.contains(x, y):
            raise OutOfWorkspaceError(
                f"point ({x}, {y}) outside workspace {tuple(self.bounds)}"
            )
        c0, _ = self._cell_of(x, y)
        limit = self.inscribed_radius + BOUNDARY_TOLERANCE * self.side_length
        candidates = []
        for col in (c0 - 1, c0, c0 + 1):
            r0 = int(round(y / (SQRT3 * self.side_length) - 0.5 * (col % 2)))
            for row in (r0 - 1, r0, r0 + 1):
                region_id = self._index.get((col, row))
                if region_id is None:
                    continue
                cx, cy = self._cell_center(col, row)
                if self._hex_norm(x - cx, y - cy) <= limit:
                    candidates.append(region_id)
        if not candidates:
            raise GeometryError(f"no region found for ({x}, {y})")
        return min(candidates)

    def neighbor_in_direction(self, region_id: int, direction: int) -> Optional[int]:
        """Neighbor of a region in a direction of 1..6, None outside the workspace"""
        if direction not in DIRECTIONS:
            raise GeometryError(
                f"direction must be one of {DIRECTIONS}, got {direction}"
            )
        region = self.region(region_id)
        dx, dy = direction_offset(direction, self.side_length)
        col, row = self._cell_of(region.center[0] + dx, region.center[1] + dy)
        return self._index.get((col, row))

    def neighbors(self, region_id: int) -> Dict[int, int]:
        """Direction -> neighbor id for every in-bounds neighbor"""
        found = {}
        for direction in DIRECTIONS:
            neighbor = self.neighbor_in_direction(region_id, direction)
            if neighbor is not None:
                found[direction] = neighbor
        return found

    def direction_between(self, src: int, dst: int) -> Optional[int]:
        for direction, neighbor in self.neighbors(src).items():
            if neighbor == dst:
                return direction
        return None

    def adjacent(self, src: int, dst: int) -> bool:
        return self.direction_between(src, dst) is not None

    def pair_union_polygon(self, src: int, dst: int) -> Polygon:
        """Union of two adjacent regions; the shared edge is interior"""
        key = (min(src, dst), max(src, dst))
        if key not in self._unions:
            if not self.adjacent(src, dst):
                raise GeometryError(f"regions {src} and {dst} are not adjacent")
            union = unary_union([self.region(src).polygon, self.region(dst).polygon])
            if union.geom_type != "Polygon":
                raise GeometryError(
                    f"regions {src} and {dst} share no edge inside the workspace"
                )
            shapely.prepare(union)
            self._unions[key] = union
        return self._unions[key]

    def signed_distance_to_pair_union(
        self, src: int, dst: int, points: Union[Point, np.ndarray]
    ) -> Union[float, np.ndarray]:
        """
        Signed distance to the boundary of the union of two adjacent regions

        Negative inside, zero on the boundary, positive outside. Accepts one point
        or an (n, 2) array and answers in kind.
        """
        union = self.pair_union_polygon(src, dst)
        return _signed_distance(union, points)

    def pair_union_segments(self, src: int, dst: int) -> np.ndarray:
        return boundary_segments(self.pair_union_polygon(src, dst))

    def signed_distance_to_region(
        self, region_id: int, points: Union[Point, np.ndarray]
    ) -> Union[float, np.ndarray]:
        return _signed_distance(self.region(region_id).polygon, points)

    def clearance(self, region_id: int) -> float:
        """Distance from a region's reference point to its boundary"""
        region = self.region(region_id)
        return float(-self.signed_distance_to_region(region_id, region.reference))

    def dump(self) -> str:
        """Text table region_id, center_x, center_y, labels..."""
        lines = ["region_id, center_x, center_y, labels..."]
        for region in self.regions:
            cells = [str(region.id), repr(region.center[0]), repr(region.center[1])]
            cells.extend(sorted(region.labels))
            lines.append(", ".join(cells))
        return "\n".join(lines) + "\n"


def boundary_segments(polygon: Polygon) -> np.ndarray:
    """Boundary of a polygon as an (E, 2, 2) array of segments"""
    segments = []
    for ring in [polygon.exterior, *polygon.interiors]:
        coords = np.asarray(ring.coords, dtype=float)
        segments.append(np.stack([coords[:-1], coords[1:]], axis=1))
    return np.concatenate(segments)


def segment_signed_distance(segments: np.ndarray, points: np.ndarray) -> np.ndarray:
    """
    Signed distance of points (..., 2) to a polygon given by its boundary segments

    Pure numpy twin of the shapely query, used inside the optimizer where many
    small batches are evaluated. Inside is decided by the crossing number.
    """
    p = np.asarray(points, dtype=float)[..., np.newaxis, :]
    a = segments[:, 0]
    b = segments[:, 1]
    ab = b - a
    t = np.clip(np.sum((p - a) * ab, axis=-1) / np.sum(ab * ab, axis=-1), 0.0, 1.0)
    nearest = a + t[..., np.newaxis] * ab
    distance = np.linalg.norm(p - nearest, axis=-1).min(axis=-1)
    py = p[..., 1]
    straddle = (a[:, 1] > py) != (b[:, 1] > py)
    dy = np.where(straddle, b[:, 1] - a[:, 1], 1.0)
    x_cross = a[:, 0] + (py - a[:, 1]) * ab[:, 0] / dy
    inside = np.sum(straddle & (p[..., 0] < x_cross), axis=-1) % 2 == 1
    return np.where(inside, -distance, distance)


def _signed_distance(
    polygon: Polygon, points: Union[Point, np.ndarray]
) -> Union[float, np.ndarray]:
    arr = np.asarray(points, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    samples = shapely.points(arr[:, 0], arr[:, 1])
    distance = shapely.distance(polygon.boundary, samples)
    inside = shapely.contains_xy(polygon, arr[:, 0], arr[:, 1])
    signed = np.where(inside, -distance, distance)
    return float(signed[0]) if single else signed


def build_partition(
    bounds: Union[Bounds, Tuple[float, float, float, float]],
    side_length: float,
    label_map: Optional[Mapping[int, Iterable[str]]] = None,
) -> Partition:
    """
    Decompose a rectangle into hexagons of side R

    Args:
        bounds: (xmin, ymin, xmax, ymax)
        side_length: hexagon side R
        label_map: region id -> propositions, regions absent from it are unlabeled

    Raises:
        GeometryError: non-positive R, degenerate bounds or unknown region ids
    """
    bounds = Bounds(*(float(v) for v in bounds))
    if not side_length > 0:
        raise GeometryError(f"side length must be positive, got {side_length}")
    if not (bounds.xmax > bounds.xmin and bounds.ymax > bounds.ymin):
        raise GeometryError(f"degenerate workspace bounds {tuple(bounds)}")
    R = float(side_length)
    workspace = box(*bounds)
    min_area = 1e-12 * (1.5 * SQRT3 * R * R)
    col_lo = math.floor((bounds.xmin - R) / (1.5 * R))
    col_hi = math.ceil((bounds.xmax + R) / (1.5 * R))
    cells = []
    for col in range(col_lo, col_hi + 1):
        shift = 0.5 * (col % 2)
        row_lo = math.floor((bounds.ymin - SQRT3 * R) / (SQRT3 * R) - shift)
        row_hi = math.ceil((bounds.ymax + SQRT3 * R) / (SQRT3 * R) - shift)
        for row in range(row_lo, row_hi + 1):
            center = (1.5 * R * col, SQRT3 * R * (row + shift))
            clipped = Polygon(hexagon_vertices(center, R)).intersection(workspace)
            if clipped.is_empty or clipped.area <= min_area:
                continue
            cells.append((col, row, center, clipped))

    labels = {k: frozenset(v) for k, v in (label_map or {}).items()}
    unknown = [k for k in labels if not 0 <= k < len(cells)]
    if unknown:
        raise GeometryError(f"label map references unknown regions {sorted(unknown)}")

    regions = []
    for region_id, (col, row, center, clipped) in enumerate(cells):
        if bounds.contains(*center):
            reference = center
        else:
            centroid = clipped.centroid
            reference = (centroid.x, centroid.y)
        regions.append(
            HexRegion(
                id=region_id,
                col=col,
                row=row,
                center=center,
                polygon=clipped,
                reference=reference,
                labels=labels.get(region_id, frozenset()),
            )
        )
    logger.info(
        f"Built partition with {len(regions)} regions, R={R}, bounds={tuple(bounds)}"
    )
    return Partition(bounds, R, regions)
