"""Geospatial primitives: great-circle distance, grid index, area assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_CELL_DEG = 0.005


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        lat, lon = float(self.lat), float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise ValueError(f"non-finite coordinate ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        if not -180.0 <= lon <= 180.0:
            raise ValueError(f"longitude {lon} outside [-180, 180]")
        if lon == 180.0:
            lon = -180.0
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)


@dataclass(frozen=True)
class ImageRecord:
    """Metadata of one street-view capture."""

    id: str
    pos: GeoPoint
    heading_deg: float
    capture_year: int
    capture_month: int
    city: str = ""
    area_id: Optional[str] = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("empty record id")
        if not 0.0 <= self.heading_deg < 360.0:
            raise ValueError(f"{self.id}: heading {self.heading_deg} outside [0, 360)")
        if not 1 <= self.capture_month <= 12:
            raise ValueError(f"{self.id}: month {self.capture_month} outside [1, 12]")

    @property
    def capture_time(self) -> Tuple[int, int]:
        return (self.capture_year, self.capture_month)


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters on a sphere of radius ``EARTH_RADIUS_M``."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(math.sqrt(min(1.0, h)))


def check_unique_ids(records: Iterable[ImageRecord]) -> None:
    seen = set()
    for r in records:
        if r.id in seen:
            raise ValueError(f"duplicate record id {r.id!r}")
        seen.add(r.id)


# --------------------------------------------------------------------------
# Grid index
# --------------------------------------------------------------------------


@dataclass
class GridIndex:
    """Uniform lat/lon bucket index with exact radius refinement.

    Immutable after :func:`build_grid_index`; safe for concurrent reads.
    """

    cell_size_deg: float
    buckets: Dict[Tuple[int, int], List[str]]
    points: Dict[str, GeoPoint] = field(repr=False)

    @property
    def n_lon_cells(self) -> int:
        return int(math.ceil(360.0 / self.cell_size_deg - 1e-9))

    @property
    def n_lat_cells(self) -> int:
        return int(math.ceil(180.0 / self.cell_size_deg - 1e-9))

    def cell_of(self, p: GeoPoint) -> Tuple[int, int]:
        row = min(int(math.floor((p.lat + 90.0) / self.cell_size_deg)), self.n_lat_cells - 1)
        col = int(math.floor((p.lon + 180.0) / self.cell_size_deg)) % self.n_lon_cells
        return row, col

    def __len__(self) -> int:
        return len(self.points)


def build_grid_index(records: Sequence[ImageRecord], cell_size_deg: float = DEFAULT_CELL_DEG) -> GridIndex:
    if not records:
        raise ValueError("cannot index an empty record list")
    if cell_size_deg <= 0:
        raise ValueError("cell_size_deg must be positive")
    index = GridIndex(cell_size_deg=float(cell_size_deg), buckets={}, points={})
    for r in records:
        if r.id in index.points:
            raise ValueError(f"duplicate record id {r.id!r}")
        index.points[r.id] = r.pos
        index.buckets.setdefault(index.cell_of(r.pos), []).append(r.id)
    return index


def _candidate_cells(index: GridIndex, center: GeoPoint, radius_m: float):
    """Cells that may hold points within ``radius_m``; None means scan all."""
    cs = index.cell_size_deg
    ang = radius_m / EARTH_RADIUS_M
    if ang >= math.pi / 2:
        return None
    dlat = math.degrees(ang) + 1e-9
    lat_lo, lat_hi = center.lat - dlat, center.lat + dlat
    if lat_lo <= -90.0 or lat_hi >= 90.0:
        return None
    cos_max = min(math.cos(math.radians(lat_lo)), math.cos(math.radians(lat_hi)))
    s = math.sin(ang) / cos_max
    if s >= 1.0:
        return None
    # widest longitude offset reached by a spherical cap
    dlon = math.degrees(math.asin(s)) + 1e-9
    if 2 * dlon >= 360.0:
        return None
    r0 = int(math.floor((lat_lo + 90.0) / cs))
    r1 = int(math.floor((lat_hi + 90.0) / cs))
    c0 = int(math.floor((center.lon - dlon + 180.0) / cs))
    c1 = int(math.floor((center.lon + dlon + 180.0) / cs))
    ncols = index.n_lon_cells
    if c1 - c0 + 1 >= ncols:
        return None
    n_cells = (r1 - r0 + 1) * (c1 - c0 + 1)
    if n_cells > len(index.buckets):
        return None
    cols = sorted({c % ncols for c in range(c0, c1 + 1)})
    return [(r, c) for r in range(r0, r1 + 1) for c in cols]


def radius_query(index: GridIndex, center: GeoPoint, radius_m: float) -> List[str]:
    """Ids within ``radius_m`` of ``center``, sorted by distance then id."""
    if not radius_m > 0:
        raise ValueError("radius_m must be positive")
    cells = _candidate_cells(index, center, radius_m)
    if cells is None:
        candidates: Iterable[str] = index.points.keys()
    else:
        candidates = (i for c in cells for i in index.buckets.get(c, ()))
    hits = []
    for rid in candidates:
        d = haversine_m(center, index.points[rid])
        if d <= radius_m:
            hits.append((d, rid))
    hits.sort()
    return [rid for _, rid in hits]


# --------------------------------------------------------------------------
# Areas
# --------------------------------------------------------------------------


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2, o3, o4 = orient(p1, p2, p3), orient(p1, p2, p4), orient(p3, p4, p1), orient(p3, p4, p2)
    if o1 != o2 and o3 != o4:
        return True
    return (
        (o1 == 0 and on_seg(p1, p2, p3))
        or (o2 == 0 and on_seg(p1, p2, p4))
        or (o3 == 0 and on_seg(p3, p4, p1))
        or (o4 == 0 and on_seg(p3, p4, p2))
    )


def validate_ring(area_id: str, ring: Sequence[Sequence[float]]) -> List[Tuple[float, float]]:
    """Return the closed ring as tuples; raise ``ValueError`` naming ``area_id``."""
    try:
        pts = [(float(v[0]), float(v[1])) for v in ring]
    except (TypeError, ValueError, IndexError):
        raise ValueError(f"area {area_id!r}: ring vertices must be [lat, lon] pairs") from None
    if len(pts) >= 2 and pts[0] == pts[-1]:
        pts = pts[:-1]
    if len(pts) < 3 or len(set(pts)) != len(pts):
        raise ValueError(f"area {area_id!r}: ring needs >= 3 distinct vertices")
    n = len(pts)
    for i in range(n):
        a, b = pts[i], pts[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or j == (i + 1) % n:
                continue
            if _segments_cross(a, b, pts[j], pts[(j + 1) % n]):
                raise ValueError(f"area {area_id!r}: ring is self-intersecting")
    return pts + [pts[0]]


def point_in_ring(lat: float, lon: float, ring: Sequence[Tuple[float, float]]) -> bool:
    """Even-odd test on a closed ring; points on an edge count as inside."""
    inside = False
    for (y1, x1), (y2, x2) in zip(ring[:-1], ring[1:]):
        cross = (x2 - x1) * (lat - y1) - (y2 - y1) * (lon - x1)
        if abs(cross) <= 1e-12 and min(x1, x2) <= lon <= max(x1, x2) and min(y1, y2) <= lat <= max(y1, y2):
            return True
        if (y1 > lat) != (y2 > lat):
            x_at = x1 + (lat - y1) * (x2 - x1) / (y2 - y1)
            if lon < x_at:
                inside = not inside
    return inside


@dataclass
class AreaSet:
    """Either explicit polygons or buffer zones of ``buffer_m`` meters.

    In buffer mode, ``centers`` maps area id to center; when empty, centers
    are derived greedily from the records (lowest id claims its buffer).
    """

    polygons: List[Tuple[str, List[Tuple[float, float]]]] = field(default_factory=list)
    buffer_m: Optional[float] = None
    centers: Dict[str, GeoPoint] = field(default_factory=dict)

    def __post_init__(self):
        if self.buffer_m is None:
            seen = set()
            checked = []
            for aid, ring in self.polygons:
                if aid in seen:
                    raise ValueError(f"duplicate area id {aid!r}")
                seen.add(aid)
                checked.append((aid, validate_ring(aid, ring)))
            self.polygons = checked
        elif not self.buffer_m > 0:
            raise ValueError("buffer_m must be positive")

    @property
    def is_buffer(self) -> bool:
        return self.buffer_m is not None

    @classmethod
    def from_dict(cls, obj: dict) -> "AreaSet":
        if "buffer_m" in obj:
            centers = {str(c["id"]): GeoPoint(c["lat"], c["lon"]) for c in obj.get("centers", [])}
            return cls(buffer_m=float(obj["buffer_m"]), centers=centers)
        return cls(polygons=[(str(a["id"]), a["ring"]) for a in obj["areas"]])

    def to_dict(self) -> dict:
        if self.is_buffer:
            out: dict = {"buffer_m": self.buffer_m}
            if self.centers:
                out["centers"] = [{"id": k, "lat": p.lat, "lon": p.lon} for k, p in self.centers.items()]
            return out
        return {"areas": [{"id": aid, "ring": [list(v) for v in ring]} for aid, ring in self.polygons]}


def buffer_centers(records: Sequence[ImageRecord], buffer_m: float) -> Dict[str, GeoPoint]:
    """Greedy cover: in id order, each unclaimed record anchors a buffer zone."""
    ordered = sorted(records, key=lambda r: r.id)
    index = build_grid_index(ordered)
    claimed = set()
    centers = {}
    for r in ordered:
        if r.id in claimed:
            continue
        centers[f"buf-{r.id}"] = r.pos
        claimed.update(radius_query(index, r.pos, buffer_m))
    return centers


def assign_area(records: Sequence[ImageRecord], areas: AreaSet) -> List[ImageRecord]:
    """Return copies of ``records`` with ``area_id`` set (or None when unmatched)."""
    out = []
    if areas.is_buffer:
        centers = areas.centers or buffer_centers(records, areas.buffer_m)
        ids = sorted(centers)
        for r in records:
            best = None
            for aid in ids:
                d = haversine_m(r.pos, centers[aid])
                if d <= areas.buffer_m and (best is None or d < best[0]):
                    best = (d, aid)
            out.append(replace(r, area_id=best[1] if best else None))
        return out
    for r in records:
        hit = None
        for aid, ring in areas.polygons:
            if point_in_ring(r.pos.lat, r.pos.lon, ring):
                hit = aid
                break
        out.append(replace(r, area_id=hit))
    return out
