"""Positive-pair mining for self, temporal and spatial contrast."""

from __future__ import annotations

import itertools
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geo import AreaSet, GridIndex, ImageRecord, assign_area, build_grid_index, check_unique_ids, haversine_m, radius_query

logger = logging.getLogger(__name__)

PAIR_TYPES = ("self", "temporal", "spatial")


@dataclass(frozen=True)
class PosPair:
    pair_type: str
    id_a: str
    id_b: str
    dist_m: float
    same_heading: bool
    year_a: int = 0
    year_b: int = 0
    heading_a: float = 0.0
    heading_b: float = 0.0

    def __post_init__(self):
        if self.pair_type not in PAIR_TYPES:
            raise ValueError(f"unknown pair type {self.pair_type!r}")


@dataclass
class PairManifest:
    pairs: List[PosPair]
    seed: int
    source_dataset: str = ""
    constraint_summary: Dict[str, object] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def pair_type(self) -> Optional[str]:
        types = {p.pair_type for p in self.pairs}
        return types.pop() if len(types) == 1 else None


def heading_key(heading_deg: float) -> int:
    return int(round(heading_deg)) % 360


def same_heading(h1: float, h2: float, tolerance_deg: float = 0.0) -> bool:
    """Headings rounded to whole degrees, compared on the circle."""
    d = abs(heading_key(h1) - heading_key(h2)) % 360
    return min(d, 360 - d) <= tolerance_deg


def _make_pair(kind: str, a: ImageRecord, b: ImageRecord, tol: float = 0.0) -> PosPair:
    return PosPair(
        pair_type=kind,
        id_a=a.id,
        id_b=b.id,
        dist_m=haversine_m(a.pos, b.pos),
        same_heading=same_heading(a.heading_deg, b.heading_deg, tol),
        year_a=a.capture_year,
        year_b=b.capture_year,
        heading_a=a.heading_deg,
        heading_b=b.heading_deg,
    )


def _group_rng(seed: int, group: int) -> np.random.Generator:
    # one stream per group keeps output independent of processing order
    return np.random.default_rng([int(seed), int(group)])


def _draw(candidates: list, k: int, rng: np.random.Generator) -> list:
    if k >= len(candidates):
        idx = rng.permutation(len(candidates))
    else:
        idx = rng.choice(len(candidates), size=k, replace=False)
    return [candidates[i] for i in idx]


def temporal_candidates(
    records: Sequence[ImageRecord],
    index: Optional[GridIndex] = None,
    max_dist_m: float = 5.0,
    heading_tolerance_deg: float = 0.0,
) -> List[Tuple[str, str]]:
    """All unordered ``(id_a, id_b)`` with ``id_a < id_b`` that qualify as temporal positives."""
    by_id = {r.id: r for r in records}
    if index is None:
        index = build_grid_index(records)
    out = []
    for r in sorted(records, key=lambda r: r.id):
        for other in radius_query(index, r.pos, max_dist_m):
            if other <= r.id:
                continue
            o = by_id[other]
            if o.capture_time != r.capture_time and same_heading(r.heading_deg, o.heading_deg, heading_tolerance_deg):
                out.append((r.id, other))
    out.sort()
    return out


def location_clusters(records: Sequence[ImageRecord], index: GridIndex, max_dist_m: float = 5.0) -> Dict[str, str]:
    """Map record id to the anchor id of its location cluster.

    Records are visited in id order; an unclaimed record anchors a cluster
    and claims every unclaimed record within ``max_dist_m``.
    """
    anchor: Dict[str, str] = {}
    for r in sorted(records, key=lambda r: r.id):
        if r.id in anchor:
            continue
        for other in radius_query(index, r.pos, max_dist_m):
            anchor.setdefault(other, r.id)
    return anchor


def mine_temporal_pairs(
    records: Sequence[ImageRecord],
    index: Optional[GridIndex] = None,
    max_dist_m: float = 5.0,
    pairs_per_location: int = 1,
    seed: int = 0,
    heading_tolerance_deg: float = 0.0,
    source_dataset: str = "",
) -> PairManifest:
    """Same place, same heading, different (year, month) captures.

    Candidate pairs are grouped by (location anchor, heading) and
    ``pairs_per_location`` of them are drawn per group without replacement.
    """
    check_unique_ids(records)
    if index is None:
        index = build_grid_index(records)
    by_id = {r.id: r for r in records}
    anchors = location_clusters(records, index, max_dist_m)
    groups: Dict[Tuple[str, int], list] = defaultdict(list)
    for a, b in temporal_candidates(records, index, max_dist_m, heading_tolerance_deg):
        groups[(anchors[a], heading_key(by_id[a].heading_deg))].append((a, b))

    n_locations = len({(anchors[r.id], heading_key(r.heading_deg)) for r in records})
    pairs = []
    for g, key in enumerate(sorted(groups)):
        for a, b in _draw(groups[key], pairs_per_location, _group_rng(seed, g)):
            pairs.append(_make_pair("temporal", by_id[a], by_id[b], heading_tolerance_deg))
    summary = {
        "max_dist_m": max_dist_m,
        "heading_tolerance_deg": heading_tolerance_deg,
        "pairs_per_location": pairs_per_location,
        "time_granularity": "year-month",
        "groups_with_pairs": len(groups),
        "groups_skipped": n_locations - len(groups),
    }
    return PairManifest(pairs, seed, source_dataset, summary)


def mine_spatial_pairs(
    records: Sequence[ImageRecord],
    areas: Optional[AreaSet] = None,
    pairs_per_area: int = 1,
    max_year_gap: Optional[int] = None,
    seed: int = 0,
    source_dataset: str = "",
) -> PairManifest:
    """Two distinct captures from one urban area, heading unconstrained.

    Without ``areas`` the records' existing ``area_id`` values are used.
    """
    check_unique_ids(records)
    if areas is not None:
        records = assign_area(records, areas)
    members: Dict[str, List[ImageRecord]] = defaultdict(list)
    for r in records:
        if r.area_id is not None:
            members[r.area_id].append(r)

    pairs = []
    skipped = 0
    for g, aid in enumerate(sorted(members)):
        group = sorted(members[aid], key=lambda r: r.id)
        cands = [
            (a, b)
            for a, b in itertools.combinations(group, 2)
            if max_year_gap is None or abs(a.capture_year - b.capture_year) <= max_year_gap
        ]
        if not cands:
            skipped += 1
            continue
        for a, b in _draw(cands, pairs_per_area, _group_rng(seed, g)):
            pairs.append(_make_pair("spatial", a, b))
    if skipped:
        logger.info("skipped %d areas without a valid pair", skipped)
    summary = {
        "pairs_per_area": pairs_per_area,
        "max_year_gap": max_year_gap,
        "area_mode": "records" if areas is None else ("buffer" if areas.is_buffer else "polygon"),
        "buffer_m": None if areas is None else areas.buffer_m,
        "areas_with_pairs": len(members) - skipped,
        "areas_skipped": skipped,
        "unassigned_records": sum(r.area_id is None for r in records),
    }
    return PairManifest(pairs, seed, source_dataset, summary)


def mine_self_pairs(records: Sequence[ImageRecord], count: int, seed: int = 0, source_dataset: str = "") -> PairManifest:
    check_unique_ids(records)
    if count < 0 or count > len(records):
        raise ValueError(f"count {count} exceeds dataset size {len(records)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(records), size=count, replace=False)
    pairs = [_make_pair("self", records[i], records[i]) for i in idx]
    return PairManifest(pairs, seed, source_dataset, {"count": count})


def subsample_pairs(manifest: PairManifest, target_count: int, seed: int = 0) -> PairManifest:
    if target_count < 0 or target_count > len(manifest):
        raise ValueError(f"target_count {target_count} exceeds manifest size {len(manifest)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(manifest), size=target_count, replace=False)
    summary = dict(manifest.constraint_summary, subsampled_from=len(manifest), subsample_seed=seed)
    return PairManifest([manifest.pairs[i] for i in idx], manifest.seed, manifest.source_dataset, summary)


def audit_manifest(
    manifest: PairManifest,
    records: Sequence[ImageRecord],
    max_dist_m: float = 5.0,
    heading_tolerance_deg: float = 0.0,
) -> List[str]:
    """Re-check every pair against the raw records; return violation messages.

    Spatial pairs are checked against the records' ``area_id`` field, so
    pass records with areas assigned.
    """
    by_id = {r.id: r for r in records}
    problems = []
    seen = set()
    for n, p in enumerate(manifest.pairs):
        if p.id_a not in by_id or p.id_b not in by_id:
            problems.append(f"pair {n}: unknown id")
            continue
        a, b = by_id[p.id_a], by_id[p.id_b]
        key = (p.pair_type,) + tuple(sorted((p.id_a, p.id_b)))
        if key in seen:
            problems.append(f"pair {n}: duplicate {key}")
        seen.add(key)
        if p.pair_type == "self":
            if p.id_a != p.id_b:
                problems.append(f"pair {n}: self pair with distinct ids")
        elif p.pair_type == "temporal":
            if haversine_m(a.pos, b.pos) > max_dist_m:
                problems.append(f"pair {n}: {p.id_a}/{p.id_b} farther than {max_dist_m} m")
            if not same_heading(a.heading_deg, b.heading_deg, heading_tolerance_deg):
                problems.append(f"pair {n}: {p.id_a}/{p.id_b} heading mismatch")
            if a.capture_time == b.capture_time:
                problems.append(f"pair {n}: {p.id_a}/{p.id_b} same capture time")
        else:
            if p.id_a == p.id_b:
                problems.append(f"pair {n}: spatial pair with identical ids")
            if a.area_id is None or a.area_id != b.area_id:
                problems.append(f"pair {n}: {p.id_a}/{p.id_b} not in one area")
    return problems
