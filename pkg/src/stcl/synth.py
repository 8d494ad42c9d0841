"""Synthetic city with known static, ambiance and dynamic latents.

Each capture is observed as::

    x = A @ z_loc + B @ z_area + C @ z_dyn + noise

where ``A``, ``B``, ``C`` are orthonormal blocks spanning mutually orthogonal
subspaces and the ``*_scale`` settings scale the latents. The per-area
indicator is ``y_area = w @ z_area`` and each capture carries a perception
score driven by its first dynamic latent.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List

import numpy as np

from .geo import AreaSet, GeoPoint, ImageRecord

M_PER_DEG_LAT = 111_194.93


@dataclass
class SynthConfig:
    n_areas: int = 10
    locations_per_area: int = 20
    captures_per_location: int = 4
    d_static: int = 8
    d_area: int = 4
    d_dyn: int = 8
    obs_dim: int = 32
    static_scale: float = 1.0
    area_scale: float = 1.0
    dyn_scale: float = 1.0
    noise_std: float = 0.05
    location_spacing_m: float = 50.0
    area_gap_m: float = 300.0
    jitter_m: float = 1.0
    origin_lat: float = 41.88
    origin_lon: float = -87.63
    first_year: int = 2008
    last_year: int = 2023
    seed: int = 0

    def __post_init__(self):
        for name in ("n_areas", "locations_per_area", "captures_per_location", "d_static", "d_area", "d_dyn", "obs_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.obs_dim < self.d_static + self.d_area + self.d_dyn:
            raise ValueError("obs_dim must hold the three latent subspaces")
        n_slots = 12 * (self.last_year - self.first_year + 1)
        if self.captures_per_location > n_slots:
            raise ValueError("more captures per location than distinct (year, month) slots")
        if self.jitter_m * 2 > 5.0:
            raise ValueError("jitter_m above 2.5 m can break the 5 m temporal constraint")


@dataclass
class SynthCity:
    config: SynthConfig
    records: List[ImageRecord]
    areas: AreaSet
    observations: Dict[str, np.ndarray]
    z_loc: Dict[str, np.ndarray]
    z_area: Dict[str, np.ndarray]
    z_dyn: Dict[str, np.ndarray]
    noise: Dict[str, np.ndarray]
    y_area: Dict[str, float]
    perception: Dict[str, float]
    mixing: Dict[str, np.ndarray]
    indicator_weights: np.ndarray

    @property
    def ids(self) -> List[str]:
        return [r.id for r in self.records]

    def location_of(self, record_id: str) -> str:
        return record_id.rsplit("_", 1)[0]

    def observation_matrix(self, ids=None) -> np.ndarray:
        return np.stack([self.observations[i] for i in (ids or self.ids)])

    def truth_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "indicator_weights": self.indicator_weights.tolist(),
            "y_area": self.y_area,
            "z_area": {k: v.tolist() for k, v in self.z_area.items()},
            "z_loc": {k: v.tolist() for k, v in self.z_loc.items()},
            "z_dyn": {k: v.tolist() for k, v in self.z_dyn.items()},
            "perception": self.perception,
        }


def _offset(lat: float, lon: float, north_m: float, east_m: float):
    return (
        lat + north_m / M_PER_DEG_LAT,
        lon + east_m / (M_PER_DEG_LAT * math.cos(math.radians(lat))),
    )


def generate_city(cfg: SynthConfig = SynthConfig()) -> SynthCity:
    rng = np.random.default_rng(cfg.seed)
    basis, _ = np.linalg.qr(rng.normal(size=(cfg.obs_dim, cfg.obs_dim)))
    s, a = cfg.d_static, cfg.d_area
    A = basis[:, :s]
    B = basis[:, s : s + a]
    C = basis[:, s + a : s + a + cfg.d_dyn]
    w = rng.normal(size=cfg.d_area)

    cols = int(math.ceil(math.sqrt(cfg.locations_per_area)))
    rows = int(math.ceil(cfg.locations_per_area / cols))
    area_w = (cols - 1) * cfg.location_spacing_m
    area_h = (rows - 1) * cfg.location_spacing_m
    margin = min(25.0, cfg.location_spacing_m / 2)
    pitch_e = area_w + 2 * margin + cfg.area_gap_m
    pitch_n = area_h + 2 * margin + cfg.area_gap_m
    grid = int(math.ceil(math.sqrt(cfg.n_areas)))

    slots = [(y, m) for y in range(cfg.first_year, cfg.last_year + 1) for m in range(1, 13)]
    wa = len(str(cfg.n_areas - 1))
    wl = len(str(cfg.locations_per_area - 1))
    wc = len(str(cfg.captures_per_location - 1))

    records, polygons = [], []
    obs, z_loc, z_area, z_dyn, noise, y_area, perception = {}, {}, {}, {}, {}, {}, {}
    for ai in range(cfg.n_areas):
        aid = f"area{ai:0{wa}d}"
        base_n = (ai // grid) * pitch_n
        base_e = (ai % grid) * pitch_e
        corners = [(-margin, -margin), (-margin, area_w + margin), (area_h + margin, area_w + margin), (area_h + margin, -margin)]
        ring = [list(_offset(cfg.origin_lat, cfg.origin_lon, base_n + dn, base_e + de)) for dn, de in corners]
        polygons.append((aid, ring + [ring[0]]))
        za = cfg.area_scale * rng.normal(size=cfg.d_area)
        z_area[aid] = za
        y_area[aid] = float(w @ za)
        for li in range(cfg.locations_per_area):
            loc = f"{aid}_l{li:0{wl}d}"
            zl = cfg.static_scale * rng.normal(size=cfg.d_static)
            z_loc[loc] = zl
            lat0, lon0 = _offset(
                cfg.origin_lat, cfg.origin_lon,
                base_n + (li // cols) * cfg.location_spacing_m,
                base_e + (li % cols) * cfg.location_spacing_m,
            )
            heading = float(90 * rng.integers(4))
            when = rng.choice(len(slots), size=cfg.captures_per_location, replace=False)
            for ci in range(cfg.captures_per_location):
                rid = f"{loc}_c{ci:0{wc}d}"
                r = cfg.jitter_m * math.sqrt(rng.random())
                theta = 2 * math.pi * rng.random()
                lat, lon = _offset(lat0, lon0, r * math.cos(theta), r * math.sin(theta))
                year, month = slots[when[ci]]
                records.append(ImageRecord(rid, GeoPoint(lat, lon), heading, year, month, "synth", aid))
                zd = cfg.dyn_scale * rng.normal(size=cfg.d_dyn)
                eps = rng.normal(0.0, cfg.noise_std, size=cfg.obs_dim)
                z_dyn[rid] = zd
                noise[rid] = eps
                obs[rid] = A @ zl + B @ za + C @ zd + eps
                perception[rid] = float(5.0 + 2.0 * zd[0])

    return SynthCity(
        config=cfg,
        records=records,
        areas=AreaSet(polygons=polygons),
        observations=obs,
        z_loc=z_loc,
        z_area=z_area,
        z_dyn=z_dyn,
        noise=noise,
        y_area=y_area,
        perception=perception,
        mixing={"A": A, "B": B, "C": C},
        indicator_weights=w,
    )


def render_observation(city: SynthCity, record_id: str) -> np.ndarray:
    """Stored observation for ``record_id``, re-derived from its latents as a check."""
    if record_id not in city.observations:
        raise KeyError(f"unknown record id {record_id!r}")
    area = record_id.split("_", 1)[0]
    m = city.mixing
    x = m["A"] @ city.z_loc[city.location_of(record_id)] + m["B"] @ city.z_area[area] + m["C"] @ city.z_dyn[record_id]
    x = x + city.noise[record_id]
    stored = city.observations[record_id]
    if not np.allclose(x, stored, rtol=0, atol=1e-12):
        raise RuntimeError(f"observation for {record_id!r} does not match its latents")
    return stored.copy()
