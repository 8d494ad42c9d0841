"""End-to-end comparison of self, temporal and spatial contrast on a synthetic city."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .encoder import TrainConfig, TrainResult, train_contrastive
from .evaluation import ProbeTask, RegressionTask, VprTask, aggregate_by_area, cross_validate, evaluate_vpr, train_linear_probe
from .formats import EmbeddingSet
from .geo import build_grid_index
from .losses import LossConfig
from .pairs import PairManifest, mine_self_pairs, mine_spatial_pairs, mine_temporal_pairs, subsample_pairs
from .synth import SynthCity, SynthConfig, generate_city

# Ambiance is weak next to location-specific content and transient clutter,
# so the three objectives retain visibly different factors.
HYPOTHESIS_CITY = dict(
    n_areas=150,
    locations_per_area=8,
    captures_per_location=4,
    d_static=20,
    d_area=4,
    d_dyn=8,
    obs_dim=32,
    area_scale=0.1,
    dyn_scale=1.4,
    noise_std=0.02,
)
HYPOTHESIS_EPOCHS = 40
HYPOTHESIS_PAIRS = 2700


@dataclass
class EncoderScores:
    recall_at_1: float
    area_r2: float
    probe_auc: float
    probe_accuracy: float
    final_loss: float
    initial_loss: float


@dataclass
class HypothesisReport:
    scores: Dict[str, EncoderScores]
    n_pairs: int
    results: Dict[str, TrainResult] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"n_pairs": self.n_pairs, "scores": {k: vars(v) for k, v in self.scores.items()}}


def mine_all(city: SynthCity, n_pairs: int, seed: int = 0) -> Dict[str, PairManifest]:
    """Self, temporal and spatial manifests subsampled to one shared size."""
    recs = city.records
    index = build_grid_index(recs)
    n_caps = city.config.captures_per_location
    manifests = {
        "self": mine_self_pairs(recs, len(recs), seed=seed),
        "temporal": mine_temporal_pairs(recs, index, pairs_per_location=n_caps * (n_caps - 1) // 2, seed=seed),
        "spatial": mine_spatial_pairs(recs, city.areas, pairs_per_area=len(recs), seed=seed),
    }
    n = min([n_pairs] + [len(m) for m in manifests.values()])
    return {k: subsample_pairs(m, n, seed) for k, m in manifests.items()}


def location_task(city: SynthCity, emb: EmbeddingSet) -> VprTask:
    """First capture of each location queries the remaining captures."""
    pos = {r.id: r.pos for r in city.records}
    first = f"_c{0:0{len(str(city.config.captures_per_location - 1))}d}"
    q = [i for i in emb.ids if i.endswith(first)]
    d = [i for i in emb.ids if not i.endswith(first)]
    return VprTask(emb.subset(q), [pos[i] for i in q], emb.subset(d), [pos[i] for i in d])


def score_embeddings(city: SynthCity, emb: EmbeddingSet, seed: int = 0) -> Dict[str, float]:
    recall = evaluate_vpr(location_task(city, emb), [1])["recall"]["1"]
    areas, feats = aggregate_by_area(emb, city.records)
    y = np.array([city.y_area[a] for a in areas])
    r2 = cross_validate(RegressionTask(feats, y), seed=seed).test_r2
    scores = np.array([city.perception[i] for i in emb.ids])
    probe = train_linear_probe(ProbeTask(emb.matrix, scores), seed=seed)
    return {
        "recall_at_1": recall,
        "area_r2": r2,
        "probe_auc": probe.metrics["auc"],
        "probe_accuracy": probe.metrics["accuracy"],
    }


def run_hypothesis_experiment(
    seed: int = 0,
    city_cfg: Optional[SynthConfig] = None,
    train_cfg: Optional[TrainConfig] = None,
    loss_cfg: LossConfig = LossConfig(),
    n_pairs: int = HYPOTHESIS_PAIRS,
) -> HypothesisReport:
    """Train one encoder per pair type on equal budgets and score all three tasks."""
    city = generate_city(city_cfg or SynthConfig(seed=seed, **HYPOTHESIS_CITY))
    cfg = train_cfg or TrainConfig(epochs=HYPOTHESIS_EPOCHS, seed=seed)
    manifests = mine_all(city, n_pairs, seed)
    X = city.observation_matrix()
    scores, results = {}, {}
    for kind, manifest in manifests.items():
        res = train_contrastive(manifest, city.observations, cfg, loss_cfg)
        emb = EmbeddingSet(city.ids, res.encoder.forward(X))
        s = score_embeddings(city, emb, seed)
        scores[kind] = EncoderScores(final_loss=res.epoch_loss[-1], initial_loss=res.epoch_loss[0], **s)
        results[kind] = res
    return HypothesisReport(scores, len(next(iter(manifests.values()))), results)
