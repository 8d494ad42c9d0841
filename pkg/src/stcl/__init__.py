"""Spatiotemporal contrastive learning toolkit for street-view style data."""

from .analysis import attention_distance, delta_log_amplitude, retrieve_topk
from .encoder import ContrastiveEncoder, ToyEncoder, TrainConfig, encoder_forward, lr_at_step, train_contrastive
from .evaluation import (
    LassoRegressor,
    LinearProbe,
    ProbeTask,
    RegressionTask,
    VprTask,
    aggregate_by_area,
    classification_metrics,
    cross_validate,
    lasso_fit,
    r2_score,
    recall_at_k,
    train_linear_probe,
)
from .formats import EmbeddingSet, load_embeddings, load_metadata, save_embeddings, save_metadata
from .geo import AreaSet, GeoPoint, GridIndex, ImageRecord, assign_area, build_grid_index, haversine_m, radius_query
from .losses import LossConfig, infonce_batch, infonce_grad, infonce_loss, l2_normalize
from .pairs import PairManifest, PosPair, mine_self_pairs, mine_spatial_pairs, mine_temporal_pairs, subsample_pairs
from .synth import SynthCity, SynthConfig, generate_city, render_observation

__version__ = "0.1.0"
