"""Toy MLP encoder trained with in-batch InfoNCE and AdamW."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .losses import LossConfig, infonce_grad, l2_normalize


class ToyEncoder:
    """Fully connected tanh network with a linear head and unit-norm output.

    ``weights[i]`` has shape ``(fan_in, fan_out)``.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: fan-in {w.shape[0]} does not match previous layer")

    @classmethod
    def init(cls, input_dim: int, hidden: Sequence[int] = (256, 128), out_dim: int = 64, seed: int = 0) -> "ToyEncoder":
        rng = np.random.default_rng(seed)
        sizes = [input_dim, *hidden, out_dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            std = math.sqrt(2.0 / (fan_in + fan_out))
            weights.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def identity(cls, dim: int) -> "ToyEncoder":
        return cls([np.eye(dim)], [np.zeros(dim)])

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_sizes(self) -> List[int]:
        return [self.input_dim] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        pos = 0
        for p in self.params():
            p[...] = flat[pos : pos + p.size].reshape(p.shape)
            pos += p.size

    def copy(self) -> "ToyEncoder":
        return ToyEncoder([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def _forward(self, x: np.ndarray):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        return acts

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"input dimension {x.shape[-1]} != encoder input {self.input_dim}")
        return l2_normalize(self._forward(np.atleast_2d(x))[-1]).reshape(x.shape[:-1] + (self.output_dim,))

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> List[np.ndarray]:
        """Parameter gradients given ``dL/d(normalized output)`` for rows of ``x``.

        Returned in the order of :meth:`params`.
        """
        acts = self._forward(x)
        h = acts[-1]
        norm = np.linalg.norm(h, axis=1, keepdims=True)
        z = h / norm
        delta = (grad_out - z * np.sum(z * grad_out, axis=1, keepdims=True)) / norm
        grads: List[np.ndarray] = []
        for i in range(len(self.weights) - 1, -1, -1):
            grads = [acts[i].T @ delta, delta.sum(axis=0)] + grads
            if i:
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        return grads


def encoder_forward(enc: ToyEncoder, x) -> np.ndarray:
    return enc.forward(x)


def pair_loss_and_grads(enc: ToyEncoder, x_a: np.ndarray, x_b: np.ndarray, loss_cfg: LossConfig):
    """In-batch InfoNCE of encoded views and its gradient w.r.t. every parameter."""
    x = np.concatenate([x_a, x_b])
    z = enc.forward(x)
    n = len(x_a)
    loss, g_q, g_k = infonce_grad(z[:n], z[n:], loss_cfg)
    return loss, enc.backward(x, np.concatenate([g_q, g_k]))


# --------------------------------------------------------------------------
# Schedule and optimizer
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Optimisation settings; defaults are the desk-scale profile.

    :meth:`full_scale` returns the large-batch ViT profile (batch 1024, lr 6e-6,
    weight decay 1e-6, 300 epochs with 40 warmup).
    """

    batch_size: int = 128
    base_lr: float = 1e-3
    weight_decay: float = 1e-6
    epochs: int = 50
    warmup_epochs: int = 5
    seed: int = 0
    hidden: Tuple[int, ...] = (256, 128)
    embed_dim: int = 64
    noise_std: float = 0.1
    mask_frac: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need epochs >= 1 and 0 <= warmup_epochs < epochs")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not (self.base_lr > 0 and self.weight_decay >= 0):
            raise ValueError("learning rate must be positive and weight decay non-negative")
        if not 0 <= self.mask_frac < 1 or self.noise_std < 0:
            raise ValueError("invalid augmentation settings")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(batch_size=1024, base_lr=6e-6, weight_decay=1e-6, epochs=300, warmup_epochs=40)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def lr_at_step(cfg: TrainConfig, epoch: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine decay to 0."""
    epoch = min(max(float(epoch), 0.0), float(cfg.epochs))
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * epoch / cfg.warmup_epochs
    frac = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    def __init__(self, params: List[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: List[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def augment(x: np.ndarray, rng: np.random.Generator, noise_std: float, mask_frac: float) -> np.ndarray:
    """Gaussian jitter plus random coordinate dropout."""
    out = x + rng.normal(0.0, noise_std, size=x.shape)
    if mask_frac > 0:
        out = out * (rng.random(x.shape) >= mask_frac)
    return out


@dataclass
class TrainResult:
    encoder: ToyEncoder
    epoch_loss: List[float]
    step_loss: List[float] = field(default_factory=list)


def fit_pairs(
    X: np.ndarray,
    pairs: np.ndarray,
    augment_mask: Optional[np.ndarray],
    cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    encoder: Optional[ToyEncoder] = None,
) -> TrainResult:
    """Train on row-index pairs of ``X``; rows flagged in ``augment_mask`` get two augmented views."""
    X = np.asarray(X, dtype=np.float64)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) < 2:
        raise ValueError("need at least 2 pairs to form in-batch negatives")
    if augment_mask is None:
        augment_mask = np.zeros(len(pairs), dtype=bool)
    augment_mask = np.asarray(augment_mask, dtype=bool)

    rng = np.random.default_rng(cfg.seed)
    enc = encoder.copy() if encoder is not None else ToyEncoder.init(X.shape[1], cfg.hidden, cfg.embed_dim, seed=cfg.seed)
    opt = AdamW(enc.params(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    bs = min(cfg.batch_size, len(pairs))
    batches_per_epoch = max(1, -(-len(pairs) // bs))
    epoch_loss, step_loss = [], []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for b in range(batches_per_epoch):
            sel = order[b * bs : (b + 1) * bs]
            if len(sel) < 2:
                continue
            xa, xb = X[pairs[sel, 0]], X[pairs[sel, 1]]
            aug = augment_mask[sel]
            if aug.any():
                xa, xb = xa.copy(), xb.copy()
                xa[aug] = augment(xa[aug], rng, cfg.noise_std, cfg.mask_frac)
                xb[aug] = augment(xb[aug], rng, cfg.noise_std, cfg.mask_frac)
            loss, grads = pair_loss_and_grads(enc, xa, xb, loss_cfg)
            opt.step(grads, lr_at_step(cfg, epoch + b / batches_per_epoch))
            losses.append(loss)
            step_loss.append(loss)
        epoch_loss.append(float(np.mean(losses)))
    return TrainResult(enc, epoch_loss, step_loss)


def train_contrastive(
    manifest,
    observations: Mapping[str, np.ndarray],
    cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
) -> TrainResult:
    """Train a fresh encoder on a :class:`~stcl.pairs.PairManifest`."""
    ids = sorted({i for p in manifest.pairs for i in (p.id_a, p.id_b)})
    for i in ids:
        if i not in observations:
            raise ValueError(f"no observation for id {i!r}")
    row = {i: n for n, i in enumerate(ids)}
    X = np.stack([np.asarray(observations[i], dtype=np.float64) for i in ids])
    pairs = np.array([(row[p.id_a], row[p.id_b]) for p in manifest.pairs])
    aug = np.array([p.pair_type == "self" for p in manifest.pairs])
    return fit_pairs(X, pairs, aug, cfg, loss_cfg)


class ContrastiveEncoder(TransformerMixin, BaseEstimator):
    """Contrastive MLP embedding as a scikit-learn transformer.

    ``fit(X)`` without pairs trains self-contrast on augmented views of
    every row; ``fit(X, pairs=...)`` trains on the given row-index pairs.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Widths of the tanh hidden layers.
    n_components : int
        Embedding dimension.
    temperature : float
        InfoNCE temperature.
    max_epochs, batch_size, learning_rate, weight_decay, warmup_epochs
        Optimiser schedule, see :class:`TrainConfig`.
    noise_std, mask_frac : float
        Augmentation for self pairs.
    random_state : int
    """

    def __init__(
        self,
        hidden_layer_sizes=(256, 128),
        n_components=64,
        temperature=0.2,
        symmetrized=True,
        batch_size=128,
        max_epochs=50,
        learning_rate=1e-3,
        weight_decay=1e-6,
        warmup_epochs=5,
        noise_std=0.1,
        mask_frac=0.2,
        random_state=0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.n_components = n_components
        self.temperature = temperature
        self.symmetrized = symmetrized
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.noise_std = noise_std
        self.mask_frac = mask_frac
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            base_lr=self.learning_rate,
            weight_decay=self.weight_decay,
            epochs=self.max_epochs,
            warmup_epochs=self.warmup_epochs,
            seed=self.random_state,
            hidden=tuple(self.hidden_layer_sizes),
            embed_dim=self.n_components,
            noise_std=self.noise_std,
            mask_frac=self.mask_frac,
        )

    def fit(self, X, y=None, pairs=None, augment_mask=None):
        X = check_array(X, dtype=np.float64)
        if pairs is None:
            pairs = np.repeat(np.arange(len(X))[:, None], 2, axis=1)
            augment_mask = np.ones(len(X), dtype=bool)
        else:
            pairs = np.asarray(pairs, dtype=np.int64)
            if pairs.ndim != 2 or pairs.shape[1] != 2 or pairs.min() < 0 or pairs.max() >= len(X):
                raise ValueError("pairs must be an (m, 2) array of row indices into X")
        result = fit_pairs(
            X, pairs, augment_mask, self.train_config(), LossConfig(self.temperature, self.symmetrized)
        )
        self.encoder_ = result.encoder
        self.loss_curve_ = result.epoch_loss
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        X = check_array(X, dtype=np.float64)
        return self.encoder_.forward(X)
