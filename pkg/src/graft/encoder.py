"""Trainable satellite encoder: per-patch two-layer MLP into the frozen space.

Each raster patch's raw feature vector is mapped F -> H -> D through a tanh
hidden layer; the per-patch embedding is the L2-normalized output. The
image-level embedding pools the *pre-normalization* patch outputs with learned
softmax weights (uniform at init) and normalizes the pooled vector. Both
normalizations are part of the forward map and are differentiated through in
the manual backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

PARAM_NAMES = ("w1", "b1", "w2", "b2", "pool_logits")

_NORM_FLOOR = 1e-12


@dataclass
class SatEncoderParams:
    w1: np.ndarray  # (H, F)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (D, H)
    b2: np.ndarray  # (D,)
    pool_logits: np.ndarray  # (n_patches,)

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w2.shape[0]

    @property
    def n_patches(self) -> int:
        return self.pool_logits.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "SatEncoderParams":
        return SatEncoderParams(**{k: v.copy() for k, v in self.arrays().items()})

    def check_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())


def init_params(
    feature_dim: int, hidden_dim: int, embed_dim: int, n_patches: int, seed: int = 0
) -> SatEncoderParams:
    """Seeded init: fan-in scaled gaussian weights, zero biases, uniform pooling."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A7E]))
    return SatEncoderParams(
        w1=rng.standard_normal((hidden_dim, feature_dim)) / np.sqrt(feature_dim),
        b1=np.zeros(hidden_dim),
        w2=rng.standard_normal((embed_dim, hidden_dim)) / np.sqrt(hidden_dim),
        b2=np.zeros(embed_dim),
        pool_logits=np.zeros(n_patches),
    )


@dataclass
class ForwardCache:
    """Intermediates of a full forward pass, consumed by encoder_backward."""

    x: np.ndarray  # (P, F)
    h: np.ndarray  # (P, H) post-tanh
    y: np.ndarray  # (P, D) pre-normalization patch outputs
    y_norms: np.ndarray  # (P,)
    patch_embs: np.ndarray  # (P, D) unit rows
    alpha: Optional[np.ndarray] = None  # (P,) pooling weights
    y_img: Optional[np.ndarray] = None  # (D,)
    img_norm: Optional[float] = None
    image_emb: Optional[np.ndarray] = None  # (D,) unit


def _normalize_rows(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(y, axis=-1)
    if np.any(norms < _NORM_FLOOR):
        raise ValueError("patch output collapsed to zero norm; cannot normalize")
    return y / norms[..., None], norms


def _forward_rows(params: SatEncoderParams, x: np.ndarray) -> ForwardCache:
    if x.ndim != 2 or x.shape[1] != params.feature_dim:
        raise ValueError(
            f"features shape {x.shape} incompatible with feature_dim {params.feature_dim}"
        )
    h = np.tanh(x @ params.w1.T + params.b1)
    y = h @ params.w2.T + params.b2
    patch_embs, y_norms = _normalize_rows(y)
    return ForwardCache(x=x, h=h, y=y, y_norms=y_norms, patch_embs=patch_embs)


def forward_patch_rows(
    params: SatEncoderParams, features_rows: np.ndarray
) -> tuple[np.ndarray, ForwardCache]:
    """Embed a subset of patches (rows of raw features); no pooling involved."""
    cache = _forward_rows(params, np.asarray(features_rows, dtype=np.float64))
    return cache.patch_embs, cache


def forward_tile(
    params: SatEncoderParams, patch_features: np.ndarray
) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Full tile forward, also returning the cache for a backward pass."""
    grid = np.asarray(patch_features, dtype=np.float64)
    if grid.ndim != 3:
        raise ValueError(f"expected (G, G, F) feature grid, got shape {grid.shape}")
    g0, g1, _ = grid.shape
    if g0 * g1 != params.n_patches:
        raise ValueError(
            f"grid has {g0 * g1} patches but params pool over {params.n_patches}"
        )
    cache = _forward_rows(params, grid.reshape(g0 * g1, -1))

    logits = params.pool_logits - np.max(params.pool_logits)
    alpha = np.exp(logits)
    alpha /= alpha.sum()
    y_img = alpha @ cache.y
    img_norm = float(np.linalg.norm(y_img))
    if img_norm < _NORM_FLOOR:
        raise ValueError("pooled image output collapsed to zero norm")
    image_emb = y_img / img_norm

    cache.alpha = alpha
    cache.y_img = y_img
    cache.img_norm = img_norm
    cache.image_emb = image_emb
    return cache.patch_embs.reshape(g0, g1, -1), image_emb, cache


def encoder_forward(
    params: SatEncoderParams, tile_or_features
) -> tuple[np.ndarray, np.ndarray]:
    """Embed one tile: (G, G, D) grid of unit patch embeddings, unit image embedding.

    Accepts a satellite tile record or its raw (G, G, F) feature grid directly.
    """
    features = getattr(tile_or_features, "patch_features", tile_or_features)
    patch_embs, image_emb, _ = forward_tile(params, features)
    return patch_embs, image_emb


def _normalize_backprop(unit_vec: np.ndarray, norm, d_unit: np.ndarray) -> np.ndarray:
    """d(loss)/d(raw) given d(loss)/d(raw/|raw|): project out the radial part."""
    radial = np.sum(unit_vec * d_unit, axis=-1, keepdims=True)
    return (d_unit - radial * unit_vec) / np.asarray(norm)[..., None]


def encoder_backward(
    params: SatEncoderParams,
    cache: ForwardCache,
    d_patch_embs: Optional[np.ndarray] = None,
    d_image_emb: Optional[np.ndarray] = None,
) -> dict[str, np.ndarray]:
    """Parameter gradients from upstream gradients on the unit embeddings.

    `d_patch_embs` is (P, D) aligned with the cache's flattened patch rows (a
    (G, G, D) grid is accepted and flattened); either upstream gradient may be
    omitted. Pooling gradients require a cache produced by encoder_forward.
    """
    d_y = np.zeros_like(cache.y)
    if d_patch_embs is not None:
        d_patch = np.asarray(d_patch_embs, dtype=np.float64).reshape(cache.y.shape)
        d_y += _normalize_backprop(cache.patch_embs, cache.y_norms, d_patch)

    d_pool = np.zeros_like(params.pool_logits)
    if d_image_emb is not None:
        if cache.alpha is None:
            raise ValueError("cache has no pooling intermediates; use encoder_forward")
        d_y_img = _normalize_backprop(cache.image_emb, cache.img_norm, d_image_emb)
        d_y += cache.alpha[:, None] * d_y_img
        d_alpha = cache.y @ d_y_img
        d_pool = cache.alpha * (d_alpha - float(cache.alpha @ d_alpha))

    d_w2 = d_y.T @ cache.h
    d_b2 = d_y.sum(axis=0)
    d_h = d_y @ params.w2
    d_h_pre = d_h * (1.0 - cache.h * cache.h)
    d_w1 = d_h_pre.T @ cache.x
    d_b1 = d_h_pre.sum(axis=0)
    return {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2, "pool_logits": d_pool}
