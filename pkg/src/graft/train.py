"""Training loop: AdamW with linear warmup and cosine decay over alignment losses.

Image-level variants contrast pooled tile embeddings against frozen ground
embeddings; the pixel-level variant anchors each pair at the patch containing
the ground image's geotag, so only patches that actually carry supervision
receive gradient. Everything is plain float64 numpy with a fixed reduction
order: identical (config, seed) runs produce bit-identical parameters.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import losses
from .corpus import PairBatch, PairedDataset, make_batches
from .encoder import (
    PARAM_NAMES,
    SatEncoderParams,
    encoder_backward,
    forward_patch_rows,
    forward_tile,
    init_params,
)
from .frozen import FrozenEncoder, embed_ground
from .geo import pixel_to_patch
from .losses import GroundGroup, LossConfig

CHECKPOINT_MAGIC = b"GRCP"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DivergenceError(RuntimeError):
    """Loss or gradient became non-finite during training."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class TrainSchedule:
    """Optimization schedule. Zero warmup_steps/total_steps mean "derive".

    total_steps == 0 is resolved by `train` to epochs x batches-per-epoch, and
    warmup_steps == 0 to 10% of the total (at least one step). The default peak
    learning rate suits the small from-scratch encoder trained here; reference
    runs that fine-tune a large pretrained backbone used 1e-5 (image level) and
    5e-5 (pixel level) instead.
    """

    peak_lr: float = 1e-3
    warmup_steps: int = 0
    total_steps: int = 0
    weight_decay: float = 1e-2
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.peak_lr < 0 or self.weight_decay < 0 or self.epochs < 0:
            raise ValueError("peak_lr, weight_decay and epochs must be non-negative")
        if self.total_steps > 0 and not (0 < self.resolved_warmup() <= self.total_steps):
            raise ValueError(
                f"need 0 < warmup_steps <= total_steps, got "
                f"{self.resolved_warmup()} vs {self.total_steps}"
            )

    def resolved_warmup(self) -> int:
        if self.warmup_steps > 0:
            return self.warmup_steps
        return max(1, self.total_steps // 10)

    def resolve(self, batches_per_epoch: int) -> "TrainSchedule":
        """Concrete schedule with total_steps pinned for this dataset."""
        total = self.total_steps or max(1, self.epochs * batches_per_epoch)
        warmup = self.warmup_steps if self.warmup_steps > 0 else max(1, total // 10)
        return TrainSchedule(
            peak_lr=self.peak_lr,
            warmup_steps=min(warmup, total),
            total_steps=total,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            seed=self.seed,
        )


def lr_at(step: int, sched: TrainSchedule) -> float:
    """Linear 0 -> peak over the warmup, then cosine decay to 0 at total_steps."""
    if not (0 <= step <= sched.total_steps):
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    warmup = sched.resolved_warmup()
    if step <= warmup:
        return sched.peak_lr * step / warmup
    progress = (step - warmup) / (sched.total_steps - warmup)
    return sched.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: SatEncoderParams) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.arrays().items()},
            v={k: np.zeros_like(a) for k, a in params.arrays().items()},
        )

    def copy(self) -> "AdamWState":
        return AdamWState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            t=self.t,
        )


def adamw_update(
    params: SatEncoderParams,
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
) -> None:
    """One decoupled-weight-decay adaptive-moment step, in place."""
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    for name in PARAM_NAMES:
        g = grads[name]
        p = getattr(params, name)
        state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p -= lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS) + weight_decay * p)


def batch_ground_groups(batch: PairBatch, frozen: FrozenEncoder) -> list[GroundGroup]:
    """Frozen embeddings of every ground image in the batch, grouped per tile."""
    return [
        GroundGroup.from_embeddings(
            np.stack([embed_ground(frozen, g.embedding_ref) for g in tile_grounds])
        )
        for tile_grounds in batch.grounds
    ]


def _image_level_backward(
    params: SatEncoderParams,
    batch: PairBatch,
    groups: list[GroundGroup],
    cfg: LossConfig,
) -> tuple[float, dict[str, np.ndarray]]:
    caches = []
    sat_embs = np.empty((batch.n_tiles, params.embed_dim))
    for i, tile in enumerate(batch.tiles):
        _, image_emb, cache = forward_tile(params, tile.patch_features)
        sat_embs[i] = image_emb
        caches.append(cache)

    if cfg.variant == "image_default":
        value, d_sat = losses.image_loss(sat_embs, groups, cfg.tau)
    elif cfg.variant == "sum_prob":
        value, d_sat = losses.loss_sum_prob(sat_embs, groups, cfg.tau)
    elif cfg.variant == "avg_rep":
        value, d_sat = losses.loss_avg_rep(sat_embs, groups, cfg.tau)
    elif cfg.variant == "l2":
        value, d_sat = losses.loss_l2(sat_embs, groups)
    else:  # pragma: no cover - guarded by LossConfig
        raise ValueError(f"not an image-level variant: {cfg.variant}")

    grads = {k: np.zeros_like(a) for k, a in params.arrays().items()}
    for i, cache in enumerate(caches):
        g = encoder_backward(params, cache, d_patch_embs=None, d_image_emb=d_sat[i])
        for k in grads:
            grads[k] += g[k]
    return value, grads


def _pixel_level_backward(
    params: SatEncoderParams,
    batch: PairBatch,
    groups: list[GroundGroup],
    cfg: LossConfig,
) -> tuple[float, dict[str, np.ndarray]]:
    # Only patches containing at least one ground image are forwarded; all
    # other patches receive no gradient by construction.
    grid = batch.tiles[0].spec.grid_px
    anchor_rows: list[np.ndarray] = []
    tile_infos = []
    for tile, tile_pixels in zip(batch.tiles, batch.pixels):
        flat = tile.patch_features.reshape(grid * grid, -1)
        rows = [
            pixel_to_patch(px, tile.spec.patch_px).prow * grid
            + pixel_to_patch(px, tile.spec.patch_px).pcol
            for px in tile_pixels
        ]
        uniq, inverse = np.unique(np.array(rows), return_inverse=True)
        embs, cache = forward_patch_rows(params, flat[uniq])
        anchor_rows.append(embs[inverse])
        tile_infos.append((cache, inverse, len(uniq)))

    anchors = np.concatenate(anchor_rows, axis=0)
    value, d_anchors = losses.pixel_loss_anchors(anchors, groups, cfg.tau)

    grads = {k: np.zeros_like(a) for k, a in params.arrays().items()}
    offset = 0
    for cache, inverse, n_uniq in tile_infos:
        n_pairs = len(inverse)
        d_rows = np.zeros((n_uniq, params.embed_dim))
        np.add.at(d_rows, inverse, d_anchors[offset : offset + n_pairs])
        offset += n_pairs
        g = encoder_backward(params, cache, d_patch_embs=d_rows, d_image_emb=None)
        for k in grads:
            grads[k] += g[k]
    return value, grads


def loss_and_param_grads(
    params: SatEncoderParams,
    batch: PairBatch,
    frozen: FrozenEncoder,
    cfg: LossConfig,
) -> tuple[float, dict[str, np.ndarray]]:
    """Forward the batch through the encoder and the configured loss; full grads."""
    groups = batch_ground_groups(batch, frozen)
    if cfg.variant == "pixel_default":
        return _pixel_level_backward(params, batch, groups, cfg)
    return _image_level_backward(params, batch, groups, cfg)


def train_step(
    params: SatEncoderParams,
    batch: PairBatch,
    frozen: FrozenEncoder,
    cfg: LossConfig,
    sched: TrainSchedule,
    step: int,
    state: Optional[AdamWState] = None,
) -> tuple[SatEncoderParams, float]:
    """One optimizer step at lr_at(step); returns updated params and the loss.

    Functional: the input params are untouched. `state` (adaptive moments) is
    updated in place when provided, fresh-zero otherwise.
    """
    value, grads = loss_and_param_grads(params, batch, frozen, cfg)
    if not math.isfinite(value):
        raise DivergenceError(step, f"non-finite loss {value}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(step, f"non-finite gradient in {name}")
    new_params = params.copy()
    if state is None:
        state = AdamWState.zeros_like(params)
    adamw_update(new_params, grads, state, lr_at(step, sched), sched.weight_decay)
    if not new_params.check_finite():
        raise DivergenceError(step, "non-finite parameters after update")
    return new_params, value


@dataclass
class TrainResult:
    params: SatEncoderParams
    epoch_mean_loss: list[float]
    provenance: dict


def config_digest(cfg: LossConfig, sched: TrainSchedule, extra: dict | None = None) -> str:
    payload = {
        "loss": {"tau": cfg.tau, "variant": cfg.variant},
        "schedule": {
            "peak_lr": sched.peak_lr,
            "warmup_steps": sched.warmup_steps,
            "total_steps": sched.total_steps,
            "weight_decay": sched.weight_decay,
            "epochs": sched.epochs,
            "seed": sched.seed,
        },
        "extra": extra or {},
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def train(
    ds: PairedDataset,
    frozen: FrozenEncoder,
    cfg: LossConfig,
    sched: TrainSchedule,
    batch_size: int = 32,
    hidden_dim: int = 32,
) -> TrainResult:
    """Train the satellite encoder on a paired dataset.

    Runs sched.epochs passes; each epoch reshuffles tiles with a seed derived
    from (sched.seed, epoch). With zero epochs the seeded initialization is
    returned untouched.
    """
    if not ds.tiles:
        raise ValueError("cannot train on an empty dataset")
    feature_dim = ds.tiles[0].feature_dim
    n_patches = ds.tiles[0].spec.grid_px ** 2
    params = init_params(feature_dim, hidden_dim, frozen.dim, n_patches, seed=sched.seed)

    batches_per_epoch = len(make_batches(ds, batch_size, seed=_epoch_seed(sched.seed, 0)))
    sched = sched.resolve(batches_per_epoch)
    state = AdamWState.zeros_like(params)
    history: list[float] = []
    step = 0
    for epoch in range(sched.epochs):
        batches = make_batches(ds, batch_size, seed=_epoch_seed(sched.seed, epoch))
        epoch_losses = []
        for batch in batches:
            step += 1
            params, value = train_step(params, batch, frozen, cfg, sched,
                                       min(step, sched.total_steps), state)
            epoch_losses.append(value)
        history.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))

    provenance = {
        "seed": sched.seed,
        "config_digest": config_digest(cfg, sched, {"batch_size": batch_size,
                                                    "hidden_dim": hidden_dim}),
        "loss_variant": cfg.variant,
        "epochs": sched.epochs,
        "steps": step,
        "n_tiles": len(ds.tiles),
    }
    return TrainResult(params=params, epoch_mean_loss=history, provenance=provenance)


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, 0xE70C, epoch]).generate_state(1)[0])


def save_checkpoint(path: str | Path, params: SatEncoderParams, provenance: dict) -> None:
    """Versioned binary checkpoint: parameter tensors as f64 plus provenance."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        arrays = params.arrays()
        fh.write(struct.pack("<I", len(arrays)))
        for name in PARAM_NAMES:
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())
        prov = json.dumps(provenance, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(prov)))
        fh.write(prov)


def load_checkpoint(path: str | Path) -> tuple[SatEncoderParams, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {data[:4]!r}")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 6
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = tuple(
            struct.unpack_from("<I", data, off + 4 * i)[0] for i in range(ndim)
        )
        off += 4 * ndim
        n_items = int(np.prod(shape)) if shape else 1
        arrays[name] = (
            np.frombuffer(data, dtype="<f8", count=n_items, offset=off)
            .reshape(shape)
            .copy()
        )
        off += 8 * n_items
    (plen,) = struct.unpack_from("<I", data, off)
    off += 4
    provenance = json.loads(data[off : off + plen].decode("utf-8"))
    missing = set(PARAM_NAMES) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint missing parameter tensors: {sorted(missing)}")
    return SatEncoderParams(**{k: arrays[k] for k in PARAM_NAMES}), provenance
