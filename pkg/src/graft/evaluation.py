"""Zero-shot evaluation heads: classification, retrieval metrics, patch
segmentation with bicubic logit upsampling, and query density maps.

Everything scores unit embeddings by cosine (a plain dot product). Ties break
toward the lower class index or lexicographically smaller item id so repeated
runs produce identical rankings.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geo import GeoPoint

log = logging.getLogger(__name__)

#: Marker for pixels excluded from segmentation scoring.
IGNORE_LABEL = -1


@dataclass
class RankedResult:
    """A query's ranking: item ids ordered by non-increasing cosine score."""

    query_id: str
    item_ids: list[str]
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.item_ids) != self.scores.shape[0]:
            raise ValueError("item_ids and scores must align")
        if len(set(self.item_ids)) != len(self.item_ids):
            raise ValueError("item ids must be unique")
        if np.any(np.diff(self.scores) > 1e-12):
            raise ValueError("scores must be non-increasing")


def zero_shot_classify(image_emb: np.ndarray, class_embs: np.ndarray) -> int:
    """Argmax cosine class; exact ties go to the lowest class index."""
    class_embs = np.asarray(class_embs)
    if class_embs.shape[0] < 2:
        raise ValueError("need at least 2 classes")
    return int(np.argmax(class_embs @ np.asarray(image_emb)))


def average_precision_at_k(relevance: Sequence[int], k: int) -> float:
    """AP truncated at rank k, normalized by min(k, R).

    R is the number of relevant items in the *full* list, so a perfect
    ranking scores 1.0 even when R > k; no relevant items scores 0.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    flags = np.asarray(relevance, dtype=np.float64)
    total_relevant = int(flags.sum())
    if total_relevant == 0:
        return 0.0
    top = flags[:k]
    precision = np.cumsum(top) / (np.arange(len(top)) + 1.0)
    return float(np.sum(precision * top) / min(k, total_relevant))


def multilabel_map(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean average precision (area under the precision-recall curve).

    Per class, items are ranked by score (ties by item index) and AP is the
    mean of the precision values at each positive. Classes without a single
    positive are skipped and logged; if nothing remains, that's an error.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be (items, classes)")
    aps: list[float] = []
    skipped: list[int] = []
    for c in range(scores.shape[1]):
        positives = int(labels[:, c].sum())
        if positives == 0:
            skipped.append(c)
            continue
        order = np.argsort(-scores[:, c], kind="stable")
        rel = labels[order, c].astype(np.float64)
        precision = np.cumsum(rel) / (np.arange(len(rel)) + 1.0)
        aps.append(float(np.sum(precision * rel) / positives))
    if skipped:
        log.warning("multilabel_map: skipped %d class(es) without positives: %s",
                    len(skipped), skipped)
    if not aps:
        raise ValueError("no class has a positive label")
    return float(np.mean(aps))


def retrieve(
    query_emb: np.ndarray,
    item_ids: Sequence[str],
    item_embs: np.ndarray,
    query_id: str = "query",
) -> RankedResult:
    """Rank items by cosine against the query; ties break by ascending id."""
    item_embs = np.asarray(item_embs, dtype=np.float64)
    if len(item_ids) != item_embs.shape[0]:
        raise ValueError("item_ids and item_embs must align")
    scores = item_embs @ np.asarray(query_emb, dtype=np.float64)
    order = sorted(range(len(item_ids)), key=lambda i: (-scores[i], item_ids[i]))
    return RankedResult(
        query_id=query_id,
        item_ids=[item_ids[i] for i in order],
        scores=scores[order],
    )


def segment_patches(
    patch_embs: np.ndarray, class_embs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-patch class logits and argmax labels (lowest index wins ties)."""
    patch_embs = np.asarray(patch_embs, dtype=np.float64)
    class_embs = np.asarray(class_embs, dtype=np.float64)
    logits = patch_embs @ class_embs.T  # (..., K)
    labels = np.argmax(logits, axis=-1)
    return labels, logits


def _catmull_rom_matrix(n_in: int, factor: int) -> np.ndarray:
    """(n_in*factor, n_in) interpolation matrix; output o samples source o/factor."""
    n_out = n_in * factor
    mat = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = o / factor
        base = math.floor(src)
        t = src - base
        # Keys cubic with a = -0.5 (Catmull-Rom); exact at t == 0.
        weights = (
            -0.5 * t * (t - 1.0) ** 2,
            1.5 * t**3 - 2.5 * t**2 + 1.0,
            -1.5 * t**3 + 2.0 * t**2 + 0.5 * t,
            0.5 * t**2 * (t - 1.0),
        )
        for j, w in zip(range(base - 1, base + 3), weights):
            mat[o, min(max(j, 0), n_in - 1)] += w
    return mat


def upsample_logits(logits: np.ndarray, factor: int) -> np.ndarray:
    """Bicubic (Catmull-Rom, edge-clamped) upsampling of per-class logit grids.

    Output position (i*factor, j*factor) reproduces input (i, j) exactly, so
    source grid values survive to the fine grid. factor 1 is the identity.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError("factor must be a positive integer")
    logits = np.asarray(logits, dtype=np.float64)
    if factor == 1:
        return logits.copy()
    squeeze = logits.ndim == 2
    if squeeze:
        logits = logits[..., None]
    h, w, k = logits.shape
    rows = _catmull_rom_matrix(h, factor)
    cols = _catmull_rom_matrix(w, factor)
    out = np.tensordot(rows, logits, axes=(1, 0))  # (H_out, W, K)
    out = np.tensordot(cols, out, axes=(1, 1)).transpose(1, 0, 2)  # (H_out, W_out, K)
    return out[..., 0] if squeeze else out


def per_class_accuracy(
    pred: np.ndarray, gt: np.ndarray, ignore_label: int = IGNORE_LABEL
) -> tuple[dict[int, float], float]:
    """Accuracy per class present in the ground truth, and their mean.

    Classes absent from the ground truth do not appear at all; ignore-marked
    pixels are excluded from scoring.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} must have equal dims")
    valid = gt != ignore_label
    present = np.unique(gt[valid])
    if present.size == 0:
        raise ValueError("ground truth contains no classes to score")
    accs: dict[int, float] = {}
    for c in present:
        mask = valid & (gt == c)
        accs[int(c)] = float(np.mean(pred[mask] == c))
    return accs, float(np.mean(list(accs.values())))


@dataclass
class DensityMap:
    """Cosine scores of one text query over a geographic grid of tiles.

    `origin` is the center of cell (0, 0) (top-left, northernmost row);
    `cell_m` is the ground spacing between adjacent cell centers.
    """

    scores: np.ndarray  # (rows, cols)
    origin: GeoPoint
    cell_m: float
    query: str = ""

    def save_grid(self, path: str | Path) -> None:
        """Plain-text header (width height lat lon cell_m), then f32 scores."""
        rows, cols = self.scores.shape
        header = f"{cols} {rows} {self.origin.lat!r} {self.origin.lon!r} {self.cell_m!r}\n"
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(np.ascontiguousarray(self.scores, dtype="<f4").tobytes())

    def save_pgm(self, path: str | Path) -> None:
        """8-bit portable graymap; scores mapped [-1, 1] -> [0, 255]."""
        rows, cols = self.scores.shape
        gray = np.clip((self.scores + 1.0) * 127.5, 0, 255).astype(np.uint8)
        with open(path, "wb") as fh:
            fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
            fh.write(gray.tobytes())


def load_density_grid(path: str | Path) -> DensityMap:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    cols_s, rows_s, lat_s, lon_s, cell_s = raw[:nl].decode("ascii").split()
    cols, rows = int(cols_s), int(rows_s)
    scores = (
        np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=nl + 1)
        .reshape(rows, cols)
        .astype(np.float64)
    )
    return DensityMap(scores=scores, origin=GeoPoint(float(lat_s), float(lon_s)),
                      cell_m=float(cell_s))


def density_map(
    cell_embs: np.ndarray,
    query_emb: np.ndarray,
    origin: GeoPoint,
    cell_m: float,
    query: str = "",
) -> DensityMap:
    """Score a (rows, cols, D) grid of tile embeddings against one query."""
    cell_embs = np.asarray(cell_embs, dtype=np.float64)
    if cell_embs.ndim != 3:
        raise ValueError(f"expected (rows, cols, D) embeddings, got {cell_embs.shape}")
    scores = cell_embs @ np.asarray(query_emb, dtype=np.float64)
    return DensityMap(scores=scores, origin=origin, cell_m=cell_m, query=query)
