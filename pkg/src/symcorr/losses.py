"""Training objectives: pixelwise contrastive (PCL), its symmetric variant (SPCL),
and the distributional Gaussian-mixture objective (MMGSD).

Pixel coordinates are integer ``(row, col)`` pairs. Descriptor volumes are
``Tensor`` objects of shape (H, W, D) or plain arrays for the non-differentiable
helpers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .synthgen import CorrespondencePair, Entry


@dataclass
class ContrastiveConfig:
    margin: float = 0.5
    matches_per_pair: int = 32
    nonmatches_per_match: int = 10
    exclusion_radius: float = 2.0

    def validate(self) -> None:
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.matches_per_pair < 1 or self.nonmatches_per_match < 1:
            raise ValueError("match and non-match counts must be >= 1")


@dataclass
class TargetConfig:
    sigma: float = 1.0
    matches_per_pair: int = 32

    def validate(self) -> None:
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


# ------------------------------------------------------------------ contrastive


def _gather(volume: T.Tensor, pixels: np.ndarray) -> T.Tensor:
    pixels = np.asarray(pixels, dtype=int).reshape(-1, 2)
    h, w = volume.shape[:2]
    if np.any(pixels < 0) or np.any(pixels[:, 0] >= h) or np.any(pixels[:, 1] >= w):
        raise IndexError(f"pixel coordinates outside {h}x{w} volume")
    return T.index(volume, (pixels[:, 0], pixels[:, 1]))


def pcl_loss(desc_a: T.Tensor, desc_b: T.Tensor, match_pairs, nonmatch_pairs, config: ContrastiveConfig) -> T.Tensor:
    """Mean squared match distance plus mean squared hinge on non-match distance.

    ``match_pairs`` / ``nonmatch_pairs`` are (P, 4) int arrays of
    ``(row_a, col_a, row_b, col_b)``.
    """
    match_pairs = np.asarray(match_pairs, dtype=int).reshape(-1, 4)
    if len(match_pairs) == 0:
        raise ValueError("pcl_loss: empty match set")
    desc_a, desc_b = T.as_tensor(desc_a), T.as_tensor(desc_b)
    da = _gather(desc_a, match_pairs[:, :2])
    db = _gather(desc_b, match_pairs[:, 2:])
    loss = T.mean(T.sq_norm(da - db))
    nonmatch_pairs = np.asarray(nonmatch_pairs, dtype=int).reshape(-1, 4)
    if len(nonmatch_pairs):
        na = _gather(desc_a, nonmatch_pairs[:, :2])
        nb = _gather(desc_b, nonmatch_pairs[:, 2:])
        dist = T.sqrt(T.sq_norm(na - nb))
        hinge = T.relu(T.shift(T.neg(dist), config.margin))
        loss = loss + T.mean(hinge * hinge)
    return loss


def spcl_expand(pair: CorrespondencePair, entry: Entry) -> np.ndarray:
    """Every (source-orbit pixel, destination-orbit pixel) combination as a match."""
    srcs = np.array([pair.entries[v].src for v in pair.orbit(entry.vertex_id)])
    dsts = np.asarray(entry.dsts)
    return np.array([[*s, *d] for s in srcs for d in dsts], dtype=int).reshape(-1, 4)


def sample_nonmatch_pixels(rng: np.random.Generator, shape: Tuple[int, int], exclude: np.ndarray,
                           count: int, radius: float) -> np.ndarray:
    """``count`` pixels drawn uniformly from the grid, avoiding disks around ``exclude``."""
    h, w = shape
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    grid = np.stack([rr.ravel(), cc.ravel()], axis=1)
    exclude = np.asarray(exclude, dtype=float).reshape(-1, 2)
    d2 = ((grid[:, None, :] - exclude[None, :, :]) ** 2).sum(-1)
    allowed = grid[np.all(d2 > radius * radius, axis=1)]
    if len(allowed) == 0:
        raise ValueError("no pixels left after exclusion")
    return allowed[rng.integers(0, len(allowed), count)]


def sample_contrastive_pairs(pair: CorrespondencePair, rng: np.random.Generator, config: ContrastiveConfig,
                             symmetric: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Match and non-match pixel pairs for one image pair.

    Plain PCL pairs each source vertex with its own projection only; the
    symmetric variant uses the full orbit on both sides.
    """
    config.validate()
    shape = pair.image_b.shape
    k = min(config.matches_per_pair, len(pair.entries))
    chosen = rng.choice(len(pair.entries), size=k, replace=False)
    matches, nonmatches = [], []
    for vid in chosen:
        entry = pair.entries[vid]
        if symmetric:
            m = spcl_expand(pair, entry)
            exclude = entry.dsts
        else:
            m = np.array([[*entry.src, *entry.dsts[0]]], dtype=int)
            exclude = entry.dsts[:1]
        matches.append(m)
        per = config.nonmatches_per_match
        px = sample_nonmatch_pixels(rng, shape, exclude, per * len(m), config.exclusion_radius)
        nonmatches.append(np.column_stack([np.repeat(m[:, :2], per, axis=0), px]))
    return np.vstack(matches), np.vstack(nonmatches)


# ------------------------------------------------------------------ distributional


def gmm_target(dst_pixels, sigma: float, h: int, w: int) -> np.ndarray:
    """Equal-weight isotropic Gaussian mixture on the pixel grid, normalized to sum 1."""
    dst = np.asarray(dst_pixels, dtype=float).reshape(-1, 2)
    if len(dst) == 0:
        raise ValueError("gmm_target: need at least one mode")
    if sigma <= 0:
        raise ValueError(f"gmm_target: sigma must be positive, got {sigma}")
    if np.any(dst < 0) or np.any(dst[:, 0] > h - 1) or np.any(dst[:, 1] > w - 1):
        raise ValueError(f"gmm_target: modes {dst.tolist()} outside {h}x{w} grid")
    rows = np.arange(h, dtype=float)
    cols = np.arange(w, dtype=float)
    grid = np.zeros((h, w))
    for r, c in dst:
        gr = np.exp(-0.5 * ((rows - r) / sigma) ** 2)
        gc = np.exp(-0.5 * ((cols - c) / sigma) ** 2)
        comp = np.outer(gr, gc)
        grid += comp / comp.sum()
    return grid / grid.sum()


def heatmap_logits(desc_a: T.Tensor, src_pixels, desc_b: T.Tensor) -> T.Tensor:
    """Negated squared descriptor distance from each source pixel to every cell: (S, H*W).

    Uses ||a||^2 + ||b||^2 - 2 a.b, which is exact enough in float64 for
    descriptor magnitudes seen in training and far cheaper than materializing
    the (S, H*W, D) difference tensor.
    """
    desc_a, desc_b = T.as_tensor(desc_a), T.as_tensor(desc_b)
    h, w, d = desc_b.shape
    da = _gather(desc_a, src_pixels)                            # (S, D)
    s = da.shape[0]
    flat_b = T.reshape(desc_b, (h * w, d))
    cross = T.matmul(da, T.transpose(flat_b))                   # (S, HW)
    sq = T.reshape(T.sq_norm(da), (s, 1)) + T.reshape(T.sq_norm(flat_b), (1, h * w))
    return T.sub(T.scale(cross, 2.0), sq)


def softmax_heatmap(desc_a, src_pixel, desc_b) -> np.ndarray:
    """Match distribution over image_b cells for one source pixel, (H, W)."""
    desc_a = np.asarray(T.as_tensor(desc_a).data)
    desc_b = np.asarray(T.as_tensor(desc_b).data)
    h, w = desc_b.shape[:2]
    u, v = src_pixel
    if not (0 <= u < desc_a.shape[0] and 0 <= v < desc_a.shape[1]):
        raise IndexError(f"source pixel ({u}, {v}) outside {desc_a.shape[0]}x{desc_a.shape[1]}")
    logits = -np.sum((desc_b - desc_a[u, v]) ** 2, axis=-1)
    z = np.exp(logits - logits.max())
    return z / z.sum()


def cross_entropy(target: np.ndarray, predicted: np.ndarray) -> float:
    target = np.asarray(target, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if target.shape != predicted.shape:
        raise ValueError(f"cross_entropy: shape mismatch {target.shape} vs {predicted.shape}")
    mask = target > 0
    return float(-np.sum(target[mask] * np.log(predicted[mask])))


def cross_entropy_logits(targets: np.ndarray, logits: T.Tensor) -> T.Tensor:
    """Mean over rows of -sum(target * log_softmax(logits)); targets (S, K)."""
    logp = T.log_softmax(logits, axis=-1)
    return T.scale(T.sum(T.mul(T.Tensor(targets), logp)), -1.0 / targets.shape[0])


def gmm_targets(dst_lists: Sequence[np.ndarray], sigma: float, h: int, w: int) -> np.ndarray:
    """Batched :func:`gmm_target`: (S, H, W) for S destination-pixel sets."""
    owners, modes = [], []
    for i, d in enumerate(dst_lists):
        d = np.asarray(d, dtype=float).reshape(-1, 2)
        if len(d) == 0:
            raise ValueError("gmm_target: need at least one mode")
        owners.extend([i] * len(d))
        modes.append(d)
    modes = np.vstack(modes)
    if np.any(modes < 0) or np.any(modes[:, 0] > h - 1) or np.any(modes[:, 1] > w - 1):
        raise ValueError(f"gmm_target: modes outside {h}x{w} grid")
    gr = np.exp(-0.5 * ((np.arange(h)[None, :] - modes[:, :1]) / sigma) ** 2)
    gc = np.exp(-0.5 * ((np.arange(w)[None, :] - modes[:, 1:]) / sigma) ** 2)
    gr /= gr.sum(axis=1, keepdims=True)
    gc /= gc.sum(axis=1, keepdims=True)
    mix = np.zeros((len(dst_lists), len(modes)))
    mix[owners, np.arange(len(modes))] = 1.0
    mix /= mix.sum(axis=1, keepdims=True)
    comp = (gr[:, :, None] * gc[:, None, :]).reshape(len(modes), h * w)
    out = (mix @ comp).reshape(len(dst_lists), h, w)
    return out / out.sum(axis=(1, 2), keepdims=True)


def mmgsd_targets(pair: CorrespondencePair, vertex_ids: Sequence[int], sigma: float) -> np.ndarray:
    h, w = pair.image_b.shape
    return gmm_targets([pair.entries[v].dsts for v in vertex_ids], sigma, h, w).reshape(len(vertex_ids), h * w)


def mmgsd_loss_from_descriptors(desc_a: T.Tensor, desc_b: T.Tensor, pair: CorrespondencePair,
                                vertex_ids: Sequence[int], config: TargetConfig) -> T.Tensor:
    config.validate()
    src = np.array([pair.entries[v].src for v in vertex_ids])
    logits = heatmap_logits(desc_a, src, desc_b)
    return cross_entropy_logits(mmgsd_targets(pair, vertex_ids, config.sigma), logits)


def mmgsd_loss(model, pair: CorrespondencePair, vertex_ids: Sequence[int], config: TargetConfig) -> T.Tensor:
    """Mean cross-entropy between GMM targets and predicted heatmaps for the given source vertices."""
    desc = model.forward(np.stack([pair.image_a, pair.image_b]))
    return mmgsd_loss_from_descriptors(desc[0], desc[1], pair, vertex_ids, config)
