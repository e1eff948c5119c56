"""Symmetric-correspondence error metrics and the evaluation report."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .inference import contrastive_heatmap, entropy, extract_modes
from .losses import softmax_heatmap
from .synthgen import CorrespondencePair

INFERENCE_PATHS = ("softmax", "contrastive")


def inference_path_for(loss: str) -> str:
    """Heatmap construction used at test time for a model trained with ``loss``."""
    return "softmax" if loss == "mmgsd" else "contrastive"


def assign_modes(predicted, truth) -> Tuple[Tuple[int, ...], float]:
    """Minimum total squared-distance matching of predicted modes to ground truth.

    Returns ``(perm, cost)`` where ``perm[i]`` is the truth index paired with
    prediction ``i``. Exhaustive over permutations, meant for n <= 4.
    """
    p = np.asarray(predicted, dtype=float).reshape(-1, 2)
    t = np.asarray(truth, dtype=float).reshape(-1, 2)
    if len(p) != len(t):
        raise ValueError(f"assign_modes: {len(p)} predictions vs {len(t)} ground-truth pixels")
    if len(p) == 0:
        raise ValueError("assign_modes: nothing to assign")
    cost = ((p[:, None, :] - t[None, :, :]) ** 2).sum(-1)
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(len(p))):
        c = float(cost[np.arange(len(p)), perm].sum())
        if c < best_cost:
            best, best_cost = perm, c
    return tuple(best), best_cost


def per_source_error(predicted, truth) -> float:
    """Mean squared pixel distance over optimally assigned (prediction, truth) pairs."""
    _, cost = assign_modes(predicted, truth)
    return cost / len(np.asarray(truth).reshape(-1, 2))


def pdf_curve(sq_errors, extent, bins: Union[int, Sequence[float]] = 20, max_fraction: float = 1.0):
    """Histogram of L2 error as a fraction of object extent.

    ``sq_errors`` are squared pixel errors; ``extent`` is a scalar or one value
    per error. Values past the last edge are counted in the last bin.
    Returns ``(upper_edges, masses)``.
    """
    e = np.asarray(sq_errors, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("pdf_curve: no errors given")
    ext = np.broadcast_to(np.asarray(extent, dtype=float), e.shape)
    if np.any(ext <= 0):
        raise ValueError("pdf_curve: object extent must be positive")
    frac = np.sqrt(e) / ext
    edges = np.linspace(0.0, max_fraction, int(bins) + 1) if np.isscalar(bins) else np.asarray(bins, dtype=float)
    idx = np.clip(np.searchsorted(edges, frac, side="right") - 1, 0, len(edges) - 2)
    counts = np.bincount(idx, minlength=len(edges) - 1).astype(float)
    return edges[1:], counts / counts.sum()


def object_extent(pair: CorrespondencePair) -> float:
    px = pair.dst_pixels().astype(float)
    return float(max(np.linalg.norm(px.max(axis=0) - px.min(axis=0)), 1.0))


@dataclass
class SourceRecord:
    pair_id: int
    vertex_id: int
    n: int
    sq_error: float
    entropy: float
    extent: float


@dataclass
class EvalReport:
    method: str
    records: List[SourceRecord] = field(default_factory=list)
    bins: int = 20

    @property
    def error_samples(self) -> np.ndarray:
        return np.array([r.sq_error for r in self.records])

    @property
    def mean_squared_error(self) -> float:
        return float(np.mean(self.error_samples))

    @property
    def rmse(self) -> float:
        return float(np.sqrt(self.mean_squared_error))

    @property
    def mean_entropy(self) -> float:
        return float(np.mean([r.entropy for r in self.records]))

    def pdf(self):
        return pdf_curve(self.error_samples, [r.extent for r in self.records], self.bins)

    def error_map(self) -> Dict[int, Tuple[float, int]]:
        """vertex_id -> (mean squared error, sample count)."""
        acc: Dict[int, List[float]] = {}
        for r in self.records:
            acc.setdefault(r.vertex_id, []).append(r.sq_error)
        return {v: (float(np.mean(x)), len(x)) for v, x in sorted(acc.items())}

    def to_dict(self) -> dict:
        upper, mass = self.pdf()
        return {
            "method": self.method,
            "rmse": self.rmse,
            "mean_squared_error": self.mean_squared_error,
            "mean_entropy": self.mean_entropy,
            "num_sources": len(self.records),
            "num_pairs": len({r.pair_id for r in self.records}),
            "pdf_curve": {"bin_upper_fraction": upper.tolist(), "mass": mass.tolist()},
            "error_map": {str(v): {"mean_sq_error": m, "count": c} for v, (m, c) in self.error_map().items()},
        }

    def write(self, out_dir, stem: Optional[str] = None) -> Dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.method
        paths = {"json": out / f"{stem}_report.json", "csv": out / f"{stem}_sources.csv",
                 "pdf": out / f"{stem}_pdf.csv"}
        paths["json"].write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        with open(paths["csv"], "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["pair_id", "vertex_id", "n", "sq_error", "entropy"])
            for r in self.records:
                wr.writerow([r.pair_id, r.vertex_id, r.n, repr(r.sq_error), repr(r.entropy)])
        upper, mass = self.pdf()
        with open(paths["pdf"], "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["bin_upper_fraction", "mass"])
            for u, m in zip(upper, mass):
                wr.writerow([repr(float(u)), repr(float(m))])
        return paths


def heatmap(path: str, desc_a: np.ndarray, src, desc_b: np.ndarray) -> np.ndarray:
    if path == "softmax":
        return softmax_heatmap(desc_a, src, desc_b)
    if path == "contrastive":
        return contrastive_heatmap(desc_a, src, desc_b)
    raise ValueError(f"unknown inference path {path!r}; expected one of {INFERENCE_PATHS}")


def evaluate(model, pairs: Sequence[CorrespondencePair], inference_path: str = "softmax",
             source_count: Optional[int] = None, sigma: float = 1.0, seed: int = 0,
             method: Optional[str] = None, bins: int = 20) -> EvalReport:
    """Per-source assigned squared errors over ``pairs``.

    ``model`` needs ``describe(image) -> (H, W, D)``. By default every mesh
    vertex is a source; ``source_count`` subsamples per pair with ``seed``.
    """
    if not pairs:
        raise ValueError("evaluate: empty split")
    if inference_path not in INFERENCE_PATHS:
        raise ValueError(f"unknown inference path {inference_path!r}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0xE7A1])))
    report = EvalReport(method or inference_path, bins=bins)
    for pair in pairs:
        if not pair.entries:
            raise ValueError(f"pair {pair.pair_id}: no annotations")
        desc_a = model.describe(pair.image_a)
        desc_b = model.describe(pair.image_b)
        extent = object_extent(pair)
        vids = range(len(pair.entries))
        if source_count is not None and source_count < len(pair.entries):
            vids = sorted(rng.choice(len(pair.entries), size=source_count, replace=False).tolist())
        for v in vids:
            e = pair.entries[v]
            grid = heatmap(inference_path, desc_a, e.src, desc_b)
            ms = extract_modes(grid, e.n, sigma=sigma, strict=False)
            report.records.append(SourceRecord(pair.pair_id, e.vertex_id, e.n,
                                               per_source_error(ms.means, e.dsts), ms.entropy, extent))
    return report
