"""Single-pair-per-step training loop shared by the three objectives."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .losses import (ContrastiveConfig, TargetConfig, mmgsd_loss_from_descriptors, pcl_loss,
                     sample_contrastive_pairs)
from .model import DescriptorNet
from .synthgen import CorrespondencePair

log = logging.getLogger(__name__)

LOSSES = ("pcl", "spcl", "mmgsd")
SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    loss: str = "mmgsd"
    margin: float = 0.5
    sigma: float = 1.0
    matches_per_pair: int = 32
    nonmatches_per_match: int = 10
    lr: float = 2e-3
    epochs: int = 30
    seed: int = 0
    lr_schedule: str = "cosine"   # anneal per step from lr down to lr * lr_final_frac
    lr_final_frac: float = 0.05

    def validate(self) -> None:
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {SCHEDULES}, got {self.lr_schedule!r}")
        if not 0.0 <= self.lr_final_frac <= 1.0:
            raise ValueError("lr_final_frac must be in [0, 1]")
        self.contrastive().validate()
        self.target().validate()

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(self.margin, self.matches_per_pair, self.nonmatches_per_match)

    def target(self) -> TargetConfig:
        return TargetConfig(self.sigma, self.matches_per_pair)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        data = json.loads(Path(path).read_text())
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    initial_loss: float
    curve: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.curve[-1][1] if self.curve else self.initial_loss


def learning_rate(cfg: TrainConfig, step: int, total: int) -> float:
    """Step size for 0-based ``step`` out of ``total`` updates."""
    if cfg.lr_schedule == "constant" or total <= 1:
        return cfg.lr
    frac = cfg.lr_final_frac + (1.0 - cfg.lr_final_frac) * 0.5 * (1.0 + np.cos(np.pi * step / (total - 1)))
    return cfg.lr * float(frac)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x7EA1, stream])))


def pair_loss(model: DescriptorNet, pair: CorrespondencePair, cfg: TrainConfig, rng: np.random.Generator) -> T.Tensor:
    """Loss for one image pair with freshly sampled source vertices / pixel pairs."""
    desc = model.forward(np.stack([pair.image_a, pair.image_b]))
    desc_a, desc_b = desc[0], desc[1]
    if cfg.loss == "mmgsd":
        k = min(cfg.matches_per_pair, len(pair.entries))
        vids = rng.choice(len(pair.entries), size=k, replace=False)
        return mmgsd_loss_from_descriptors(desc_a, desc_b, pair, vids, cfg.target())
    matches, nonmatches = sample_contrastive_pairs(pair, rng, cfg.contrastive(), symmetric=cfg.loss == "spcl")
    return pcl_loss(desc_a, desc_b, matches, nonmatches, cfg.contrastive())


def initial_loss(model: DescriptorNet, pairs: Sequence[CorrespondencePair], cfg: TrainConfig) -> float:
    rng = _rng(cfg.seed, 1)
    return float(np.mean([pair_loss(model, p, cfg, rng).item() for p in pairs]))


def train(model: DescriptorNet, pairs: Sequence[CorrespondencePair], cfg: TrainConfig) -> TrainResult:
    """Adam over shuffled pairs, one pair per step; returns per-epoch mean loss."""
    cfg.validate()
    if not pairs:
        raise ValueError("train: no training pairs")
    result = TrainResult(initial_loss(model, pairs, cfg) if cfg.epochs else float("nan"))
    opt = T.Adam(model.parameters(), lr=cfg.lr)
    rng = _rng(cfg.seed, 0)
    step, steps = 0, cfg.epochs * len(pairs)
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for idx in rng.permutation(len(pairs)):
            opt.lr = learning_rate(cfg, step, steps)
            step += 1
            opt.zero_grad()
            loss = pair_loss(model, pairs[idx], cfg, rng)
            loss.backward()
            opt.step()
            total += loss.item()
        mean = total / len(pairs)
        result.curve.append((epoch, mean))
        log.info("epoch %d %s loss %.6f", epoch, cfg.loss, mean)
    return result
