"""Fully-convolutional descriptor network: image -> pixel-aligned H x W x D volume."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from . import tensor as T


OUTPUT_INIT_GAIN = 0.1


@dataclass
class ModelConfig:
    descriptor_dim: int = 3
    channels: List[int] = field(default_factory=lambda: [16, 16, 16])
    kernel_size: int = 3
    nonlinearity: str = "relu"
    image_size: Tuple[int, int] = (64, 64)
    in_channels: int = 3

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))

    def validate(self) -> None:
        if self.descriptor_dim < 2:
            raise ValueError(f"descriptor_dim must be >= 2, got {self.descriptor_dim}")
        if len(self.channels) < 1:
            raise ValueError("need at least 2 conv layers (one hidden width)")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.nonlinearity != "relu":
            raise ValueError(f"unsupported nonlinearity {self.nonlinearity!r}")

    @property
    def widths(self) -> List[int]:
        return [self.in_channels, *self.channels, self.descriptor_dim]

    @property
    def receptive_radius(self) -> int:
        """Chebyshev radius of influence of one input pixel on the output."""
        return (len(self.widths) - 1) * (self.kernel_size // 2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class DescriptorNet:
    """Stack of same-padded 3x3 convolutions with ReLU between layers."""

    def __init__(self, config: ModelConfig = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.config.validate()
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0xDE5C])))
        k = self.config.kernel_size
        self.params: Dict[str, T.Tensor] = {}
        widths = self.config.widths
        last = len(widths) - 2
        for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
            fan_in = k * k * cin
            bound = np.sqrt(6.0 / fan_in)  # Kaiming-uniform for ReLU
            if i == last:
                # small descriptors at init: the untrained net predicts a near-uniform
                # match distribution instead of a seed-dependent random one
                bound *= OUTPUT_INIT_GAIN
            self.params[f"conv{i}.weight"] = T.Tensor(rng.uniform(-bound, bound, (k, k, cin, cout)), requires_grad=True)
            self.params[f"conv{i}.bias"] = T.Tensor(np.zeros(cout), requires_grad=True)

    @property
    def num_layers(self) -> int:
        return len(self.config.widths) - 1

    def parameters(self) -> List[T.Tensor]:
        return list(self.params.values())

    def _prepare(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:  # grayscale batch -> replicate to input channels
            x = np.repeat(x[..., None], self.config.in_channels, axis=-1)
        if x.ndim != 4 or x.shape[-1] != self.config.in_channels:
            raise ValueError(f"expected images (N,H,W) or (N,H,W,{self.config.in_channels}), got {x.shape}")
        if tuple(x.shape[1:3]) != self.config.image_size:
            raise ValueError(f"image size {x.shape[1:3]} does not match model image size {self.config.image_size}")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        return x

    def forward(self, images) -> T.Tensor:
        """(N, H, W, D) descriptor tensor, connected to the weights for backprop."""
        h = T.Tensor(self._prepare(images))
        for i in range(self.num_layers):
            h = T.conv2d(h, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"])
            if i < self.num_layers - 1:
                h = T.relu(h)
        return h

    __call__ = forward

    def describe(self, image) -> np.ndarray:
        """Descriptor volume (H, W, D) for one image, without building a graph."""
        x = self._prepare(image)
        for i in range(self.num_layers):
            w = self.params[f"conv{i}.weight"].data
            b = self.params[f"conv{i}.bias"].data
            x = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
            if i < self.num_layers - 1:
                np.maximum(x, 0.0, out=x)
        return x[0]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, v in self.params.items():
            if state[k].shape != v.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {v.shape}")
            v.data = np.array(state[k], dtype=np.float64)

    def save(self, path, extra: dict = None) -> None:
        meta = {"model_config": self.config.to_dict()}
        if extra:
            meta.update(extra)
        T.save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> Tuple["DescriptorNet", dict]:
        state, meta = T.load_checkpoint(path)
        if "model_config" not in meta:
            raise T.CheckpointError(f"{path}: checkpoint has no model_config metadata")
        net = cls(ModelConfig.from_dict(meta["model_config"]))
        net.load_state_dict(state)
        return net, meta


def descriptor_at(volume: np.ndarray, u: int, v: int) -> np.ndarray:
    h, w = volume.shape[:2]
    if not (0 <= u < h and 0 <= v < w):
        raise IndexError(f"pixel ({u}, {v}) outside volume of size {h}x{w}")
    return volume[u, v]
