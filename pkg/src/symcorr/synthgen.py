"""Procedural rope and cloth image pairs with dense vertex correspondences.

Geometry and appearance are sampled from separate RNG streams, so the same
vertex layout can be re-rendered with different backgrounds and brightness.
Pixel coordinates are ``[row, col]`` with the origin at the top left.

All randomness goes through numpy's PCG64 generator seeded by
``SeedSequence([seed, pair_id, stream])``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image as PILImage

PRNG_NAME = "numpy.PCG64/SeedSequence([seed, pair_id, stream])"
FORMAT_VERSION = 1

# reference protocol scale; desk-scale runs use far smaller defaults
FULL_SCALE = {
    "train_pairs": 3500,
    "test_pairs": 500,
    "cloth_image_size": (485, 485),
    "rope_image_size": (480, 640),   # (H, W)
    "sources_per_pair": 625,
}

# RNG stream ids within one pair
_GEOM_A, _GEOM_B, _LOOK_A, _LOOK_B = 0, 1, 2, 3


class ObjectKind(str, Enum):
    ROPE = "rope"
    CLOTH = "cloth"

    @property
    def symmetry_order(self) -> int:
        return 2 if self is ObjectKind.ROPE else 4


class GenerationError(RuntimeError):
    """The sampler could not produce a valid configuration."""


@dataclass
class MeshConfig:
    kind: ObjectKind = ObjectKind.ROPE
    vertex_count: int = 32          # rope: chain length V; cloth: grid side N
    image_size: Tuple[int, int] = (64, 64)
    rope_thickness: float = 4.0
    control_points: int = 5
    rope_length_frac: float = 1.4   # target arc length / min(H, W)
    rope_stripes: int = 0           # braid periods along the rope (0: plain gradient)
    rope_stripe_amplitude: float = 0.2
    cloth_side_frac: float = 0.6
    cloth_warp_amplitude: float = 2.0
    cell_shade_jitter: float = 0.04
    background_range: Tuple[float, float] = (0.0, 0.25)
    brightness_jitter: float = 0.01
    margin: Optional[float] = None  # defaults to the rope thickness

    def __post_init__(self):
        self.kind = ObjectKind(self.kind)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        self.background_range = (float(self.background_range[0]), float(self.background_range[1]))

    @property
    def edge_margin(self) -> float:
        return self.rope_thickness if self.margin is None else float(self.margin)

    @property
    def num_vertices(self) -> int:
        if self.kind is ObjectKind.ROPE:
            return self.vertex_count
        return self.vertex_count * self.vertex_count

    def validate(self) -> None:
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ValueError(f"image_size too small: {self.image_size}")
        if self.kind is ObjectKind.ROPE and self.vertex_count < 8:
            raise ValueError(f"rope needs vertex_count >= 8, got {self.vertex_count}")
        if self.kind is ObjectKind.CLOTH and self.vertex_count < 4:
            raise ValueError(f"cloth needs grid side >= 4, got {self.vertex_count}")
        if self.rope_stripes < 0 or not 0.0 <= self.rope_stripe_amplitude <= 1.0:
            raise ValueError("rope_stripes must be >= 0 and rope_stripe_amplitude in [0, 1]")
        if self.rope_thickness <= 0:
            raise ValueError("rope_thickness must be positive")
        if self.edge_margin < self.rope_thickness:
            raise ValueError("margin must be at least the rope thickness")
        lo, hi = self.background_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"bad background_range {self.background_range}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["image_size"] = list(self.image_size)
        d["background_range"] = list(self.background_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MeshConfig":
        return cls(**d)


def pair_rng(seed: int, pair_id: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(pair_id), int(stream)])))


# ----------------------------------------------------------------- geometry


def catmull_rom(points: np.ndarray, samples_per_segment: int = 32) -> np.ndarray:
    """Dense centripetal-free (uniform) Catmull-Rom curve through ``points``."""
    p = np.asarray(points, dtype=float)
    ext = np.vstack([2 * p[0] - p[1], p, 2 * p[-1] - p[-2]])
    t = np.linspace(0.0, 1.0, samples_per_segment, endpoint=False)[:, None]
    t2, t3 = t * t, t * t * t
    out = []
    for i in range(1, len(ext) - 2):
        p0, p1, p2, p3 = ext[i - 1], ext[i], ext[i + 1], ext[i + 2]
        seg = 0.5 * (2 * p1 + (-p0 + p2) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t2 + (-p0 + 3 * p1 - 3 * p2 + p3) * t3)
        out.append(seg)
    out.append(p[-1][None])
    return np.vstack(out)


def resample_arclength(curve: np.ndarray, count: int) -> np.ndarray:
    seg = np.linalg.norm(np.diff(curve, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.linspace(0.0, s[-1], count)
    return np.stack([np.interp(target, s, curve[:, 0]), np.interp(target, s, curve[:, 1])], axis=1)


def _in_bounds(pos: np.ndarray, size: Tuple[int, int], margin: float) -> bool:
    h, w = size
    return bool(
        np.all(pos[:, 0] >= margin) and np.all(pos[:, 0] <= h - 1 - margin)
        and np.all(pos[:, 1] >= margin) and np.all(pos[:, 1] <= w - 1 - margin)
    )


def sample_rope_config(rng: np.random.Generator, config: MeshConfig, max_attempts: int = 1000) -> np.ndarray:
    """(V, 2) vertex positions along a smooth random curve, spaced uniformly in arc length."""
    config.validate()
    if config.kind is not ObjectKind.ROPE:
        raise ValueError("sample_rope_config needs a rope config")
    h, w = config.image_size
    m = config.edge_margin
    k = max(4, config.control_points)
    step = config.rope_length_frac * min(h, w) / (k - 1) / 0.85
    room = np.array([h - 1 - 2 * m, w - 1 - 2 * m])
    for _ in range(max_attempts):
        heading = rng.uniform(0, 2 * np.pi)
        pts = [np.zeros(2)]
        for _ in range(k - 1):
            heading += rng.uniform(-1.2, 1.2)
            pts.append(pts[-1] + step * rng.uniform(0.7, 1.0) * np.array([np.sin(heading), np.cos(heading)]))
        curve = catmull_rom(np.array(pts))
        lo, hi = curve.min(axis=0), curve.max(axis=0)
        slack = room - (hi - lo)
        if np.any(slack < 0):
            continue
        curve = curve - lo + m + rng.uniform(0.0, 1.0, 2) * slack
        if not _in_bounds(curve, config.image_size, m):
            continue
        verts = resample_arclength(curve, config.vertex_count)
        if np.linalg.norm(verts[0] - verts[-1]) < 2 * config.rope_thickness:
            continue
        return verts
    raise GenerationError(f"could not fit a rope inside {config.image_size} after {max_attempts} attempts")


def warp_lattice(n: int, side: float, center: Sequence[float], angle: float = 0.0,
                 amplitude: float = 0.0, wave: Optional[np.ndarray] = None) -> np.ndarray:
    """(N*N, 2) positions of an N x N lattice, rotated, translated and softly displaced.

    Vertex (r, c) has id ``r * N + c``. ``wave`` holds rows of (k_row, k_col, phase)
    for a sinusoidal displacement in lattice coordinates; ``amplitude`` in pixels.
    """
    r, c = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    lat = np.stack([r.ravel(), c.ravel()], axis=1).astype(float) / (n - 1) - 0.5  # in [-0.5, 0.5]
    pos = lat * side
    if amplitude and wave is not None:
        disp = np.zeros_like(pos)
        for axis, (kr, kc, ph) in enumerate(wave[:2]):
            disp[:, axis] = np.sin(2 * np.pi * (kr * lat[:, 0] + kc * lat[:, 1]) + ph)
        pos = pos + amplitude * disp
    ca, sa = np.cos(angle), np.sin(angle)
    rot = np.array([[ca, -sa], [sa, ca]])
    return pos @ rot.T + np.asarray(center, dtype=float)


def cell_signed_areas(pos: np.ndarray, n: int) -> np.ndarray:
    """Shoelace area of each lattice cell, positive for the unwarped orientation."""
    g = pos.reshape(n, n, 2)
    quads = [g[:-1, :-1], g[:-1, 1:], g[1:, 1:], g[1:, :-1]]
    area = np.zeros((n - 1, n - 1))
    for i in range(4):
        a, b = quads[i], quads[(i + 1) % 4]
        area += a[..., 0] * b[..., 1] - b[..., 0] * a[..., 1]
    return -0.5 * area


def sample_cloth_config(rng: np.random.Generator, config: MeshConfig, max_attempts: int = 1000) -> np.ndarray:
    config.validate()
    if config.kind is not ObjectKind.CLOTH:
        raise ValueError("sample_cloth_config needs a cloth config")
    h, w = config.image_size
    n = config.vertex_count
    side = config.cloth_side_frac * min(h, w)
    m = config.edge_margin
    for _ in range(max_attempts):
        angle = rng.uniform(0, 2 * np.pi)
        wave = np.column_stack([rng.uniform(-1.0, 1.0, 2), rng.uniform(-1.0, 1.0, 2), rng.uniform(0, 2 * np.pi, 2)])
        center = rng.uniform([0.3 * h, 0.3 * w], [0.7 * h, 0.7 * w])
        pos = warp_lattice(n, side, center, angle, config.cloth_warp_amplitude, wave)
        if not _in_bounds(pos, config.image_size, m):
            continue
        if np.all(cell_signed_areas(pos, n) > 0):
            return pos
    raise GenerationError(f"could not sample a non-degenerate cloth after {max_attempts} attempts")


def sample_config(rng: np.random.Generator, config: MeshConfig) -> np.ndarray:
    if config.kind is ObjectKind.ROPE:
        return sample_rope_config(rng, config)
    return sample_cloth_config(rng, config)


def symmetry_orbit(vertex_id: int, kind, dims: int) -> List[int]:
    """Vertex ids equivalent to ``vertex_id`` under the object's symmetry, itself first.

    ``dims`` is the chain length for rope and the grid side for cloth.
    """
    kind = ObjectKind(kind)
    if kind is ObjectKind.ROPE:
        if not 0 <= vertex_id < dims:
            raise ValueError(f"vertex {vertex_id} out of range for rope of length {dims}")
        orbit = [vertex_id, dims - 1 - vertex_id]
    else:
        n = dims
        if not 0 <= vertex_id < n * n:
            raise ValueError(f"vertex {vertex_id} out of range for {n}x{n} cloth")
        r, c = divmod(vertex_id, n)
        orbit = []
        for _ in range(4):
            orbit.append(r * n + c)
            r, c = c, n - 1 - r
    seen: List[int] = []
    for v in orbit:
        if v not in seen:
            seen.append(v)
    return seen


# ----------------------------------------------------------------- rendering


def _segment_distance(pix: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Distance from each pixel to each segment and the projection parameter."""
    ab = b - a                                   # (S, 2)
    ap = pix[:, None, :] - a[None, :, :]         # (P, S, 2)
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-12)
    t = np.clip(np.sum(ap * ab[None], axis=2) / denom, 0.0, 1.0)
    near = a[None] + t[..., None] * ab[None]
    d = np.linalg.norm(pix[:, None, :] - near, axis=2)
    return d, t


def rope_profile(s: np.ndarray, stripes: int = 0, amplitude: float = 0.2) -> np.ndarray:
    """Rope intensity at normalized arc length ``s``; symmetric about the midpoint.

    A bright-ends ramp, optionally mixed with ``stripes`` cosine periods; an
    integer period count keeps the pattern symmetric under s -> 1 - s.
    """
    ramp = 0.45 + 0.55 * np.abs(2.0 * s - 1.0)
    if not stripes:
        return ramp
    return (1.0 - amplitude) * ramp + amplitude * 0.5 * (1.0 + np.cos(2.0 * np.pi * stripes * s))


def cloth_profile(lat: np.ndarray) -> np.ndarray:
    """Cloth intensity at lattice coords in [-0.5, 0.5]^2, invariant to quarter turns."""
    rho = np.sqrt(np.sum(lat * lat, axis=-1)) / np.sqrt(0.5)
    theta = np.arctan2(lat[..., 0], lat[..., 1])
    return 0.45 + 0.4 * rho + 0.12 * rho * np.cos(4 * theta)


def _render_rope(pos, size, config, look, bg, gain):
    h, w = size
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pix = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(float)
    d, t = _segment_distance(pix, pos[:-1], pos[1:])
    nearest = np.argmin(d, axis=1)
    dist = d[np.arange(len(pix)), nearest]
    s = (nearest + t[np.arange(len(pix)), nearest]) / (len(pos) - 1)
    cov = np.clip(config.rope_thickness / 2.0 + 0.5 - dist, 0.0, 1.0)
    fg = np.clip(gain * rope_profile(s, config.rope_stripes, config.rope_stripe_amplitude), 0.0, 1.0)
    img = bg * (1.0 - cov) + fg * cov
    return img.reshape(h, w)


def _render_cloth(pos, size, config, look, bg, gain):
    h, w = size
    n = config.vertex_count
    g = pos.reshape(n, n, 2)
    img = np.full((h, w), bg)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pix = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(float)
    centers = (np.stack(np.meshgrid(np.arange(n - 1), np.arange(n - 1), indexing="ij"), axis=-1) + 0.5) / (n - 1) - 0.5
    shade = cloth_profile(centers) + look.uniform(-config.cell_shade_jitter, config.cell_shade_jitter, (n - 1, n - 1))
    shade = np.clip(gain * shade, 0.0, 1.0)
    flat = img.ravel()
    for i in range(n - 1):
        for j in range(n - 1):
            quad = np.array([g[i, j], g[i, j + 1], g[i + 1, j + 1], g[i + 1, j]])
            lo = np.floor(quad.min(axis=0)).astype(int)
            hi = np.ceil(quad.max(axis=0)).astype(int)
            sel = np.nonzero((pix[:, 0] >= lo[0]) & (pix[:, 0] <= hi[0]) & (pix[:, 1] >= lo[1]) & (pix[:, 1] <= hi[1]))[0]
            if sel.size == 0:
                continue
            inside = _point_in_convex(pix[sel], quad) | _point_in_convex(pix[sel], quad[[0, 1, 2]]) | _point_in_convex(pix[sel], quad[[0, 2, 3]])
            flat[sel[inside]] = shade[i, j]
    return flat.reshape(h, w)


def _point_in_convex(p: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Inside test for a convex polygon of either orientation, boundary inclusive."""
    signs = []
    k = len(poly)
    for a in range(k):
        e = poly[(a + 1) % k] - poly[a]
        rel = p - poly[a]
        signs.append(e[0] * rel[:, 1] - e[1] * rel[:, 0])
    s = np.stack(signs, axis=1)
    return np.all(s >= -1e-9, axis=1) | np.all(s <= 1e-9, axis=1)


def render(positions: np.ndarray, config: MeshConfig, rng: np.random.Generator) -> np.ndarray:
    """Grayscale image in [0, 1]; ``rng`` only drives appearance randomization."""
    h, w = config.image_size
    lo, hi = config.background_range
    bg = float(rng.uniform(lo, hi)) if hi > lo else lo
    gain = 1.0 + float(rng.uniform(-config.brightness_jitter, config.brightness_jitter))
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(pos) == 0:
        return np.full((h, w), bg)
    if config.kind is ObjectKind.ROPE:
        return _render_rope(pos, (h, w), config, rng, bg, gain)
    return _render_cloth(pos, (h, w), config, rng, bg, gain)


# ----------------------------------------------------------------- pairs


@dataclass
class Entry:
    vertex_id: int
    src: np.ndarray          # (2,) int
    dsts: np.ndarray         # (n, 2) int, the vertex's own projection first

    @property
    def n(self) -> int:
        return len(self.dsts)


@dataclass
class CorrespondencePair:
    pair_id: int
    kind: ObjectKind
    image_a: np.ndarray
    image_b: np.ndarray
    entries: List[Entry]
    split: str = "train"

    @property
    def dims(self) -> int:
        v = len(self.entries)
        return v if self.kind is ObjectKind.ROPE else int(round(np.sqrt(v)))

    def orbit(self, vertex_id: int) -> List[int]:
        return symmetry_orbit(vertex_id, self.kind, self.dims)

    def src_pixels(self) -> np.ndarray:
        return np.array([e.src for e in self.entries])

    def dst_pixels(self) -> np.ndarray:
        """Own projections of every vertex in image_b, (V, 2)."""
        return np.array([e.dsts[0] for e in self.entries])

    def annotation(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "kind": self.kind.value,
            "entries": [
                {"vertex_id": e.vertex_id, "src": [int(x) for x in e.src],
                 "dsts": [[int(x) for x in d] for d in e.dsts], "n": e.n}
                for e in self.entries
            ],
        }


def _pixels(pos: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    px = np.rint(pos).astype(int)
    px[:, 0] = np.clip(px[:, 0], 0, size[0] - 1)
    px[:, 1] = np.clip(px[:, 1], 0, size[1] - 1)
    return px


def build_entries(pos_a: np.ndarray, pos_b: np.ndarray, config: MeshConfig) -> List[Entry]:
    px_a = _pixels(pos_a, config.image_size)
    px_b = _pixels(pos_b, config.image_size)
    dims = config.vertex_count
    entries = []
    for v in range(len(px_a)):
        orbit = symmetry_orbit(v, config.kind, dims)
        entries.append(Entry(v, px_a[v], px_b[orbit]))
    return entries


def make_pair(config: MeshConfig, seed: int, pair_id: int, split: str = "train") -> CorrespondencePair:
    pos_a = sample_config(pair_rng(seed, pair_id, _GEOM_A), config)
    pos_b = sample_config(pair_rng(seed, pair_id, _GEOM_B), config)
    img_a = render(pos_a, config, pair_rng(seed, pair_id, _LOOK_A))
    img_b = render(pos_b, config, pair_rng(seed, pair_id, _LOOK_B))
    return CorrespondencePair(pair_id, config.kind, img_a, img_b, build_entries(pos_a, pos_b, config), split)


# ----------------------------------------------------------------- dataset on disk


@dataclass
class Dataset:
    root: Path
    config: MeshConfig
    seed: int
    pairs: List[Dict] = field(default_factory=list)   # manifest rows {pair_id, split}

    def ids(self, split: Optional[str] = None) -> List[int]:
        return [p["pair_id"] for p in self.pairs if split is None or p["split"] == split]

    def load_pair(self, pair_id: int) -> CorrespondencePair:
        split = next((p["split"] for p in self.pairs if p["pair_id"] == pair_id), None)
        if split is None:
            raise KeyError(f"pair {pair_id} not in manifest {self.root / 'manifest.json'}")
        return read_pair(self.root, pair_id, split)

    def load_split(self, split: str) -> List[CorrespondencePair]:
        return [self.load_pair(i) for i in self.ids(split)]


def _stem(pair_id: int) -> str:
    return f"{pair_id:05d}"


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    PILImage.fromarray(to_uint8(img), mode="L").save(path, optimize=False)


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_pair(root, pair: CorrespondencePair) -> None:
    pdir = Path(root) / "pairs"
    pdir.mkdir(parents=True, exist_ok=True)
    stem = _stem(pair.pair_id)
    try:
        write_png(pdir / f"{stem}_a.png", pair.image_a)
        write_png(pdir / f"{stem}_b.png", pair.image_b)
        (pdir / f"{stem}.json").write_text(json.dumps(pair.annotation(), sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing pair {pair.pair_id} under {pdir}: {exc}") from exc


def read_pair(root, pair_id: int, split: str = "train") -> CorrespondencePair:
    pdir = Path(root) / "pairs"
    stem = _stem(pair_id)
    ann_path = pdir / f"{stem}.json"
    if not ann_path.exists():
        raise FileNotFoundError(f"missing annotation for pair {pair_id}: {ann_path}")
    ann = json.loads(ann_path.read_text())
    entries = [Entry(int(e["vertex_id"]), np.array(e["src"], dtype=int), np.array(e["dsts"], dtype=int).reshape(-1, 2))
               for e in ann["entries"]]
    return CorrespondencePair(int(ann["pair_id"]), ObjectKind(ann["kind"]),
                              read_png(pdir / f"{stem}_a.png"), read_png(pdir / f"{stem}_b.png"), entries, split)


def generate_dataset(root, config: MeshConfig, count_train: int, count_test: int, seed: int) -> Dataset:
    """Render ``count_train + count_test`` pairs to ``root`` and write the manifest."""
    if count_train < 1 or count_test < 1:
        raise ValueError(f"need at least one train and one test pair, got {count_train}/{count_test}")
    config.validate()
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    rows = []
    for pid in range(count_train + count_test):
        split = "train" if pid < count_train else "test"
        write_pair(root, make_pair(config, seed, pid, split))
        rows.append({"pair_id": pid, "split": split})
    manifest = {
        "format_version": FORMAT_VERSION,
        "prng": PRNG_NAME,
        "seed": int(seed),
        "mesh_config": config.to_dict(),
        "pairs": rows,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return Dataset(root, config, int(seed), rows)


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    manifest = json.loads(path.read_text())
    return Dataset(root, MeshConfig.from_dict(manifest["mesh_config"]), int(manifest["seed"]), manifest["pairs"])
