"""Procedural stick-figure pairs: same identity, different pose.

Each identity (an integer seed) fixes an :class:`Appearance`: a discrete
palette class, colours, a two-tone stripe texture and body proportions.
A :class:`VariationSpec` fixes the pose. Rendering is a pure function of
(appearance, variation, resolution), so x and y of a pair differ only by
the variation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .tensor import Tensor, downsample

KEYPOINT_NAMES = ("head", "torso", "elbow_l", "hand_l", "elbow_r", "hand_r", "foot_l", "foot_r")
NUM_KEYPOINTS = len(KEYPOINT_NAMES)
IMAGE_CHANNELS = 3
NUM_PALETTE_CLASSES = 6
BACKGROUND = (-0.8, -0.8, -0.8)

# identity-seed ranges; test identities never appear in training
SPLITS = {"train": 0, "test": 10_000_000}

# base shirt hue per palette class, in [-1, 1]
_PALETTES = np.array(
    [
        [0.85, -0.55, -0.55],
        [-0.55, 0.75, -0.55],
        [-0.55, -0.45, 0.85],
        [0.85, 0.75, -0.65],
        [0.75, -0.65, 0.75],
        [-0.65, 0.75, 0.75],
    ]
)
_SKIN = np.array([[0.7, 0.35, 0.1], [0.45, 0.1, -0.2], [0.1, -0.25, -0.45]])
_PANTS = np.array([[-0.3, -0.3, 0.1], [0.0, -0.2, -0.5], [-0.5, -0.5, -0.5], [0.3, 0.3, 0.3]])


class ResolutionError(ValueError):
    pass


def _check_resolution(resolution: int):
    if resolution < 32 or resolution & (resolution - 1):
        raise ResolutionError(f"resolution must be a power of two >= 32, got {resolution}")


@dataclass(frozen=True)
class VariationSpec:
    """Target variation: articulated pose plus a global rigid placement.

    ``keypoints`` are in normalized image coordinates. The rendered pose is
    ``placed()``: keypoints rotated about the image centre by ``rotation``
    radians, then shifted by ``translation``.
    """

    keypoints: tuple[tuple[float, float], ...]
    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        kp = tuple((float(u), float(v)) for u, v in self.keypoints)
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))
        object.__setattr__(self, "rotation", float(self.rotation))
        for name, pts in (("keypoints", np.asarray(kp).reshape(-1, 2)), ("placed keypoints", self.placed())):
            if pts.size and (pts.min() < 0.0 or pts.max() > 1.0):
                raise ValueError(f"{name} must lie inside the unit square")

    def placed(self) -> np.ndarray:
        pts = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        return (pts - 0.5) @ rot.T + 0.5 + np.asarray(self.translation)

    def to_dict(self) -> dict:
        return {"keypoints": [list(p) for p in self.keypoints], "rotation": self.rotation,
                "translation": list(self.translation)}

    @classmethod
    def from_dict(cls, d: dict) -> VariationSpec:
        return cls(tuple(tuple(p) for p in d["keypoints"]), d["rotation"], tuple(d["translation"]))


def sample_variation(rng: np.random.Generator, margin: float = 0.05) -> VariationSpec:
    """Draw a random pose whose placed keypoints keep ``margin`` from the border."""
    while True:
        torso = np.array([0.5 + rng.normal(0, 0.03), 0.6 + rng.normal(0, 0.03)])
        head = torso + np.array([rng.normal(0, 0.03), -0.33])
        shoulder = head + 0.3 * (torso - head)
        pts = {"head": head, "torso": torso}
        for side, base in (("l", math.pi), ("r", 0.0)):
            a1 = base + rng.uniform(-1.6, 1.6)
            a2 = a1 + rng.uniform(-1.8, 1.8)
            elbow = shoulder + 0.15 * np.array([math.cos(a1), math.sin(a1)])
            pts[f"elbow_{side}"] = elbow
            pts[f"hand_{side}"] = elbow + 0.13 * np.array([math.cos(a2), math.sin(a2)])
            leg = math.pi / 2 + (0.3 if side == "l" else -0.3) + rng.uniform(-0.45, 0.45)
            pts[f"foot_{side}"] = torso + 0.3 * np.array([math.cos(leg), math.sin(leg)])
        kp = tuple(tuple(pts[n]) for n in KEYPOINT_NAMES)
        rotation = rng.uniform(-0.35, 0.35)
        translation = tuple(rng.uniform(-0.06, 0.06, size=2))
        raw = np.asarray(kp)
        if raw.min() < margin or raw.max() > 1 - margin:
            continue
        try:
            spec = VariationSpec(kp, rotation, translation)
        except ValueError:
            continue
        placed = spec.placed()
        if placed.min() >= margin and placed.max() <= 1 - margin:
            return spec


@dataclass(frozen=True)
class Appearance:
    """Identity attributes: everything about a figure except its pose."""

    palette_class: int
    shirt: tuple[float, float, float]
    shirt_alt: tuple[float, float, float]
    skin: tuple[float, float, float]
    pants: tuple[float, float, float]
    stripe_period: float
    head_radius: float
    body_width: float
    limb_width: float

    @classmethod
    def from_seed(cls, identity_seed: int) -> Appearance:
        rng = np.random.default_rng([int(identity_seed), 0xA99])
        cls_id = int(rng.integers(NUM_PALETTE_CLASSES))
        shirt = np.clip(_PALETTES[cls_id] + rng.uniform(-0.12, 0.12, 3), -1, 1)
        alt = np.clip(shirt * rng.uniform(0.35, 0.6), -1, 1)
        skin = np.clip(_SKIN[rng.integers(len(_SKIN))] + rng.uniform(-0.05, 0.05, 3), -1, 1)
        pants = np.clip(_PANTS[rng.integers(len(_PANTS))] + rng.uniform(-0.05, 0.05, 3), -1, 1)
        return cls(
            palette_class=cls_id,
            shirt=tuple(float(v) for v in shirt),
            shirt_alt=tuple(float(v) for v in alt),
            skin=tuple(float(v) for v in skin),
            pants=tuple(float(v) for v in pants),
            stripe_period=float(rng.uniform(0.035, 0.07)),
            head_radius=float(rng.uniform(0.06, 0.08)),
            body_width=float(rng.uniform(0.05, 0.07)),
            limb_width=float(rng.uniform(0.022, 0.032)),
        )


def _capsule(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray, radius: float):
    """Mask of points within ``radius`` of segment ab, plus arc-length coordinate."""
    d = b - a
    length2 = float(d @ d)
    rel_x, rel_y = px - a[0], py - a[1]
    if length2 == 0.0:
        t = np.zeros_like(px)
    else:
        t = np.clip((rel_x * d[0] + rel_y * d[1]) / length2, 0.0, 1.0)
    dx = rel_x - t * d[0]
    dy = rel_y - t * d[1]
    return dx * dx + dy * dy <= radius * radius, t * math.sqrt(length2)


def render(appearance: Appearance, variation: VariationSpec, resolution: int) -> np.ndarray:
    """Render one figure as a (3, H, W) float64 image in [-1, 1]."""
    _check_resolution(resolution)
    if len(variation.keypoints) != NUM_KEYPOINTS:
        raise ValueError(f"rendering needs {NUM_KEYPOINTS} keypoints, got {len(variation.keypoints)}")
    coords = (np.arange(resolution) + 0.5) / resolution
    py, px = np.meshgrid(coords, coords, indexing="ij")
    kp = dict(zip(KEYPOINT_NAMES, variation.placed()))
    shoulder = kp["head"] + 0.3 * (kp["torso"] - kp["head"])
    img = np.empty((IMAGE_CHANNELS, resolution, resolution))
    img[:] = np.asarray(BACKGROUND)[:, None, None]

    def paint(mask, color):
        for ch in range(IMAGE_CHANNELS):
            img[ch][mask] = color[ch]

    a = appearance
    for foot in ("foot_l", "foot_r"):
        paint(_capsule(px, py, kp["torso"], kp[foot], a.limb_width * 1.2)[0], a.pants)
    body, t = _capsule(px, py, kp["head"], kp["torso"], a.body_width)
    stripes = np.floor(t / a.stripe_period).astype(np.int64) % 2 == 1
    paint(body & ~stripes, a.shirt)
    paint(body & stripes, a.shirt_alt)
    for side in ("l", "r"):
        paint(_capsule(px, py, shoulder, kp[f"elbow_{side}"], a.limb_width)[0], a.shirt_alt)
        paint(_capsule(px, py, kp[f"elbow_{side}"], kp[f"hand_{side}"], a.limb_width * 0.85)[0], a.skin)
    paint(_capsule(px, py, kp["head"], kp["head"], a.head_radius)[0], a.skin)
    return img


def keypoint_pixel(u: float, v: float, resolution: int) -> tuple[int, int]:
    """(row, col) of the pixel containing normalized point (u, v)."""
    col = min(int(math.floor(u * resolution)), resolution - 1)
    row = min(int(math.floor(v * resolution)), resolution - 1)
    return row, col


def encode_label_map(c: VariationSpec, resolution: int, channels: int = IMAGE_CHANNELS) -> np.ndarray:
    """Gaussian heat-spot per keypoint, channel ``k % channels``, peak 1 at the keypoint pixel."""
    sigma = resolution / 16.0
    out = np.zeros((channels, resolution, resolution))
    rows = np.arange(resolution, dtype=np.float64)[:, None]
    cols = np.arange(resolution, dtype=np.float64)[None, :]
    for k, (u, v) in enumerate(c.placed()):
        r, q = keypoint_pixel(u, v, resolution)
        out[k % channels] += np.exp(-((rows - r) ** 2 + (cols - q) ** 2) / (2.0 * sigma * sigma))
    return out


@dataclass(frozen=True)
class SamplePair:
    x: np.ndarray
    y: np.ndarray
    c: VariationSpec
    label_map: np.ndarray
    identity_seed: int
    source: VariationSpec | None = None
    palette_class: int = -1

    @property
    def resolution(self) -> int:
        return self.x.shape[-1]


def render_sample(identity_seed: int, source_variation: VariationSpec, target_variation: VariationSpec,
                  resolution: int, appearance: Appearance | None = None) -> SamplePair:
    _check_resolution(resolution)
    app = appearance if appearance is not None else Appearance.from_seed(identity_seed)
    x = render(app, source_variation, resolution)
    y = x.copy() if target_variation == source_variation else render(app, target_variation, resolution)
    for arr in (x, y):
        arr.flags.writeable = False
    m = encode_label_map(target_variation, resolution)
    m.flags.writeable = False
    return SamplePair(x, y, target_variation, m, int(identity_seed), source_variation, app.palette_class)


@dataclass(frozen=True)
class ImagePyramid:
    """``levels[n] = (x^n, y^n)``; the top level holds full resolution."""

    levels: dict[int, tuple[np.ndarray, np.ndarray]]

    @property
    def top(self) -> int:
        return max(self.levels)


def level_resolution(resolution: int, num_levels: int, n: int) -> int:
    return resolution >> (num_levels - n)


def downsize(img: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsizing of a (C, H, W) or (B, C, H, W) array."""
    batched = img.ndim == 4
    arr = img if batched else img[None]
    out = downsample(Tensor(arr, dtype=arr.dtype), factor).data
    return out if batched else out[0]


def build_pyramid(pair, num_levels: int) -> ImagePyramid:
    """Levels 1..num_levels of ``pair.x`` / ``pair.y`` (single or batched arrays)."""
    res = pair.x.shape[-1]
    if num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    if res % (1 << (num_levels - 1)):
        raise ResolutionError(f"resolution {res} is not divisible by 2^{num_levels - 1}")
    levels = {}
    for n in range(1, num_levels + 1):
        f = 1 << (num_levels - n)
        levels[n] = (downsize(pair.x, f), downsize(pair.y, f))
    return ImagePyramid(levels)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    label_map: np.ndarray
    identity_seeds: np.ndarray
    palette_classes: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]


def collate(pairs: Sequence[SamplePair], indices=None) -> Batch:
    return Batch(
        x=np.stack([p.x for p in pairs]),
        y=np.stack([p.y for p in pairs]),
        label_map=np.stack([p.label_map for p in pairs]),
        identity_seeds=np.array([p.identity_seed for p in pairs], dtype=np.int64),
        palette_classes=np.array([p.palette_class for p in pairs], dtype=np.int64),
        indices=np.asarray(indices if indices is not None else np.arange(len(pairs)), dtype=np.int64),
    )


@dataclass
class SyntheticDataset:
    """Deterministic indexable set of rendered pairs.

    Pair ``i`` uses identity ``SPLITS[split] + i % num_identities`` with
    poses drawn from a generator seeded by ``(seed, split, i)``.
    """

    num_pairs: int
    resolution: int = 64
    seed: int = 0
    split: str = "train"
    num_identities: int | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        _check_resolution(self.resolution)
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {sorted(SPLITS)}")
        if self.num_identities is None:
            self.num_identities = max(1, self.num_pairs // 4)

    def __len__(self) -> int:
        return self.num_pairs

    def spec(self, i: int) -> tuple[int, VariationSpec, VariationSpec]:
        if not 0 <= i < self.num_pairs:
            raise IndexError(i)
        identity = SPLITS[self.split] + i % self.num_identities
        rng = np.random.default_rng([self.seed, SPLITS[self.split], i])
        return identity, sample_variation(rng), sample_variation(rng)

    def __getitem__(self, i: int) -> SamplePair:
        pair = self._cache.get(i)
        if pair is None:
            identity, src, tgt = self.spec(i)
            pair = render_sample(identity, src, tgt, self.resolution)
            if len(self._cache) < 4096:
                self._cache[i] = pair
        return pair

    def __iter__(self) -> Iterator[SamplePair]:
        for i in range(self.num_pairs):
            yield self[i]

    def batch(self, indices) -> Batch:
        indices = [int(i) for i in indices]
        return collate([self[i] for i in indices], indices)


# ---------------------------------------------------------------------------
# on-disk cache: 8-bit PNGs plus a JSON-lines manifest
# ---------------------------------------------------------------------------

MANIFEST = "manifest.jsonl"


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(C, H, W) in [-1, 1] to (H, W, C) uint8."""
    return np.clip(np.rint((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64).transpose(2, 0, 1) / 127.5 - 1.0


def write_cache(pairs: Sequence[SamplePair] | SyntheticDataset, directory) -> Path:
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, pair in enumerate(pairs):
        xs, ys = f"{i:06d}_x.png", f"{i:06d}_y.png"
        Image.fromarray(to_uint8(pair.x)).save(directory / xs)
        Image.fromarray(to_uint8(pair.y)).save(directory / ys)
        rec = {
            "sample_id": i,
            "identity_seed": pair.identity_seed,
            "palette_class": pair.palette_class,
            "source": pair.source.to_dict() if pair.source is not None else None,
            "target": pair.c.to_dict(),
            "x": xs,
            "y": ys,
        }
        lines.append(json.dumps(rec, sort_keys=True))
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    return directory / MANIFEST


def read_cache(directory) -> list[SamplePair]:
    from PIL import Image

    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    pairs = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        x = from_uint8(np.asarray(Image.open(directory / rec["x"]).convert("RGB")))
        y = from_uint8(np.asarray(Image.open(directory / rec["y"]).convert("RGB")))
        target = VariationSpec.from_dict(rec["target"])
        source = VariationSpec.from_dict(rec["source"]) if rec["source"] else None
        pairs.append(SamplePair(x, y, target, encode_label_map(target, x.shape[-1]), rec["identity_seed"], source,
                                rec["palette_class"]))
    return pairs
