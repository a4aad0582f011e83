"""Procedural scenes with mutually consistent dense ground truth.

Each sample is a softly lit arrangement of primitives over a tilted
background plane, rendered orthographically (unit focal length per pixel:
x, y in pixel units, z in scene units). Per-pixel depth is composited by
a z-buffer, so the nearest surface wins at every pixel; segmentation
labels, depth, and analytic surface normals all come from the same
geometry. Class labels: 0 background, 1 fronto-parallel rectangle,
2 x-tilted rectangle, 3 y-tilted rectangle, 4 sphere cap.

The image is per-class albedo modulated by depth shading and a fixed-light
lambertian term plus seeded noise, so all three tasks are inferable from
pixels alone. Ground truth stays noise-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng
from .errors import ConfigurationError

ALBEDO = np.array([
    [0.42, 0.47, 0.52],   # background
    [0.85, 0.25, 0.22],   # flat rectangle
    [0.22, 0.75, 0.30],   # x-tilted rectangle
    [0.25, 0.35, 0.85],   # y-tilted rectangle
    [0.88, 0.80, 0.25],   # sphere
])
LIGHT = np.array([0.30, -0.40, -0.85]) / np.linalg.norm([0.30, -0.40, -0.85])
NOISE_AMP = 0.02
# spheres render only the cap with u = (rho/r)^2 <= RIM; beyond it the
# surface turns so steep that finite differences and analytic normals part ways
SPHERE_RIM = 0.80


@dataclass(frozen=True)
class SceneConfig:
    h: int = 64
    w: int = 64
    classes: int = 5
    min_prims: int = 2
    max_prims: int = 6
    near: float = 2.0
    far: float = 10.0
    seed: int = 0
    pool_divisor: int = 8

    def validate(self) -> "SceneConfig":
        if not 0 < self.near < self.far:
            raise ConfigurationError(f"need far > near > 0, got {self.near}, {self.far}")
        if self.h % self.pool_divisor or self.w % self.pool_divisor:
            raise ConfigurationError(
                f"{self.h}x{self.w} not divisible by {self.pool_divisor}")
        if self.h < 16 or self.w < 16:
            # primitive placement keeps an 8 px border margin on each side
            raise ConfigurationError(f"{self.h}x{self.w} below the 16x16 minimum")
        if not 2 <= self.classes <= len(ALBEDO):
            raise ConfigurationError(f"classes must lie in [2, {len(ALBEDO)}]")
        if not 0 <= self.min_prims <= self.max_prims:
            raise ConfigurationError(
                f"bad primitive count range [{self.min_prims}, {self.max_prims}]")
        return self


@dataclass
class Sample:
    image: np.ndarray    # (3, H, W) in [0, 1]
    seg: np.ndarray      # (H, W) int labels
    depth: np.ndarray    # (H, W) positive floats
    normal: np.ndarray   # (3, H, W) unit vectors, camera-facing (nz < 0)
    mask: np.ndarray     # (H, W) bool

    def validate(self, cfg: SceneConfig) -> "Sample":
        if self.depth.min() < cfg.near or self.depth.max() > cfg.far:
            raise ConfigurationError("depth escaped [near, far]")
        if self.seg.min() < 0 or self.seg.max() >= cfg.classes:
            raise ConfigurationError("segmentation label out of range")
        lengths = np.sqrt((self.normal ** 2).sum(axis=0))
        if np.abs(lengths[self.mask] - 1.0).max() > 1e-9:
            raise ConfigurationError("non-unit normal on a valid pixel")
        return self


def _plane_normal(sx, sy, shape):
    n = np.array([sx, sy, -1.0]) / np.sqrt(sx * sx + sy * sy + 1.0)
    return np.broadcast_to(n.reshape(3, 1, 1), (3,) + shape).copy()


def scene_surfaces(config: SceneConfig, index: int):
    """Background plus primitive surfaces for sample `index`, pre-composition.

    Returns (surfaces, g) where surfaces is a list of (label, footprint,
    zmap, nmap) in draw order, the background first with a full footprint,
    and g is the sample's generator positioned after all geometry draws.
    """
    config.validate()
    g = rng.stream(config.seed, "scene", index)
    h, w = config.h, config.w
    ii, jj = np.mgrid[0:h, 0:w].astype(np.float64)

    # background: gently tilted plane
    z0 = g.uniform(6.5, 8.8)
    sx, sy = g.uniform(-0.008, 0.008, size=2)
    zbg = z0 + sx * (jj - w / 2) + sy * (ii - h / 2)
    surfaces = [(0, np.ones((h, w), dtype=bool), zbg, _plane_normal(sx, sy, (h, w)))]

    kinds = max(1, config.classes - 1)
    for _ in range(int(g.integers(config.min_prims, config.max_prims + 1))):
        kind = int(g.integers(1, kinds + 1))
        ci = g.uniform(8, h - 8)
        cj = g.uniform(8, w - 8)
        if kind in (1, 2, 3):
            hi, hj = g.uniform(5, 14, size=2)
            zc = g.uniform(3.0, 5.8)
            foot = (np.abs(ii - ci) <= hi) & (np.abs(jj - cj) <= hj)
            if kind == 1:
                zmap = np.full((h, w), zc)
                nmap = _plane_normal(0.0, 0.0, (h, w))
            else:
                s = g.uniform(0.02, 0.05) * (1.0 if g.uniform() < 0.5 else -1.0)
                if kind == 2:
                    zmap = zc + s * (jj - cj)
                    nmap = _plane_normal(s, 0.0, (h, w))
                else:
                    zmap = zc + s * (ii - ci)
                    nmap = _plane_normal(0.0, s, (h, w))
        else:
            r_px = g.uniform(7, 13)
            r_z = g.uniform(0.8, 1.4)
            zc = g.uniform(3.6, 5.6)
            u = ((ii - ci) ** 2 + (jj - cj) ** 2) / (r_px * r_px)
            foot = u <= SPHERE_RIM
            cap = np.sqrt(np.maximum(1.0 - u, 1.0 - SPHERE_RIM))
            zmap = zc - r_z * cap
            zx = r_z * (jj - cj) / (cap * r_px * r_px)
            zy = r_z * (ii - ci) / (cap * r_px * r_px)
            scale = 1.0 / np.sqrt(zx * zx + zy * zy + 1.0)
            nmap = np.stack([zx * scale, zy * scale, -scale])
        surfaces.append((kind, foot, zmap, nmap))
    return surfaces, g


def generate(config: SceneConfig, index: int) -> Sample:
    """Render sample `index`; a pure function of (config.seed, index)."""
    surfaces, g = scene_surfaces(config, index)
    h, w = config.h, config.w
    _, _, depth, normal = surfaces[0]
    depth = depth.copy()
    normal = normal.copy()
    seg = np.zeros((h, w), dtype=np.int64)
    for label, foot, zmap, nmap in surfaces[1:]:
        closer = foot & (zmap < depth)
        depth[closer] = zmap[closer]
        seg[closer] = label
        normal[:, closer] = nmap[:, closer]

    shade = 1.0 - 0.55 * (depth - config.near) / (config.far - config.near)
    lambert = np.maximum(0.0, (normal * LIGHT.reshape(3, 1, 1)).sum(axis=0))
    brightness = shade * (0.75 + 0.25 * lambert)
    image = ALBEDO[seg].transpose(2, 0, 1) * brightness
    image = np.clip(image + NOISE_AMP * g.normal(size=(3, h, w)), 0.0, 1.0)

    mask = np.zeros((h, w), dtype=bool)
    mask[1:-1, 1:-1] = True
    padded = np.pad(seg, 1, mode="edge")
    win = sliding_window_view(padded, (3, 3))
    mask &= (win == seg[:, :, None, None]).all(axis=(2, 3))

    return Sample(image=image, seg=seg, depth=depth, normal=normal,
                  mask=mask).validate(config)


def normals_from_depth(depth, mask, intrinsics=None):
    """Normals from central differences of the depth map.

    With the orthographic unit-focal camera, back-projected neighbors
    differ by one pixel in x or y, so the two tangents are (1, 0, dz/dx)
    and (0, 1, dz/dy); their cross product, oriented toward the camera,
    is (dz/dx, dz/dy, -1) normalized. `intrinsics` is accepted for
    signature stability and unused by this camera model.

    Returns (normals, valid) where valid excludes borders and pixels with
    any invalid 4-neighbor.
    """
    z = np.asarray(depth, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    zx = np.zeros_like(z)
    zy = np.zeros_like(z)
    zx[:, 1:-1] = 0.5 * (z[:, 2:] - z[:, :-2])
    zy[1:-1, :] = 0.5 * (z[2:, :] - z[:-2, :])
    scale = 1.0 / np.sqrt(zx * zx + zy * zy + 1.0)
    normals = np.stack([zx * scale, zy * scale, -scale])

    valid = np.zeros_like(m)
    valid[1:-1, 1:-1] = (m[1:-1, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
                         & m[:-2, 1:-1] & m[2:, 1:-1])
    return normals, valid


# ---------------------------------------------------------------------------
# dataset streams

class SceneDataset:
    """Lazy sample cache with an audit counter on ground-truth access."""

    def __init__(self, config: SceneConfig):
        self.config = config.validate()
        self._cache = {}
        self.gt_reads = 0

    def _get(self, index: int) -> Sample:
        if index not in self._cache:
            self._cache[index] = generate(self.config, index)
        return self._cache[index]

    def image(self, index: int) -> np.ndarray:
        return self._get(index).image

    def sample(self, index: int) -> Sample:
        self.gt_reads += 1
        return self._get(index)


class ImagesOnlyView:
    """What amalgamation sees: ordered images, nothing else.

    There is deliberately no accessor for labels, depth, normals, or
    masks; consuming code cannot read ground truth through this type.
    """

    def __init__(self, dataset: SceneDataset, indices):
        self._dataset = dataset
        self.indices = tuple(indices)

    @property
    def count(self) -> int:
        return len(self.indices)

    def images(self, positions) -> np.ndarray:
        return np.stack([self._dataset.image(self.indices[p]) for p in positions])


class FullView:
    """Evaluation / teacher-training stream: complete samples, in order."""

    def __init__(self, dataset: SceneDataset, indices):
        self._dataset = dataset
        self.indices = tuple(indices)

    def __len__(self):
        return len(self.indices)

    def sample(self, position: int) -> Sample:
        return self._dataset.sample(self.indices[position])

    def __iter__(self):
        return (self.sample(p) for p in range(len(self)))


def split(config_or_dataset, train_count: int, eval_count: int,
          train_start: int = 0, eval_start=None):
    """Disjoint (images-only train view, full-ground-truth eval view)."""
    ds = (config_or_dataset if isinstance(config_or_dataset, SceneDataset)
          else SceneDataset(config_or_dataset))
    if eval_start is None:
        eval_start = train_start + train_count
    train_idx = range(train_start, train_start + train_count)
    eval_idx = range(eval_start, eval_start + eval_count)
    if set(train_idx) & set(eval_idx):
        raise ConfigurationError(
            f"train {train_idx} and eval {eval_idx} index ranges overlap")
    return ImagesOnlyView(ds, train_idx), FullView(ds, eval_idx)


def random_crop(image: np.ndarray, out_h: int, out_w: int, g) -> np.ndarray:
    """The one supported augmentation: a seeded random spatial crop."""
    c, h, w = image.shape
    if out_h > h or out_w > w:
        raise ConfigurationError(f"crop {out_h}x{out_w} exceeds image {h}x{w}")
    top = int(g.integers(0, h - out_h + 1))
    left = int(g.integers(0, w - out_w + 1))
    return image[:, top:top + out_h, left:left + out_w]
