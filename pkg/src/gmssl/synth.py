"""Synthetic two-view batches with known correspondences.

Every batch item is a smooth random feature field over the unit square. Two
random crops (with optional horizontal flip and additive noise) of the same
field give the paired views, so item ``i`` of one view matches item ``i`` of
the other and ``pos`` records where each cell came from.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import as_tensor, atomic_write_text, load_tensor, make_rng, save_tensor

MIN_CROP = 0.25
MIN_OVERLAP_AREA = 0.04


@dataclass
class DataConfig:
    D: int = 8
    R: int = 7
    S: int = 7
    G: int = 32
    crop_min: float = 0.5
    crop_max: float = 1.0
    flip_prob: float = 0.5
    noise_sigma: float = 0.02
    scene_sigma: float = 2.0
    scene_channels: int = 0

    def validate(self):
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if self.G < 4:
            raise ValueError("G must be >= 4")
        if self.R < 2 or self.S < 2:
            raise ValueError("R and S must be >= 2")
        if not MIN_CROP <= self.crop_min <= self.crop_max <= 1.0:
            raise ValueError(f"need {MIN_CROP} <= crop_min <= crop_max <= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.scene_sigma < 0:
            raise ValueError("scene_sigma must be >= 0")
        if not 0 <= self.scene_channels <= self.D:
            raise ValueError("scene_channels must lie in [0, D] (0 means all)")


@dataclass(frozen=True)
class ViewTransform:
    x0: float
    y0: float
    w: float
    h: float
    hflip: bool = False
    noise_sigma: float = 0.0

    def __post_init__(self):
        tol = 1e-9
        if self.x0 < -tol or self.y0 < -tol:
            raise ValueError("crop origin must be non-negative")
        if self.x0 + self.w > 1 + tol or self.y0 + self.h > 1 + tol:
            raise ValueError("crop must stay inside the unit square")
        if self.w < MIN_CROP - tol or self.h < MIN_CROP - tol:
            raise ValueError(f"crop sides must be >= {MIN_CROP}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @classmethod
    def identity(cls):
        return cls(0.0, 0.0, 1.0, 1.0)


@dataclass
class ViewBatch:
    y: np.ndarray  # N x D x R x S
    pos: np.ndarray  # N x R x S x 2, (x, y) in original coordinates

    def __post_init__(self):
        self.y = as_tensor(self.y)
        self.pos = as_tensor(self.pos)
        n, _, r, s = self.y.shape
        if self.pos.shape != (n, r, s, 2):
            raise ValueError(f"pos shape {self.pos.shape} does not fit y shape {self.y.shape}")
        if n < 2:
            raise ValueError("a view batch needs N >= 2")
        if self.pos.min() < 0 or self.pos.max() > 1:
            raise ValueError("pos entries must lie in [0, 1]")

    @property
    def n(self):
        return self.y.shape[0]


def gen_scene(rng, D=8, G=32, scene_sigma=0.0, scene_channels=0):
    """Smooth random field, D x G x G: white noise box-filtered (3x3) twice.

    ``scene_sigma`` adds a constant per-channel offset drawn once per scene
    (only on the first ``scene_channels`` channels when that is non-zero), so
    that two crops of the same scene share a global signature.
    """
    if D < 1 or G < 4:
        raise ValueError("need D >= 1 and G >= 4")
    field = rng.standard_normal((D, G, G))
    for _ in range(2):
        field = ndimage.uniform_filter(field, size=(1, 3, 3), mode="reflect")
    if scene_sigma > 0:
        c = scene_channels or D
        offset = np.zeros(D)
        offset[:c] = scene_sigma * rng.standard_normal(c)
        field = field + offset[:, None, None]
    return field


def lattice_positions(t, R, S):
    """Unit-square coordinates sampled by each cell of a view (before noise)."""
    u = np.linspace(0.0, 1.0, S)
    if t.hflip:
        u = u[::-1]
    xs = t.x0 + t.w * u
    ys = t.y0 + t.h * np.linspace(0.0, 1.0, R)
    pos = np.empty((R, S, 2))
    pos[..., 0] = xs[None, :]
    pos[..., 1] = ys[:, None]
    return np.clip(pos, 0.0, 1.0)


def apply_view(scene, t, R, S, rng=None):
    """Bilinearly sample ``scene`` on the crop lattice. Returns (y: D x R x S, pos: R x S x 2)."""
    D, G, _ = scene.shape
    pos = lattice_positions(t, R, S)
    rows = pos[..., 1] * (G - 1)
    cols = pos[..., 0] * (G - 1)
    y = np.stack(
        [ndimage.map_coordinates(scene[d], [rows, cols], order=1, mode="nearest") for d in range(D)]
    )
    if t.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 needs an rng")
        y = y + t.noise_sigma * rng.standard_normal(y.shape)
    return y, pos


def overlap_area(a, b):
    w = min(a.x0 + a.w, b.x0 + b.w) - max(a.x0, b.x0)
    h = min(a.y0 + a.h, b.y0 + b.h) - max(a.y0, b.y0)
    return max(w, 0.0) * max(h, 0.0)


def random_transform(rng, cfg):
    w = rng.uniform(cfg.crop_min, cfg.crop_max)
    h = rng.uniform(cfg.crop_min, cfg.crop_max)
    x0 = rng.uniform(0.0, 1.0 - w)
    y0 = rng.uniform(0.0, 1.0 - h)
    flip = bool(rng.random() < cfg.flip_prob)
    return ViewTransform(x0, y0, w, h, flip, cfg.noise_sigma)


def random_transform_pair(rng, cfg):
    while True:
        s, t = random_transform(rng, cfg), random_transform(rng, cfg)
        if overlap_area(s, t) >= MIN_OVERLAP_AREA:
            return s, t


def make_batch(rng, N, cfg=None, transforms=None):
    """Two views of N fresh scenes; item i of both views comes from scene i.

    ``transforms`` optionally fixes the (s, t) transform pair used for every item.
    """
    cfg = cfg or DataConfig()
    if N < 2:
        raise ValueError("N must be >= 2")
    seed = int(rng.integers(0, 2**63 - 1))
    ys, ps, yt, pt = [], [], [], []
    for i in range(N):
        item_rng = make_rng(seed, i)
        scene = gen_scene(item_rng, cfg.D, cfg.G, cfg.scene_sigma, cfg.scene_channels)
        s, t = transforms if transforms is not None else random_transform_pair(item_rng, cfg)
        y, p = apply_view(scene, s, cfg.R, cfg.S, item_rng)
        ys.append(y)
        ps.append(p)
        y, p = apply_view(scene, t, cfg.R, cfg.S, item_rng)
        yt.append(y)
        pt.append(p)
    return ViewBatch(np.stack(ys), np.stack(ps)), ViewBatch(np.stack(yt), np.stack(pt))


# --- batch directories -------------------------------------------------------

BATCH_FILES = {"ys": "ys.gmt", "pos_s": "pos_s.gmt", "yt": "yt.gmt", "pos_t": "pos_t.gmt"}
LEGACY_NAMES = {"pos_s": "post_s.gmt"}


def save_batch(directory, xs, xt, seed, cfg):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(directory / BATCH_FILES["ys"], xs.y)
    save_tensor(directory / BATCH_FILES["pos_s"], xs.pos)
    save_tensor(directory / BATCH_FILES["yt"], xt.y)
    save_tensor(directory / BATCH_FILES["pos_t"], xt.pos)
    n, d, r, s = xs.y.shape
    manifest = {"N": n, "D": d, "R": r, "S": s, "seed": int(seed), "cfg": asdict(cfg)}
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_batch(directory):
    directory = Path(directory)

    def find(key):
        p = directory / BATCH_FILES[key]
        if not p.exists() and key in LEGACY_NAMES and (directory / LEGACY_NAMES[key]).exists():
            p = directory / LEGACY_NAMES[key]
        return load_tensor(p)

    xs = ViewBatch(find("ys"), find("pos_s"))
    xt = ViewBatch(find("yt"), find("pos_t"))
    if xs.y.shape != xt.y.shape:
        raise ValueError(f"view shapes differ: {xs.y.shape} vs {xt.y.shape}")
    return xs, xt


def list_batches(root):
    """Batch directories under ``root`` (``root`` itself if it holds one)."""
    root = Path(root)
    if (root / BATCH_FILES["ys"]).exists():
        return [root]
    found = sorted(p.parent for p in root.glob(f"*/{BATCH_FILES['ys']}"))
    if not found:
        raise FileNotFoundError(f"no batch directories under {root}")
    return found
