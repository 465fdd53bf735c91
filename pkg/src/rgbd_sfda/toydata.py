"""Synthetic two-domain RGB-D segmentation benchmark.

Scenes are a sky/backdrop, a ground plane receding to a horizon, and boxes,
balls and poles standing on the ground. Object size and disparity are tied
to where the object stands, so depth carries class-relevant geometry.

The source domain is clean: exact disparity, flat palette colours. The target
domain shifts the palette hue, adds high-frequency texture, and corrupts
disparity with noise and missing pixels (stored as 0).
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import imageio
from .numerics import make_rng

CLASS_NAMES = ("background", "ground", "box", "ball", "pole")
NUM_CLASSES = len(CLASS_NAMES)
BACKGROUND, GROUND, BOX, BALL, POLE = range(NUM_CLASSES)
MANIFEST_NAME = "manifest.json"
_DOMAIN_SALT = {"source": 0x5EED, "target": 0x7A67}


class DatasetError(RuntimeError):
    pass


def _default_palette():
    return [
        [140, 185, 235],  # background
        [115, 100, 85],  # ground
        [205, 70, 55],  # box
        [70, 175, 80],  # ball
        [225, 205, 70],  # pole
    ]


def _default_depth_ranges():
    # disparity ranges; larger = closer
    return {"background": [2.0, 4.0], "ground": [5.0, 40.0], "box": [10.0, 30.0],
            "ball": [14.0, 34.0], "pole": [8.0, 26.0]}


@dataclass
class ToySceneSpec:
    image_size: int = 64
    palette: list = field(default_factory=_default_palette)
    depth_ranges: dict = field(default_factory=_default_depth_ranges)
    color_jitter: float = 12.0
    hole_prob: float = 0.3
    disparity_noise: float = 1.0
    hue_shift: float = 20.0
    color_cast: list = field(default_factory=lambda: [-40.0, 0.0, 40.0])  # per-channel offset
    texture_amp: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if not 0.0 <= self.hole_prob <= 1.0:
            raise ValueError("hole_prob must lie in [0, 1]")
        if len(self.palette) != NUM_CLASSES:
            raise ValueError(f"palette needs {NUM_CLASSES} colours")
        if len({tuple(c) for c in self.palette}) != NUM_CLASSES:
            raise ValueError("palette colours must be distinct per class")
        if len(self.color_cast) != 3:
            raise ValueError("color_cast needs one offset per channel")
        if self.disparity_noise < 0 or self.texture_amp < 0:
            raise ValueError("noise amplitudes must be non-negative")

    @property
    def disparity_max(self):
        return max(hi for _, hi in self.depth_ranges.values()) + 4 * self.disparity_noise + 8.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Dataset:
    """Images stacked along axis 0. ``labels`` is None for unlabeled data."""

    rgb: np.ndarray  # N x H x W x 3, values in [0, 255]
    disparity: np.ndarray  # N x H x W, >= 0, 0 = invalid
    valid: np.ndarray  # N x H x W bool
    labels: np.ndarray = None  # N x H x W int, 255 = ignore
    name: str = ""

    def __len__(self):
        return self.rgb.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.rgb[idx], self.disparity[idx], self.valid[idx],
                       None if self.labels is None else self.labels[idx], self.name)

    def unlabeled(self):
        return Dataset(self.rgb, self.disparity, self.valid, None, self.name)


def hue_rotation(degrees):
    """3x3 matrix rotating RGB vectors about the grey axis (row-vector convention)."""
    a = np.deg2rad(degrees)
    k = np.ones(3) / np.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    rot = np.eye(3) + np.sin(a) * kx + (1 - np.cos(a)) * kx @ kx
    return rot.T


def _image_rng(spec, domain, index):
    return make_rng((spec.seed ^ index) * 1_000_003 + _DOMAIN_SALT[domain])


def render_scene(spec, domain, index):
    """One (rgb, disparity, labels) triple; disparity is exact (pre-corruption)."""
    rng = _image_rng(spec, domain, index)
    n = spec.image_size
    dr = spec.depth_ranges
    rows = np.arange(n)[:, None].astype(float)
    cols = np.arange(n)[None, :].astype(float)
    labels = np.full((n, n), BACKGROUND, dtype=np.int64)
    disp = np.full((n, n), rng.uniform(*dr["background"]))
    horizon = int(rng.uniform(0.3, 0.5) * n)
    g_near, g_far = dr["ground"][1], dr["ground"][0]
    ground_rows = rows[horizon:, 0]
    g_disp = g_far + (g_near - g_far) * (ground_rows - horizon) / max(n - 1 - horizon, 1)
    labels[horizon:] = GROUND
    disp[horizon:] = g_disp[:, None]
    colors = np.empty((n, n, 3))
    palette = np.asarray(spec.palette, dtype=float)

    def jitter(c):
        return palette[c] + rng.normal(0.0, spec.color_jitter, 3)

    colors[:] = jitter(BACKGROUND)
    colors[horizon:] = jitter(GROUND)

    objects = []
    for _ in range(int(rng.integers(2, 6))):
        cls = int(rng.choice([BOX, BALL, POLE]))
        d = rng.uniform(*dr[CLASS_NAMES[cls]])
        objects.append((d, cls))
    # far objects first so near ones occlude them
    for d, cls in sorted(objects):
        base = horizon + (d - g_far) / (g_near - g_far) * (n - 1 - horizon)
        cx = rng.uniform(0, n)
        scale = d / 20.0 * n / 64.0
        if cls == BOX:
            half_w = rng.uniform(4, 7) * scale
            height = rng.uniform(0.8, 1.6) * half_w * 2
            region = (np.abs(cols - cx) <= half_w) & (rows <= base) & (rows >= base - height)
            obj_disp = np.full((n, n), d)
        elif cls == BALL:
            r = rng.uniform(3.5, 6) * scale
            cy = base - r
            dist2 = (rows - cy) ** 2 + (cols - cx) ** 2
            region = dist2 <= r * r
            obj_disp = d + 0.15 * r * np.sqrt(np.clip(1 - dist2 / (r * r), 0, 1))
        else:
            half_w = max(1.0, rng.uniform(0.8, 1.4) * scale)
            height = rng.uniform(2.0, 3.0) * 10 * scale
            region = (np.abs(cols - cx) <= half_w) & (rows <= base) & (rows >= base - height)
            obj_disp = np.full((n, n), d)
        labels[region] = cls
        disp[region] = obj_disp[region]
        colors[region] = jitter(cls)

    # soft shading so colour is not perfectly flat
    shade = 1.0 + 0.08 * np.sin(rows / n * np.pi * rng.uniform(0.5, 1.5) + rng.uniform(0, 6.3))
    return colors * shade[..., None], disp, labels, rng


def _apply_target_shift(spec, rgb, disp, labels, rng):
    n = spec.image_size
    if spec.hue_shift:
        rgb = rgb @ hue_rotation(spec.hue_shift)
    rgb = rgb + np.asarray(spec.color_cast, dtype=float)
    if spec.texture_amp:
        rows = np.arange(n)[:, None]
        cols = np.arange(n)[None, :]
        fx, fy = rng.uniform(0.6, 1.2, 2)
        stripes = np.sin(fx * cols + fy * rows + rng.uniform(0, 6.3))
        grain = rng.normal(0.0, 1.0, (n, n))
        tex = spec.texture_amp * (0.5 * stripes + 0.5 * grain)
        rgb = rgb + tex[..., None]
    disp = disp + rng.normal(0.0, spec.disparity_noise, disp.shape) if spec.disparity_noise else disp
    disp = np.maximum(disp, 1.0 / imageio.DISPARITY_SCALE)
    holes = rng.random(disp.shape) < spec.hole_prob
    disp = np.where(holes, 0.0, disp)
    return rgb, disp


def generate_split(spec, domain, count, start=0):
    """Render ``count`` images of one domain in memory, quantized exactly as on disk."""
    if domain not in _DOMAIN_SALT:
        raise ValueError(f"unknown domain {domain!r}")
    n = spec.image_size
    rgb = np.empty((count, n, n, 3))
    disp = np.empty((count, n, n))
    labels = np.empty((count, n, n), dtype=np.int64)
    for k in range(count):
        r, d, lab, rng = render_scene(spec, domain, start + k)
        if domain == "target":
            r, d = _apply_target_shift(spec, r, d, lab, rng)
        rgb[k] = np.clip(np.rint(r), 0, 255)
        disp[k] = imageio.disparity_to_raw(d) / imageio.DISPARITY_SCALE
        labels[k] = lab
    return Dataset(rgb, disp, disp > 0, labels, domain)


# ---------------------------------------------------------------------------
# on-disk layout: <out>/<split>/{rgb,disparity,label}/NNNN.png + manifest.json


@dataclass
class DatasetManifest:
    root: str
    split: str
    files: list  # [rgb, disparity, label] relative paths
    checksums: dict  # relative path -> sha256 hex

    def to_json(self):
        return json.dumps({"split": self.split, "files": self.files, "checksums": self.checksums},
                          indent=1, sort_keys=True)


def _sha256(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def write_split(data, out_dir, split, nested=True):
    """Write ``data`` to ``out_dir/split`` (or straight into ``out_dir`` when not nested)."""
    root = os.path.join(out_dir, split) if nested else out_dir
    for sub in ("rgb", "disparity", "label"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    files, sums = [], {}
    for i in range(len(data)):
        rel = [f"rgb/{i:04d}.png", f"disparity/{i:04d}.png", f"label/{i:04d}.png"]
        try:
            imageio.write_rgb(os.path.join(root, rel[0]), data.rgb[i])
            imageio.write_disparity(os.path.join(root, rel[1]), data.disparity[i])
            imageio.write_label(os.path.join(root, rel[2]), data.labels[i])
        except OSError as exc:
            raise DatasetError(f"cannot write {os.path.join(root, rel[0])}: {exc}") from exc
        for r in rel:
            sums[r] = _sha256(os.path.join(root, r))
        files.append(rel)
    manifest = DatasetManifest(root, split, files, sums)
    with open(os.path.join(root, MANIFEST_NAME), "w") as f:
        f.write(manifest.to_json())
    return manifest


def gen_toy(spec, n_source, n_target, out_dir):
    """Write both splits plus ``scene_spec.json``; returns (source, target) manifests."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "scene_spec.json"), "w") as f:
            json.dump(spec.to_dict(), f, indent=1, sort_keys=True)
    except OSError as exc:
        raise DatasetError(f"cannot write to {out_dir}: {exc}") from exc
    src = write_split(generate_split(spec, "source", n_source), out_dir, "source")
    tgt = write_split(generate_split(spec, "target", n_target), out_dir, "target")
    return src, tgt


def load_manifest(split_dir):
    path = os.path.join(split_dir, MANIFEST_NAME)
    try:
        with open(path) as f:
            d = json.load(f)
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    return DatasetManifest(split_dir, d["split"], d["files"], d["checksums"])


def load_split(split_dir, with_labels=True, verify=True):
    m = load_manifest(split_dir)
    rgbs, disps, valids, labels = [], [], [], []
    for rel in m.files:
        paths = [os.path.join(split_dir, r) for r in rel]
        for r, p in zip(rel, paths):
            if not os.path.exists(p):
                raise DatasetError(f"missing file {p}")
            if verify and _sha256(p) != m.checksums.get(r):
                raise DatasetError(f"checksum mismatch for {p}")
        rgbs.append(imageio.read_rgb(paths[0]).astype(np.float64))
        d, v = imageio.read_disparity(paths[1])
        disps.append(d)
        valids.append(v)
        if with_labels:
            labels.append(imageio.read_label(paths[2]))
    if not rgbs:
        raise DatasetError(f"split {split_dir} is empty")
    return Dataset(np.stack(rgbs), np.stack(disps), np.stack(valids),
                   np.stack(labels) if with_labels else None, m.split)
