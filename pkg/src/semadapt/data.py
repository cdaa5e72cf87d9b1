"""Procedural two-domain toy benchmark and its on-disk format.

Scenes are street-like layouts with five classes (sky, ground, road, box,
disc).  The same scene can be rendered in a flat "synthetic" source style or a
shifted, lit, noisy and textured "real" target style, which gives a genuine
domain gap for a segmentation network trained on one style only.

Images are binary PPM (P6), label maps binary PGM (P5) with 255 marking ignored
pixels.  A dataset directory holds a flat ``key=value`` manifest.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

CLASSES = ("sky", "ground", "road", "box", "disc")
SKY, GROUND, ROAD, BOX, DISC = range(5)
PGM_IGNORE = 255
MANIFEST_NAME = "manifest.txt"


def derive_rng(seed: int, *labels) -> np.random.Generator:
    """Generator seeded by ``seed`` and a path of labels (strings or ints)."""
    key = [int(seed) & 0xFFFFFFFF]
    for lab in labels:
        key.append(zlib.crc32(str(lab).encode()) if isinstance(lab, str) else int(lab))
    return np.random.default_rng(np.random.SeedSequence(key))


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneSpec:
    """Geometry of one scene.  Ranges are fractions of the image size.

    horizon ~ U[0.30, 0.50]; road bottom centre ~ U[0.3, 0.7], bottom
    half-width ~ U[0.25, 0.45], vanishing x ~ U[0.4, 0.6], top half-width ~
    U[0.02, 0.08]; 1-4 boxes with width ~ U[0.10, 0.25], height ~ U[0.10,
    0.30], base on the ground; 0-3 discs with radius ~ U[0.04, 0.10], centre y
    ~ U[0.1, 0.9].
    """

    seed: int
    size: int
    horizon: float
    road: tuple
    boxes: list = field(default_factory=list)
    discs: list = field(default_factory=list)


def gen_scene(seed: int, size: int = 64) -> tuple:
    """Return ``(labels [H,W] uint8, SceneSpec)``, a pure function of ``seed``."""
    rng = derive_rng(seed, "scene")
    s = size
    horizon = rng.uniform(0.30, 0.50)
    road = (rng.uniform(0.3, 0.7), rng.uniform(0.25, 0.45), rng.uniform(0.4, 0.6),
            rng.uniform(0.02, 0.08))
    boxes = []
    for _ in range(rng.integers(1, 5)):
        bw, bh = rng.uniform(0.10, 0.25), rng.uniform(0.10, 0.30)
        base = rng.uniform(horizon + 0.05, 1.0)
        x0 = rng.uniform(0.0, 1.0 - bw)
        boxes.append((x0, base - bh, bw, bh))
    discs = [(rng.uniform(0.0, 1.0), rng.uniform(0.1, 0.9), rng.uniform(0.04, 0.10))
             for _ in range(rng.integers(0, 4))]
    spec = SceneSpec(seed, size, horizon, road, boxes, discs)

    yy, xx = np.mgrid[0:s, 0:s]
    fy, fx = (yy + 0.5) / s, (xx + 0.5) / s
    labels = np.where(fy < horizon, SKY, GROUND).astype(np.uint8)
    cx, half_bottom, vx, half_top = road
    t = np.clip((fy - horizon) / (1.0 - horizon), 0.0, 1.0)
    centre = vx + (cx - vx) * t
    half = half_top + (half_bottom - half_top) * t
    labels[(fy >= horizon) & (np.abs(fx - centre) <= half)] = ROAD
    for x0, y0, bw, bh in boxes:
        labels[(fx >= x0) & (fx < x0 + bw) & (fy >= y0) & (fy < y0 + bh)] = BOX
    for dx, dy, r in discs:
        labels[(fx - dx) ** 2 + (fy - dy) ** 2 <= r * r] = DISC
    return labels, spec


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

@dataclass
class DomainStyle:
    """Appearance of a domain: per-class colour, vertical lighting, texture, noise."""

    palette: np.ndarray
    gradient: float = 0.0
    noise: float = 0.02
    texture: dict = field(default_factory=dict)

    @classmethod
    def source(cls) -> "DomainStyle":
        palette = np.array([
            [-0.3, 0.1, 0.8],    # sky
            [0.1, 0.5, -0.2],    # ground
            [-0.4, -0.4, -0.4],  # road
            [0.7, -0.2, -0.3],   # box
            [0.8, 0.7, -0.5],    # disc
        ])
        return cls(palette, gradient=0.0, noise=0.02)

    @classmethod
    def target(cls, shift: float = 1.0) -> "DomainStyle":
        """Palette moved ``shift`` of the way towards a distinct "real" palette, plus
        lighting, texture and stronger noise."""
        real = np.array([
            [0.5, 0.5, 0.6],     # sky
            [-0.3, 0.0, -0.4],   # ground
            [0.1, -0.1, 0.1],    # road
            [0.1, -0.5, 0.5],    # box
            [0.4, 0.9, 0.1],     # disc
        ])
        src = cls.source().palette
        return cls(src + shift * (real - src), gradient=0.3, noise=0.05,
                   texture={GROUND: 0.15, ROAD: 0.15})


def render_domain(scene, style: DomainStyle, seed: int) -> np.ndarray:
    """Colour a scene: palette + lighting gradient + texture + noise, clamped to [−1,1].

    ``scene`` is a :class:`SceneSpec` or a label map.  Ground gets an 8-pixel
    checkerboard and road 6-pixel vertical stripes when the style has texture
    for them.  Returns float32 [3,H,W].
    """
    labels = gen_scene(scene.seed, scene.size)[0] if isinstance(scene, SceneSpec) else np.asarray(scene)
    h, w = labels.shape
    rng = derive_rng(seed, "render")
    img = style.palette[labels].transpose(2, 0, 1).astype(np.float64)
    if style.gradient:
        ramp = style.gradient * (0.5 - np.arange(h) / max(h - 1, 1))
        img += ramp[None, :, None]
    yy, xx = np.mgrid[0:h, 0:w]
    for cls_id, amp in style.texture.items():
        if cls_id == GROUND:
            pattern = np.where(((yy // 8) + (xx // 8)) % 2 == 0, amp, -amp)
        else:
            pattern = np.where((xx // 3) % 2 == 0, amp, -amp)
        img += np.where(labels == cls_id, pattern, 0.0)[None]
    if style.noise:
        img += rng.normal(0.0, style.noise, img.shape)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_bytes(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

class DatasetError(Exception):
    """Missing or malformed dataset file."""


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_ppm(path, img: np.ndarray) -> None:
    """Write a [3,H,W] float image in [−1,1] (or uint8 [H,W,3]) as binary PPM."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = to_bytes(arr).transpose(1, 2, 0)
    h, w, _ = arr.shape
    _atomic_write(Path(path), f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes())


def write_pgm(path, labels: np.ndarray) -> None:
    """Write a label map; −1 (ignore) is stored as 255."""
    arr = np.asarray(labels)
    arr = np.where(arr < 0, PGM_IGNORE, arr).astype(np.uint8)
    h, w = arr.shape
    _atomic_write(Path(path), f"P5\n{w} {h}\n255\n".encode() + arr.tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DatasetError(f"{path}: file not found") from None
    if raw[:2] != magic:
        raise DatasetError(f"{path}: bad magic {raw[:2]!r}, expected {magic!r}")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise DatasetError(f"{path}: malformed header {tokens!r}") from None
    if maxval != 255:
        raise DatasetError(f"{path}: only maxval 255 is supported, got {maxval}")
    body = raw[pos:]
    if len(body) != w * h * channels:
        raise DatasetError(f"{path}: expected {w * h * channels} payload bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def read_ppm_bytes(path) -> np.ndarray:
    """Raw uint8 [H,W,3]."""
    return _read_netpbm(path, b"P6", 3)


def read_ppm(path) -> np.ndarray:
    """Float32 [3,H,W] in [−1,1]."""
    return from_bytes(read_ppm_bytes(path)).transpose(2, 0, 1).copy()


def read_pgm(path) -> np.ndarray:
    """Int64 label map with ignore mapped back to −1."""
    arr = _read_netpbm(path, b"P5", 1).astype(np.int64)
    arr[arr == PGM_IGNORE] = -1
    return arr


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

SPLIT_KEYS = {
    # split: (count key, image template key, label template key)
    "source": ("n_train_s", "source_images", "source_labels"),
    "target": ("n_train_t", "target_images", "target_labels_eval"),
    "val": ("n_val_t", "val_images", "val_labels_eval"),
}


@dataclass
class DatasetManifest:
    """Layout of a two-domain dataset.

    Target-train and validation labels sit under ``eval_only/``; training code
    never reads them (only evaluation and the oracle upper bound do).
    """

    root: str
    seed: int = 0
    image_size: int = 64
    n_train_s: int = 200
    n_train_t: int = 200
    n_val_t: int = 50
    source_images: str = "source/images/{index:05d}.ppm"
    source_labels: str = "source/labels/{index:05d}.pgm"
    target_images: str = "target/images/{index:05d}.ppm"
    target_labels_eval: str = "eval_only/target_labels/{index:05d}.pgm"
    val_images: str = "val/images/{index:05d}.ppm"
    val_labels_eval: str = "eval_only/val_labels/{index:05d}.pgm"

    INT_KEYS = ("seed", "image_size", "n_train_s", "n_train_t", "n_val_t")

    def count(self, split: str) -> int:
        return getattr(self, SPLIT_KEYS[split][0])

    def image_path(self, split: str, index: int) -> Path:
        return Path(self.root) / getattr(self, SPLIT_KEYS[split][1]).format(index=index)

    def label_path(self, split: str, index: int) -> Path:
        return Path(self.root) / getattr(self, SPLIT_KEYS[split][2]).format(index=index)

    def to_text(self) -> str:
        keys = ["root", *self.INT_KEYS, "source_images", "source_labels", "target_images",
                "target_labels_eval", "val_images", "val_labels_eval"]
        return "".join(f"{k}={getattr(self, k)}\n" for k in keys)


def split_style(split: str) -> DomainStyle:
    return DomainStyle.source() if split == "source" else DomainStyle.target()


def iter_split(seed: int, split: str, n: int, size: int = 64):
    """Yield ``(image, labels)`` for the first ``n`` items of a split, as written to disk."""
    style = split_style(split)
    for i in range(n):
        scene_seed = _scene_seed(seed, split, i)
        labels, _ = gen_scene(scene_seed, size)
        yield render_domain(labels, style, scene_seed), labels


def synth_split(seed: int, split: str, n: int, size: int = 64) -> tuple:
    """In-memory twin of a written split: byte-quantized images [N,3,H,W] and labels [N,H,W]."""
    items = list(iter_split(seed, split, n, size))
    if not items:
        return np.zeros((0, 3, size, size), np.float32), np.zeros((0, size, size), np.int64)
    images = np.stack([from_bytes(to_bytes(img)) for img, _ in items])
    labels = np.stack([lab for _, lab in items]).astype(np.int64)
    return images, labels


def write_dataset(manifest: DatasetManifest) -> DatasetManifest:
    """Generate and write every image and label map listed by ``manifest``."""
    root = Path(manifest.root)
    root.mkdir(parents=True, exist_ok=True)
    for split in SPLIT_KEYS:
        items = iter_split(manifest.seed, split, manifest.count(split), manifest.image_size)
        for i, (img, labels) in enumerate(items):
            write_ppm(manifest.image_path(split, i), img)
            write_pgm(manifest.label_path(split, i), labels)
    _atomic_write(root / MANIFEST_NAME, manifest.to_text().encode())
    return manifest


def _scene_seed(seed: int, split: str, index: int) -> int:
    return int(derive_rng(seed, split, index).integers(0, 2 ** 31 - 1))


def read_dataset(path) -> DatasetManifest:
    """Load a manifest (path to the file or its directory) and check every file exists.

    The directory holding the manifest is taken as the dataset root, so a
    dataset can be moved.
    """
    path = Path(path)
    mpath = path / MANIFEST_NAME if path.is_dir() else path
    try:
        text = mpath.read_text()
    except FileNotFoundError:
        raise DatasetError(f"{mpath}: manifest not found") from None
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"{mpath}:{lineno}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    known = {f for f in DatasetManifest.__dataclass_fields__}
    unknown = set(values) - known
    if unknown:
        raise DatasetError(f"{mpath}: unknown manifest keys {sorted(unknown)}")
    for k in DatasetManifest.INT_KEYS:
        if k in values:
            values[k] = int(values[k])
    values["root"] = str(mpath.parent)
    manifest = DatasetManifest(**values)
    for split in SPLIT_KEYS:
        for i in range(manifest.count(split)):
            for p in (manifest.image_path(split, i), manifest.label_path(split, i)):
                if not p.exists():
                    raise DatasetError(f"{p}: listed in manifest but missing")
    return manifest


def load_split(manifest: DatasetManifest, split: str, with_labels: bool = False,
               limit: Optional[int] = None):
    """Images [N,3,H,W] float32 (and label maps [N,H,W] int64 if asked)."""
    n = manifest.count(split) if limit is None else min(limit, manifest.count(split))
    images = np.stack([read_ppm(manifest.image_path(split, i)) for i in range(n)]) if n else \
        np.zeros((0, 3, manifest.image_size, manifest.image_size), np.float32)
    if not with_labels:
        return images
    labels = np.stack([read_pgm(manifest.label_path(split, i)) for i in range(n)]) if n else \
        np.zeros((0, manifest.image_size, manifest.image_size), np.int64)
    return images, labels
