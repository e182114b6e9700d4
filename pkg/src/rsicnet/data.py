"""PPM codec, procedural scene datasets, manifests and stratified splits."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
SCHEMA_VERSION = 1


class PPMError(ValueError):
    pass


# ---------------------------------------------------------------- PPM P6

def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise PPMError(f"PPM encoder needs uint8 [H, W, 3], got {image.dtype} {image.shape}")
    h, w = image.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes()


def decode_ppm(raw: bytes) -> np.ndarray:
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise PPMError("truncated PPM header")
        if raw[pos:pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            pos = len(raw) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise PPMError(f"not a binary PPM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise PPMError(f"bad PPM header fields {fields[1:]}") from None
    if maxval != 255 or w < 1 or h < 1:
        raise PPMError(f"unsupported PPM geometry {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    need = w * h * 3
    body = raw[pos:pos + need]
    if len(body) != need:
        raise PPMError(f"PPM raster truncated: {len(body)} of {need} bytes")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray):
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


# ---------------------------------------------------------------- scene families
# Each family draws a binary foreground mask on a [size x size] grid. Every
# family is closed under 90-degree rotation, so the offline rotation stage
# never turns one class into another.

def _grid(size: int):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c, indexing="ij")


def _stripes(g, size, yy, xx):
    theta = g.uniform(0, np.pi)
    period = g.uniform(4.0, 7.0)
    u = yy * np.cos(theta) + xx * np.sin(theta) + g.uniform(0, period)
    return (u % period) < period * g.uniform(0.35, 0.55)


def _checker(g, size, yy, xx):
    cell = g.uniform(3.0, 5.5)
    oy, ox = g.uniform(0, 2 * cell, size=2)
    return ((np.floor((yy + oy) / cell) + np.floor((xx + ox) / cell)) % 2) == 0


def _rings(g, size, yy, xx):
    cy, cx = g.uniform(0.2 * size, 0.8 * size, size=2)
    period = g.uniform(4.0, 6.5)
    r = np.hypot(yy - cy, xx - cx)
    return (r % period) < period / 2


def _dots(g, size, yy, xx):
    mask = np.zeros(yy.shape, bool)
    for _ in range(g.integers(8, 16)):
        cy, cx = g.uniform(0, size, size=2)
        mask |= np.hypot(yy - cy, xx - cx) < g.uniform(1.0, 2.2)
    return mask


def _disk(g, size, yy, xx):
    r = g.uniform(0.18, 0.32) * size
    cy, cx = g.uniform(r, size - r, size=2)
    return np.hypot(yy - cy, xx - cx) < r


def _square(g, size, yy, xx):
    half = g.uniform(0.15, 0.28) * size
    cy, cx = g.uniform(half * 1.2, size - half * 1.2, size=2)
    a = g.uniform(0, np.pi / 2)
    u = (yy - cy) * np.cos(a) + (xx - cx) * np.sin(a)
    v = -(yy - cy) * np.sin(a) + (xx - cx) * np.cos(a)
    return (np.abs(u) < half) & (np.abs(v) < half)


def _cross(g, size, yy, xx):
    cy, cx = g.uniform(0.3 * size, 0.7 * size, size=2)
    t = g.uniform(1.5, 2.8)
    arm = g.uniform(0.25, 0.4) * size
    dy, dx = np.abs(yy - cy), np.abs(xx - cx)
    return ((dy < t) & (dx < arm)) | ((dx < t) & (dy < arm))


def _grid_lines(g, size, yy, xx):
    spacing = g.uniform(5.0, 8.0)
    oy, ox = g.uniform(0, spacing, size=2)
    t = g.uniform(0.8, 1.4)
    return (((yy + oy) % spacing) < t) | (((xx + ox) % spacing) < t)


def _triangle(g, size, yy, xx):
    cy, cx = g.uniform(0.35 * size, 0.65 * size, size=2)
    r = g.uniform(0.22, 0.34) * size
    a0 = g.uniform(0, 2 * np.pi)
    pts = [(cy + r * np.sin(a0 + k * 2 * np.pi / 3), cx + r * np.cos(a0 + k * 2 * np.pi / 3)) for k in range(3)]
    sides = []
    for (y1, x1), (y2, x2) in zip(pts, pts[1:] + pts[:1]):
        sides.append((x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1))
    sides = np.stack(sides)
    return np.all(sides >= 0, axis=0) | np.all(sides <= 0, axis=0)


def _blobs(g, size, yy, xx):
    field_ = np.zeros(yy.shape)
    for _ in range(g.integers(4, 8)):
        cy, cx = g.uniform(0, size, size=2)
        s = g.uniform(0.08, 0.16) * size
        field_ += g.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return field_ > 0.5


def _annulus(g, size, yy, xx):
    r = g.uniform(0.2, 0.33) * size
    t = g.uniform(1.5, 2.8)
    cy, cx = g.uniform(r + t, size - r - t, size=2)
    return np.abs(np.hypot(yy - cy, xx - cx) - r) < t


def _diagonal_x(g, size, yy, xx):
    cy, cx = g.uniform(0.3 * size, 0.7 * size, size=2)
    t = g.uniform(1.2, 2.2)
    arm = g.uniform(0.25, 0.4) * size
    u, v = (yy - cy + xx - cx) / np.sqrt(2), (yy - cy - xx + cx) / np.sqrt(2)
    return ((np.abs(u) < t) & (np.abs(v) < arm)) | ((np.abs(v) < t) & (np.abs(u) < arm))


FAMILIES = {
    "stripes": _stripes,
    "checker": _checker,
    "dots": _dots,
    "disk": _disk,
    "square": _square,
    "cross": _cross,
    "rings": _rings,
    "grid": _grid_lines,
    "triangle": _triangle,
    "blobs": _blobs,
    "annulus": _annulus,
    "diagonal_x": _diagonal_x,
}
FAMILY_NAMES = list(FAMILIES)
GOLDEN = 0.618033988749895  # spreads class base hues around the wheel
HUE_JITTER = 0.12


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def render_scene(family: str, size: int, g: np.random.Generator, base_hue: float | None = None,
                 hue_jitter: float = 0.5) -> np.ndarray:
    """One uint8 ``[size, size, 3]`` image of ``family`` with random nuisance factors.

    Background hue is drawn within ``hue_jitter`` of ``base_hue`` (uniform over
    the wheel when ``base_hue`` is None).
    """
    yy, xx = _grid(size)
    mask = FAMILIES[family](g, size, yy, xx).astype(np.float64)
    hue = g.uniform(0, 1) if base_hue is None else (base_hue + g.uniform(-hue_jitter, hue_jitter)) % 1.0
    bg = _hsv_to_rgb(hue, g.uniform(0.3, 0.7), g.uniform(0.3, 0.6))
    fg = _hsv_to_rgb((hue + g.uniform(0.3, 0.7)) % 1.0, g.uniform(0.4, 0.9), g.uniform(0.6, 0.95))
    # illumination ramp plus sensor noise
    a = g.uniform(0, 2 * np.pi)
    ramp = 1.0 + g.uniform(0.0, 0.3) * ((yy * np.cos(a) + xx * np.sin(a)) / size - 0.5)
    img = bg + mask[..., None] * (fg - bg)
    img = img * ramp[..., None] + g.normal(0, g.uniform(0.02, 0.06), size=img.shape)
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def render_dataset(classes: int, per_class: int, size: int, seed: int, hue_jitter: float = HUE_JITTER):
    """Class-balanced ``(images uint8 [N,H,W,3], labels int [N])`` in class-major order."""
    if classes < 2 or classes > len(FAMILY_NAMES):
        raise ValueError(f"classes must be in 2..{len(FAMILY_NAMES)}, got {classes}")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if size < 16:
        raise ValueError(f"image size must be >= 16, got {size}")
    images = np.empty((classes * per_class, size, size, 3), dtype=np.uint8)
    labels = np.repeat(np.arange(classes), per_class)
    for c in range(classes):
        for i in range(per_class):
            g = np.random.default_rng([seed, c, i])
            images[c * per_class + i] = render_scene(FAMILY_NAMES[c], size, g, (c * GOLDEN) % 1.0, hue_jitter)
    return images, labels


# ---------------------------------------------------------------- manifests

@dataclass
class DatasetManifest:
    name: str
    num_classes: int
    class_names: list[str]
    image_size: tuple[int, int]
    files: list[list]  # [relative path, label]
    splits: dict[str, list[list]] = field(default_factory=dict)
    generator_seed: int | None = None
    root: Path | None = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("root")
        d["image_size"] = list(self.image_size)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict, root=None) -> "DatasetManifest":
        d = dict(d)
        d.pop("schema_version", None)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d, root=None if root is None else Path(root))

    def save(self, path=None):
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        atomic_write_text(path, json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        return cls.from_dict(json.loads(path.read_text()), root=path.parent)

    def load_split(self, split: str):
        """``(images float32 [N,H,W,3] in [0,1], labels int [N])`` for a split name or ``"all"``."""
        entries = self.files if split == "all" else self.splits.get(split)
        if entries is None:
            raise KeyError(f"manifest has no split {split!r}; run split first")
        images = np.stack([read_ppm(self.root / f) for f, _ in entries]) if entries else \
            np.zeros((0, *self.image_size, 3), np.uint8)
        return images.astype(np.float32) / 255.0, np.array([lab for _, lab in entries], dtype=np.int64)


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode())


def gen_synthetic_dataset(out_dir, classes: int, per_class: int, size: int, seed: int,
                          name: str = "synthetic") -> DatasetManifest:
    images, labels = render_dataset(classes, per_class, size, seed)
    root = Path(out_dir)
    files = []
    for c in range(classes):
        (root / "images" / FAMILY_NAMES[c]).mkdir(parents=True, exist_ok=True)
    for k, (img, lab) in enumerate(zip(images, labels)):
        rel = f"images/{FAMILY_NAMES[lab]}/{k % per_class:05d}.ppm"
        atomic_write_bytes(root / rel, encode_ppm(img))
        files.append([rel, int(lab)])
    manifest = DatasetManifest(name, classes, FAMILY_NAMES[:classes], (size, size), files,
                               generator_seed=seed, root=root)
    manifest.save()
    return manifest


def stratified_indices(labels: np.ndarray, train_fraction: float, seed: int):
    """Per-class shuffled split; each class contributes ``round(n_c * fraction)`` training items."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(np.floor(len(idx) * train_fraction + 0.5))
        if k == 0:
            raise ValueError(f"train fraction {train_fraction} leaves class {c} with no training images")
        if k == len(idx):
            raise ValueError(f"train fraction {train_fraction} leaves class {c} with no test images")
        train.extend(sorted(idx[:k].tolist()))
        test.extend(sorted(idx[k:].tolist()))
    return np.array(sorted(train)), np.array(sorted(test))


def split_dataset(manifest: DatasetManifest, train_fraction: float, seed: int) -> DatasetManifest:
    labels = np.array([lab for _, lab in manifest.files])
    tr, te = stratified_indices(labels, train_fraction, seed)
    manifest.splits = {"train": [manifest.files[i] for i in tr], "test": [manifest.files[i] for i in te]}
    return manifest
