"""Synthetic paired colour/thermal scenes with day/night regimes and thermal misalignment.

Scenes hold 1-4 objects over a background (class 0). Classes cycle through
four shapes; discs ("person") and rectangles ("car") are warm and show up in
the thermal image, triangles ("cone") and bars ("curb") are cold and only
show up in colour. Labels follow the colour image; the thermal image is
translated by a per-sample integer offset.

On disk::

    root/manifest.tsv        id  regime  dx  dy  split
    root/dataset.txt         generation settings, key=value
    root/color/<id>.ppm      P6
    root/thermal/<id>.pgm    P5
    root/labels/<id>.pgm     P5, one class index per pixel
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .netpbm import NetpbmError, ensure_dir, read_netpbm, to_uint8, write_pgm, write_ppm

SHAPES = ("disc", "rectangle", "triangle", "bar")
WARM_SHAPES = ("disc", "rectangle")
MANIFEST_HEADER = ("id", "regime", "dx", "dy", "split")
SPLITS = ("train", "val", "test")

# colour rendering; every object channel sits 0.45 away from the 0.5 background
_HUES = [
    (0.95, 0.95, 0.05),
    (0.05, 0.05, 0.95),
    (0.95, 0.05, 0.05),
    (0.05, 0.95, 0.05),
    (0.95, 0.05, 0.95),
    (0.05, 0.95, 0.95),
    (0.95, 0.95, 0.95),
    (0.05, 0.05, 0.05),
]
COLOR_BACKGROUND = 0.5
DAY_COLOR_NOISE = 0.05
NIGHT_ATTENUATION = 0.15
NIGHT_LEVEL = 0.25
NIGHT_COLOR_NOISE = 0.1
# night noise = per-pixel grain + smooth low-light blotches; 0.06^2 + 0.08^2 = 0.1^2
NIGHT_GRAIN = 0.06
NIGHT_BLOTCH = 0.08
NIGHT_BLOTCH_CELL = 8
THERMAL_BACKGROUND = 0.2
THERMAL_WARM = (0.85, 0.75)
THERMAL_NOISE = 0.05


@dataclass
class SegSample:
    id: str
    color: np.ndarray      # 3 x H x W, float32 in [0, 1]
    thermal: np.ndarray    # 1 x H x W, float32 in [0, 1]
    labels: np.ndarray     # H x W, int64 in [0, k)
    regime: str            # "day" | "night"
    shift: tuple[int, int]  # (dx, dy) applied to thermal


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    regime: str
    dx: int
    dy: int
    split: str


@dataclass
class DatasetManifest:
    records: list
    seed: int
    num_classes: int
    size: int
    settings: dict

    def ids(self, split: str | None = None, subset: str = "all") -> list[str]:
        return [r.id for r in self.records
                if (split is None or r.split == split) and (subset == "all" or r.regime == subset)]

    def record(self, sample_id: str) -> ManifestRecord:
        for r in self.records:
            if r.id == sample_id:
                return r
        raise KeyError(sample_id)


def class_shape(c: int) -> str:
    return SHAPES[(c - 1) % len(SHAPES)]


def is_warm(c: int) -> bool:
    return c > 0 and class_shape(c) in WARM_SHAPES


def class_hue(c: int) -> tuple[float, float, float]:
    return _HUES[(c - 1) % len(_HUES)]


# ---------------------------------------------------------------------------
# scene layout and rendering
# ---------------------------------------------------------------------------

def _paint(labels: np.ndarray, c: int, rng: np.random.Generator, scale: float) -> None:
    size = labels.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    shape = class_shape(c)
    if shape == "disc":
        r = rng.uniform(8, 12) * scale
        cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif shape == "rectangle":
        h, w = int(rng.integers(12, 19) * scale), int(rng.integers(18, 29) * scale)
        top, left = rng.integers(1, size - h - 1), rng.integers(1, size - w - 1)
        mask = (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
    elif shape == "triangle":
        base, height = rng.uniform(18, 28) * scale, rng.uniform(16, 24) * scale
        top = rng.uniform(1, size - height - 1)
        cx = rng.uniform(base / 2 + 1, size - base / 2 - 1)
        rel = (yy - top) / height
        mask = (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * base / 2)
    else:
        length, thick = int(rng.integers(26, 45) * scale), max(2, int(rng.integers(6, 10) * scale))
        if rng.random() < 0.5:
            length, thick = thick, length
        top, left = rng.integers(1, size - length - 1), rng.integers(1, size - thick - 1)
        mask = (yy >= top) & (yy < top + length) & (xx >= left) & (xx < left + thick)
    labels[mask] = c


def make_scene(rng: np.random.Generator, size: int, k: int, first_class: int) -> np.ndarray:
    """Label map with 1-4 objects; the first object has class ``first_class``."""
    labels = np.zeros((size, size), dtype=np.int64)
    scale = size / 64.0
    n_obj = int(rng.integers(1, 5))
    for j in range(n_obj):
        c = first_class if j == 0 else int(rng.integers(1, k))
        _paint(labels, c, rng, scale)
    return labels


def render_modalities(labels: np.ndarray, regime: str, rng: np.random.Generator,
                      shift: tuple[int, int] = (0, 0)) -> tuple[np.ndarray, np.ndarray]:
    """Colour (3 x H x W) and thermal (1 x H x W) images for a label map.

    Day colour: per-class hues on a grey background plus sigma 0.05 noise.
    Night colour: the same image with contrast scaled by 0.15 and sigma 0.1
    noise, split between per-pixel grain and blotches that vary over about
    ``NIGHT_BLOTCH_CELL`` pixels (independent per channel). Thermal is regime independent: warm classes are bright, cold
    classes are invisible; it is shifted by ``shift`` before noise is added.
    """
    if regime not in ("day", "night"):
        raise ValueError(f"unknown regime {regime!r}")
    H, W = labels.shape
    k_max = int(labels.max()) + 1
    bg = COLOR_BACKGROUND + rng.uniform(-0.02, 0.02, size=3)
    lut = np.empty((max(k_max, 1), 3))
    lut[0] = bg
    for c in range(1, k_max):
        lut[c] = class_hue(c)
    clean = lut[labels].transpose(2, 0, 1)
    if regime == "day":
        color = clean + rng.normal(0, DAY_COLOR_NOISE, size=clean.shape)
    else:
        color = (NIGHT_LEVEL + NIGHT_ATTENUATION * (clean - COLOR_BACKGROUND)
                 + rng.normal(0, NIGHT_GRAIN, size=clean.shape)
                 + NIGHT_BLOTCH * smooth_noise(rng, clean.shape, NIGHT_BLOTCH_CELL))

    heat = np.full(max(k_max, 1), THERMAL_BACKGROUND + rng.uniform(-0.02, 0.02))
    for c in range(1, k_max):
        if is_warm(c):
            heat[c] = THERMAL_WARM[WARM_SHAPES.index(class_shape(c))]
    thermal = apply_misalignment(heat[labels], *shift)
    thermal = thermal + rng.normal(0, THERMAL_NOISE, size=thermal.shape)
    return (np.clip(color, 0, 1).astype(np.float32),
            np.clip(thermal, 0, 1)[None].astype(np.float32))


def smooth_noise(rng: np.random.Generator, shape: tuple, cell: int) -> np.ndarray:
    """Unit-variance noise per channel, bilinearly interpolated from a grid with spacing ``cell``."""
    C, H, W = shape
    grid = rng.standard_normal((C, H // cell + 2, W // cell + 2))
    ys = (np.arange(H) + 0.5) / cell
    xs = (np.arange(W) + 0.5) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    g00 = grid[:, y0][:, :, x0]
    g01 = grid[:, y0][:, :, x0 + 1]
    g10 = grid[:, y0 + 1][:, :, x0]
    g11 = grid[:, y0 + 1][:, :, x0 + 1]
    field = (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
             + g10 * fy * (1 - fx) + g11 * fy * fx)
    return field / field.std(axis=(1, 2), keepdims=True)


def apply_misalignment(image: np.ndarray, dx: int, dy: int, max_shift: int | None = None) -> np.ndarray:
    """Translate by (dx, dy) pixels (content moves right/down), replicating edges."""
    if max_shift is not None and (abs(dx) > max_shift or abs(dy) > max_shift):
        raise ValueError(f"shift ({dx}, {dy}) exceeds bound {max_shift}")
    H, W = image.shape[-2:]
    rows = np.clip(np.arange(H) - dy, 0, H - 1)
    cols = np.clip(np.arange(W) - dx, 0, W - 1)
    return image[..., rows[:, None], cols[None, :]]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def regime_for(i: int, day_fraction: float) -> str:
    """Deterministic interleaving: exactly floor(n * day_fraction) day samples in any prefix n."""
    f = Fraction(day_fraction).limit_denominator(1_000_000)
    return "day" if (f * (i + 1)).__floor__() - (f * i).__floor__() == 1 else "night"


def _sample_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, i)))


def generate_sample(i: int, seed: int, size: int, k: int, max_shift: int,
                    day_fraction: float) -> SegSample:
    """Sample ``i`` of a dataset; depends only on (seed, i) and the settings."""
    rng = _sample_rng(seed, i)
    regime = regime_for(i, day_fraction)
    dx, dy = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    labels = make_scene(rng, size, k, first_class=1 + i % (k - 1))
    color, thermal = render_modalities(labels, regime, rng, (dx, dy))
    return SegSample(f"{i:05d}", color, thermal, labels, regime, (dx, dy))


def assign_splits(n: int, seed: int, fractions=(0.5, 0.25, 0.25)) -> list[str]:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    order = rng.permutation(n)
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    splits = [""] * n
    for rank, i in enumerate(order):
        splits[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return splits


def _generate_and_save(args):
    i, seed, size, k, max_shift, day_fraction, out_dir = args
    sample = generate_sample(i, seed, size, k, max_shift, day_fraction)
    save_sample(out_dir, sample)
    return sample.id, sample.regime, sample.shift


def generate_dataset(n: int, size: int, k: int, max_shift: int, day_fraction: float, seed: int,
                     out_dir, split_fractions=(0.5, 0.25, 0.25), workers: int = 1) -> DatasetManifest:
    if n < 1:
        raise ValueError("n must be >= 1")
    if size % 16 or size < 32:
        raise ValueError("size must be a multiple of 16 and at least 32")
    if k < 2 or k > 256:
        raise ValueError("class count must be in [2, 256]")
    if max_shift < 0 or max_shift >= size // 4:
        raise ValueError("max_shift must be in [0, size/4)")
    if not 0.0 <= day_fraction <= 1.0:
        raise ValueError("day_fraction must be in [0, 1]")
    if abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    for sub in ("color", "thermal", "labels"):
        ensure_dir(os.path.join(out_dir, sub))
    jobs = [(i, seed, size, k, max_shift, day_fraction, out_dir) for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_generate_and_save, jobs))
    else:
        results = [_generate_and_save(j) for j in jobs]
    splits = assign_splits(n, seed, split_fractions)
    records = [ManifestRecord(sid, regime, dx, dy, split)
               for (sid, regime, (dx, dy)), split in zip(results, splits)]
    settings = {"n": n, "size": size, "classes": k, "max_shift": max_shift,
                "day_fraction": day_fraction, "seed": seed,
                "split_fractions": ",".join(str(f) for f in split_fractions)}
    manifest = DatasetManifest(records, seed, k, size, settings)
    write_manifest(out_dir, manifest)
    return manifest


def write_manifest(root, manifest: DatasetManifest) -> None:
    with open(os.path.join(root, "manifest.tsv"), "w", encoding="utf-8", newline="\n") as f:
        f.write("\t".join(MANIFEST_HEADER) + "\n")
        for r in manifest.records:
            f.write(f"{r.id}\t{r.regime}\t{r.dx}\t{r.dy}\t{r.split}\n")
    with open(os.path.join(root, "dataset.txt"), "w", encoding="utf-8", newline="\n") as f:
        for key, value in manifest.settings.items():
            f.write(f"{key}={value}\n")


def read_manifest(root) -> DatasetManifest:
    path = os.path.join(root, "manifest.tsv")
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_HEADER:
        raise ValueError(f"{path}: bad header")
    records, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 fields")
        sid, regime, dx, dy, split = parts
        if sid in seen:
            raise ValueError(f"{path}:{lineno}: duplicate id {sid}")
        if regime not in ("day", "night") or split not in SPLITS:
            raise ValueError(f"{path}:{lineno}: bad regime/split")
        seen.add(sid)
        records.append(ManifestRecord(sid, regime, int(dx), int(dy), split))
    settings = {}
    cfg_path = os.path.join(root, "dataset.txt")
    if os.path.exists(cfg_path):
        with open(cfg_path, encoding="utf-8") as f:
            for line in f:
                key, _, value = line.rstrip("\n").partition("=")
                if key:
                    settings[key] = value
    return DatasetManifest(records, int(settings.get("seed", 0)),
                           int(settings.get("classes", 0)), int(settings.get("size", 0)), settings)


# ---------------------------------------------------------------------------
# sample I/O
# ---------------------------------------------------------------------------

def _paths(root, sample_id: str) -> tuple[str, str, str]:
    return (os.path.join(root, "color", f"{sample_id}.ppm"),
            os.path.join(root, "thermal", f"{sample_id}.pgm"),
            os.path.join(root, "labels", f"{sample_id}.pgm"))


def save_sample(root, sample: SegSample) -> None:
    pc, pt, pl = _paths(root, sample.id)
    for p in (pc, pt, pl):
        ensure_dir(os.path.dirname(p))
    write_ppm(pc, to_uint8(sample.color.transpose(1, 2, 0)))
    write_pgm(pt, to_uint8(sample.thermal[0]))
    if sample.labels.min() < 0 or sample.labels.max() > 255:
        raise ValueError("labels must fit in 0..255")
    write_pgm(pl, sample.labels.astype(np.uint8))


def load_sample(root, sample_id: str, record: ManifestRecord | None = None,
                size: int | None = None, modalities=("color", "thermal")) -> SegSample:
    """Read one sample. ``modalities`` limits which images are read from disk."""
    pc, pt, pl = _paths(root, sample_id)
    labels = read_netpbm(pl)
    if labels.ndim != 2:
        raise NetpbmError(f"{pl}: labels must be a P5 graymap")
    H, W = labels.shape
    if size is not None and (H, W) != (size, size):
        raise NetpbmError(f"{pl}: size {W}x{H} does not match manifest size {size}")
    color = thermal = None
    if "color" in modalities:
        c = read_netpbm(pc)
        if c.shape != (H, W, 3):
            raise NetpbmError(f"{pc}: expected {W}x{H} P6")
        color = (c.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()
    else:
        color = np.zeros((3, H, W), dtype=np.float32)
    if "thermal" in modalities:
        t = read_netpbm(pt)
        if t.shape != (H, W):
            raise NetpbmError(f"{pt}: expected {W}x{H} P5")
        thermal = (t.astype(np.float32) / 255.0)[None]
    else:
        thermal = np.zeros((1, H, W), dtype=np.float32)
    regime, shift = "day", (0, 0)
    if record is not None:
        regime, shift = record.regime, (record.dx, record.dy)
    return SegSample(sample_id, color, thermal, labels.astype(np.int64), regime, shift)


class SegDataset:
    """Manifest plus lazily cached, stacked per-split arrays."""

    def __init__(self, root, modalities=("color", "thermal")):
        self.root = root
        self.manifest = read_manifest(root)
        self.modalities = tuple(modalities)
        self._cache: dict = {}

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    def ids(self, split: str | None = None, subset: str = "all") -> list[str]:
        return self.manifest.ids(split, subset)

    def load(self, sample_id: str) -> SegSample:
        return load_sample(self.root, sample_id, self.manifest.record(sample_id),
                           self.manifest.size or None, self.modalities)

    def samples(self, split: str, subset: str = "all") -> list[SegSample]:
        key = (split, subset)
        if key not in self._cache:
            self._cache[key] = [self.load(i) for i in self.ids(split, subset)]
        return self._cache[key]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def augment(sample: SegSample, rng: np.random.Generator, crop: int | None = None) -> SegSample:
    """Shared random crop and horizontal flip (p = 0.5) for all three maps."""
    H, W = sample.labels.shape
    crop = crop or H
    if crop > H or crop > W:
        raise ValueError(f"crop {crop} larger than image {H}x{W}")
    if crop % 16:
        raise ValueError("crop must be a multiple of 16")
    top = int(rng.integers(0, H - crop + 1))
    left = int(rng.integers(0, W - crop + 1))
    flip = bool(rng.random() < 0.5)
    win = (slice(top, top + crop), slice(left, left + crop))
    color = sample.color[:, win[0], win[1]]
    thermal = sample.thermal[:, win[0], win[1]]
    labels = sample.labels[win]
    if flip:
        color, thermal, labels = color[..., ::-1], thermal[..., ::-1], labels[..., ::-1]
    return replace(sample, color=np.ascontiguousarray(color),
                   thermal=np.ascontiguousarray(thermal), labels=np.ascontiguousarray(labels))


# ---------------------------------------------------------------------------
# measurements
# ---------------------------------------------------------------------------

def object_contrast(image: np.ndarray, labels: np.ndarray, c: int) -> float:
    """Channel-averaged |mean over class-c pixels - mean over background pixels|."""
    obj, bg = labels == c, labels == 0
    if not obj.any() or not bg.any():
        return float("nan")
    image = image.reshape(-1, *labels.shape)
    return float(np.mean([abs(ch[obj].mean() - ch[bg].mean()) for ch in image]))
