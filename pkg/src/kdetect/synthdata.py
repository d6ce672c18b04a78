"""Deterministic synthetic endoscopy-like corpora.

Two corpora are produced:

* a single-class *polyp proxy* (large, stands in for a polyp-only corpus), and
* a small, imbalanced three-class *EDD proxy* with classes ``ndbe``,
  ``neoplasia`` and ``polyp``.

Every image is rendered from its own RNG stream keyed by
``(seed, corpus, split, index)``, so output never depends on generation order.
Per-split image and instance counts are fixed by :data:`POLYP_MANIFEST` and
:data:`EDD_MANIFEST`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

GENERATOR_VERSION = "kdetect-synth/1"
IMAGE_SIZE = 225
MIN_BOX_AREA = 16.0
SPLITS = ("train", "val", "test")

RAW_CLASSES = ("NDBE", "suspicious", "HGD", "cancer", "polyp")
MERGED_CLASSES = ("ndbe", "neoplasia", "polyp")
MERGE_MAP = {
    "NDBE": "ndbe",
    "suspicious": "neoplasia",
    "HGD": "neoplasia",
    "cancer": "neoplasia",
    "polyp": "polyp",
}

# images per split and class-instance counts per split
POLYP_MANIFEST = {
    "images": {"train": 800, "val": 100, "test": 100},
    "instances": {"polyp": {"train": 858, "val": 111, "test": 102}},
}
EDD_MANIFEST = {
    "images": {"train": 376, "val": 38, "test": 38},
    "instances": {
        "ndbe": {"train": 239, "val": 28, "test": 19},
        "neoplasia": {"train": 183, "val": 21, "test": 31},
        "polyp": {"train": 172, "val": 24, "test": 32},
    },
}
MAX_OBJECTS_PER_IMAGE = 3
MAX_POLYPS_PER_IMAGE = 2

_CORPUS_CODES = {"polyp-proxy": 11, "edd-proxy": 23, "unseen": 37}
_SPLIT_CODES = {"train": 1, "val": 2, "test": 3}


@dataclass(frozen=True)
class ClassCatalog:
    raw_classes: tuple[str, ...] = RAW_CLASSES
    merged_classes: tuple[str, ...] = MERGED_CLASSES
    merge_map: dict = field(default_factory=lambda: dict(MERGE_MAP))

    def __post_init__(self):
        if set(self.merge_map) != set(self.raw_classes):
            raise ValueError("merge_map must cover every raw class")
        if set(self.merge_map.values()) != set(self.merged_classes):
            raise ValueError("merge_map must reach every merged class")

    def index(self, name: str) -> int:
        return self.merged_classes.index(name)

    def merge(self, raw_name: str) -> str:
        return self.merge_map[raw_name]

    def to_dict(self) -> dict:
        return {
            "raw_classes": list(self.raw_classes),
            "merged_classes": list(self.merged_classes),
            "merge_map": dict(sorted(self.merge_map.items())),
        }


CATALOG = ClassCatalog()


@dataclass
class ImageSample:
    """RGB raster plus labelled boxes.

    ``boxes`` is ``(n, 4)`` float64 in corner form; ``labels`` holds merged
    class indices into :data:`MERGED_CLASSES`.
    """

    image: np.ndarray
    boxes: np.ndarray
    labels: np.ndarray
    source_id: str

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.image.dtype != np.uint8 or self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError("image must be an (H, W, 3) uint8 array")
        if len(self.boxes) != len(self.labels):
            raise ValueError("boxes and labels differ in length")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def validate(self, min_area: float = MIN_BOX_AREA) -> None:
        if len(self.boxes) == 0:
            raise ValueError(f"{self.source_id}: no annotations")
        b = self.boxes
        if np.any(b[:, 0] < 0) or np.any(b[:, 1] < 0):
            raise ValueError(f"{self.source_id}: box outside image")
        if np.any(b[:, 2] > self.width) or np.any(b[:, 3] > self.height):
            raise ValueError(f"{self.source_id}: box outside image")
        area = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
        if np.any(area < min_area):
            raise ValueError(f"{self.source_id}: box smaller than {min_area} px^2")


@dataclass
class DataSet:
    name: str
    split: str
    samples: list
    catalog: ClassCatalog = CATALOG
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def class_counts(self) -> dict:
        counts = {c: 0 for c in self.catalog.merged_classes}
        for s in self.samples:
            for lab in s.labels:
                counts[self.catalog.merged_classes[lab]] += 1
        return counts

    def subset(self, indices: Sequence[int], split: str | None = None) -> "DataSet":
        return DataSet(
            self.name,
            split or self.split,
            [self.samples[i] for i in indices],
            self.catalog,
            dict(self.manifest),
        )


# -- rendering ----------------------------------------------------------------


@dataclass(frozen=True)
class RenderParams:
    """Knobs of the image renderer; recorded verbatim in every manifest."""

    background_rgb: tuple = (206.0, 128.0, 122.0)
    background_jitter: float = 12.0
    gradient_amplitude: float = 22.0
    vignette: tuple = (0.2, 0.4)
    specular_dots: tuple = (3, 10)
    noise_sigma: float = 3.0
    polyp_rgb: tuple = (150.0, 58.0, 70.0)
    ndbe_rgb: tuple = (188.0, 96.0, 96.0)
    neoplasia_rgb: tuple = (128.0, 78.0, 98.0)
    color_jitter: float = 10.0
    size_scale: tuple = (0.8, 1.2)
    brightness: float = 1.0
    hue_shift_deg: float = 0.0
    ellipse_like_neoplasia: float = 0.3

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


DEFAULT_RENDER = RenderParams()
UNSEEN_RENDER = RenderParams(
    background_rgb=(214.0, 140.0, 112.0),
    gradient_amplitude=30.0,
    noise_sigma=4.5,
    size_scale=(0.65, 1.05),
    brightness=0.85,
    hue_shift_deg=12.0,
)


def _image_rng(seed: int, corpus: str, split: str, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence([seed, _CORPUS_CODES[corpus], _SPLIT_CODES[split], index])
    return np.random.default_rng(ss)


def _pixel_grid(size: int = IMAGE_SIZE):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return xx + 0.5, yy + 0.5


def _background(rng, p: RenderParams, xx, yy) -> np.ndarray:
    base = np.asarray(p.background_rgb) + rng.normal(0.0, p.background_jitter, 3)
    ang = rng.uniform(0.0, 2.0 * math.pi)
    size = xx.shape[0]
    ramp = ((xx - size / 2) * math.cos(ang) + (yy - size / 2) * math.sin(ang)) / size
    img = base[None, None, :] + p.gradient_amplitude * ramp[..., None] * np.array([1.0, 0.8, 0.8])
    r2 = ((xx - size / 2) ** 2 + (yy - size / 2) ** 2) / (size / 2) ** 2 / 2.0
    img *= (1.0 - rng.uniform(*p.vignette) * r2)[..., None]
    for _ in range(int(rng.integers(p.specular_dots[0], p.specular_dots[1] + 1))):
        cx, cy = rng.uniform(0, size, 2)
        rad = rng.uniform(0.8, 2.2)
        m = (xx - cx) ** 2 + (yy - cy) ** 2 <= rad * rad
        img[m] = (250.0, 248.0, 242.0)
    return img


def _ellipse_rho(xx, yy, cx, cy, a, b, theta):
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return np.sqrt((u / a) ** 2 + (v / b) ** 2), u, v


def _ellipse_bbox(cx, cy, a, b, theta):
    c, s = math.cos(theta), math.sin(theta)
    hx = math.sqrt((a * c) ** 2 + (b * s) ** 2)
    hy = math.sqrt((a * s) ** 2 + (b * c) ** 2)
    return np.array([cx - hx, cy - hy, cx + hx, cy + hy])


def _mask_bbox(mask: np.ndarray) -> np.ndarray | None:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


def _jittered(rng, rgb, jitter):
    return np.asarray(rgb) + rng.normal(0.0, jitter, 3)


def _shape_polyp(rng, p: RenderParams, scale: float):
    a = rng.uniform(17.0, 46.0) * scale
    b = a * rng.uniform(0.7, 1.0)
    return {"kind": "polyp", "a": a, "b": b, "theta": rng.uniform(0, math.pi),
            "rgb": _jittered(rng, p.polyp_rgb, p.color_jitter)}


def _shape_ndbe(rng, p: RenderParams, scale: float):
    a = rng.uniform(28.0, 55.0) * scale
    b = a / rng.uniform(2.2, 3.4)
    # near-axis-aligned so the box stays tight around the elongated patch
    theta = rng.choice([0.0, math.pi / 2]) + rng.uniform(-0.25, 0.25)
    return {"kind": "ndbe", "a": a, "b": b, "theta": theta,
            "rgb": _jittered(rng, p.ndbe_rgb, p.color_jitter)}


def _shape_neoplasia(rng, p: RenderParams, scale: float):
    ellipse_like = rng.uniform() < p.ellipse_like_neoplasia
    r0 = rng.uniform(16.0, 40.0) * scale
    if ellipse_like:
        mix = rng.uniform(0.55, 0.9)
        rgb = mix * np.asarray(p.polyp_rgb) + (1 - mix) * np.asarray(p.neoplasia_rgb)
        amps = rng.uniform(0.0, 0.03, 4)
        aspect = rng.uniform(0.7, 1.0)
        speckle = rng.uniform(0.06, 0.12)
    else:
        rgb = np.asarray(p.neoplasia_rgb)
        amps = rng.uniform(0.06, 0.2, 4)
        aspect = rng.uniform(0.6, 1.0)
        speckle = rng.uniform(0.15, 0.3)
    return {"kind": "neoplasia", "r0": r0, "aspect": aspect, "theta": rng.uniform(0, math.pi),
            "amps": amps, "phases": rng.uniform(0, 2 * math.pi, 4),
            "rgb": _jittered(rng, rgb, p.color_jitter), "speckle": speckle,
            "ellipse_like": bool(ellipse_like)}


def _extent(shape: dict) -> float:
    if shape["kind"] == "neoplasia":
        return shape["r0"] * (1.0 + float(np.sum(shape["amps"])))
    return shape["a"]


def _paint(img, rng, shape, cx, cy, xx, yy) -> np.ndarray | None:
    """Draw ``shape`` centred at ``(cx, cy)``; returns its bounding box."""
    kind = shape["kind"]
    if kind == "polyp":
        rho, u, v = _ellipse_rho(xx, yy, cx, cy, shape["a"], shape["b"], shape["theta"])
        mask = rho <= 1.0
        dome = 0.78 + 0.32 * np.clip(1.0 - rho ** 2, 0.0, 1.0)
        col = shape["rgb"][None, :] * dome[mask][:, None]
        img[mask] = col
        ha, hb = 0.22 * shape["a"], 0.16 * shape["b"]
        hrho, _, _ = _ellipse_rho(
            xx, yy,
            cx - 0.35 * shape["a"] * math.cos(shape["theta"]) + 0.35 * shape["b"] * math.sin(shape["theta"]),
            cy - 0.35 * shape["a"] * math.sin(shape["theta"]) - 0.35 * shape["b"] * math.cos(shape["theta"]),
            ha, hb, shape["theta"],
        )
        hl = np.clip(1.3 * (1.0 - hrho), 0.0, 1.0) * mask
        img += hl[..., None] * (np.array([252.0, 250.0, 245.0]) - img)
        return _ellipse_bbox(cx, cy, shape["a"], shape["b"], shape["theta"])
    if kind == "ndbe":
        rho, _, _ = _ellipse_rho(xx, yy, cx, cy, shape["a"], shape["b"], shape["theta"])
        alpha = 0.55 * np.clip((1.0 - rho) / 0.35, 0.0, 1.0)
        img += alpha[..., None] * (shape["rgb"][None, None, :] - img)
        return _ellipse_bbox(cx, cy, shape["a"], shape["b"], shape["theta"])
    # neoplasia: star-shaped blob with multiplicative speckle
    c, s = math.cos(shape["theta"]), math.sin(shape["theta"])
    u = (xx - cx) * c + (yy - cy) * s
    v = ((yy - cy) * c - (xx - cx) * s) / shape["aspect"]
    phi = np.arctan2(v, u)
    radius = shape["r0"] * (1.0 + sum(
        amp * np.cos((k + 2) * phi + ph)
        for k, (amp, ph) in enumerate(zip(shape["amps"], shape["phases"]))
    ))
    mask = np.hypot(u, v) <= radius
    if not mask.any():
        return None
    tex = 1.0 + shape["speckle"] * rng.standard_normal(int(mask.sum()))
    img[mask] = shape["rgb"][None, :] * tex[:, None]
    return _mask_bbox(mask)


def _box_overlap(box, others) -> float:
    if not others:
        return 0.0
    o = np.asarray(others)
    iw = np.clip(np.minimum(box[2], o[:, 2]) - np.maximum(box[0], o[:, 0]), 0, None)
    ih = np.clip(np.minimum(box[3], o[:, 3]) - np.maximum(box[1], o[:, 1]), 0, None)
    return float(np.max(iw * ih))


_SHAPES = {"polyp": _shape_polyp, "ndbe": _shape_ndbe, "neoplasia": _shape_neoplasia}


def render_image(
    rng: np.random.Generator, classes: Sequence[str], params: RenderParams = DEFAULT_RENDER,
    size: int = IMAGE_SIZE,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one image containing one object per entry of ``classes``.

    Returns the uint8 raster and the ``(n, 4)`` boxes in the same order.
    """
    xx, yy = _pixel_grid(size)
    img = _background(rng, params, xx, yy)
    boxes: list = []
    margin = 3.0
    for name in classes:
        scale = rng.uniform(*params.size_scale)
        shape = _SHAPES[name](rng, params, scale)
        placed = None
        for attempt in range(60):
            if attempt and attempt % 15 == 0:
                for key in ("a", "b", "r0"):
                    if key in shape:
                        shape[key] *= 0.8
            ext = _extent(shape)
            lo, hi = ext + margin, size - ext - margin
            if lo >= hi:
                continue
            cx, cy = rng.uniform(lo, hi, 2)
            guess = np.array([cx - ext, cy - ext, cx + ext, cy + ext])
            if _box_overlap(guess, boxes) == 0.0:
                placed = (cx, cy)
                break
        if placed is None:
            # dense image: accept the least-overlapping of a fixed set of spots
            ext = _extent(shape)
            cands = rng.uniform(ext + margin, max(ext + margin + 1e-6, size - ext - margin), (32, 2))
            ov = [_box_overlap(np.array([x - ext, y - ext, x + ext, y + ext]), boxes) for x, y in cands]
            placed = tuple(cands[int(np.argmin(ov))])
        box = _paint(img, rng, shape, placed[0], placed[1], xx, yy)
        box = np.clip(box, 0.0, float(size))
        boxes.append(box)
    img = img + rng.normal(0.0, params.noise_sigma, img.shape)
    img = _hue_rotate(img * params.brightness, params.hue_shift_deg)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), np.array(boxes).reshape(-1, 4)


def _hue_rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0.0:
        return img
    # rotation about the grey axis of RGB space
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    k = 1.0 / 3.0
    sq = math.sqrt(k)
    m = np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + k * (1 - c), k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + k * (1 - c)],
    ])
    return img @ m.T


# -- corpus generation ----------------------------------------------------------


def _allocate(rng, n_images: int, class_counts: dict, max_per_image: int) -> list[list[str]]:
    """Distribute exact per-class instance counts over ``n_images`` images.

    Every image receives at least one instance and at most ``max_per_image``.
    """
    pool = [name for name in sorted(class_counts) for _ in range(class_counts[name])]
    total = len(pool)
    if not n_images <= total <= n_images * max_per_image:
        raise ValueError(f"cannot place {total} instances in {n_images} images")
    extra_slots = np.repeat(np.arange(n_images), max_per_image - 1)
    chosen = rng.choice(len(extra_slots), size=total - n_images, replace=False)
    per_image = np.ones(n_images, dtype=np.int64)
    np.add.at(per_image, extra_slots[chosen], 1)
    pool = [pool[i] for i in rng.permutation(total)]
    out, pos = [], 0
    for k in per_image:
        out.append(pool[pos:pos + k])
        pos += k
    return out


def _generate_split(corpus, split, seed, n_images, class_counts, params, name,
                    max_per_image: int = MAX_OBJECTS_PER_IMAGE) -> DataSet:
    alloc_rng = np.random.default_rng(
        np.random.SeedSequence([seed, _CORPUS_CODES[corpus], _SPLIT_CODES[split], 0xA110C])
    )
    layout = _allocate(alloc_rng, n_images, class_counts, max_per_image)
    samples = []
    for idx, classes in enumerate(layout):
        rng = _image_rng(seed, corpus, split, idx)
        img, boxes = render_image(rng, classes, params)
        labels = [CATALOG.index(c) for c in classes]
        sample = ImageSample(img, boxes, labels, f"{corpus}/{split}/{idx:06d}")
        sample.validate()
        samples.append(sample)
    multiplicity = np.bincount([len(c) for c in layout], minlength=max_per_image + 1)
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "corpus": corpus,
        "split": split,
        "seed": int(seed),
        "image_size": [IMAGE_SIZE, IMAGE_SIZE],
        "num_images": n_images,
        "counts": {c: int(class_counts.get(c, 0)) for c in MERGED_CLASSES},
        "objects_per_image": {str(k): int(v) for k, v in enumerate(multiplicity) if k > 0},
        "rendering": params.to_dict(),
        "catalog": CATALOG.to_dict(),
    }
    return DataSet(name, split, samples, CATALOG, manifest)


def generate_polyp_proxy(seed: int, params: RenderParams = DEFAULT_RENDER):
    """Single-class corpus: 800/100/100 images holding 858/111/102 polyps."""
    return tuple(
        _generate_split(
            "polyp-proxy", split, seed, POLYP_MANIFEST["images"][split],
            {"polyp": POLYP_MANIFEST["instances"]["polyp"][split]}, params, "polyp-proxy",
            MAX_POLYPS_PER_IMAGE,
        )
        for split in SPLITS
    )


def generate_edd_proxy(seed: int, confusion: float = 0.3, params: RenderParams = DEFAULT_RENDER):
    """Three-class corpus with the imbalanced per-split counts of the EDD manifest.

    ``confusion`` is the fraction of neoplasia instances drawn ellipse-like
    and polyp-coloured.
    """
    params = replace(params, ellipse_like_neoplasia=confusion)
    return tuple(
        _generate_split(
            "edd-proxy", split, seed, EDD_MANIFEST["images"][split],
            {c: EDD_MANIFEST["instances"][c][split] for c in MERGED_CLASSES}, params, "edd-proxy",
        )
        for split in SPLITS
    )


def generate_unseen_test(seed: int, confusion: float = 0.3, params: RenderParams = UNSEEN_RENDER) -> DataSet:
    """Distribution-shifted test set with the EDD test-split class mix."""
    params = replace(params, ellipse_like_neoplasia=confusion)
    return _generate_split(
        "unseen", "test", seed, EDD_MANIFEST["images"]["test"],
        {c: EDD_MANIFEST["instances"][c]["test"] for c in MERGED_CLASSES}, params, "unseen",
    )


# -- splitting ------------------------------------------------------------------


def split_dataset(samples: Sequence[ImageSample], ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle followed by a contiguous train/val/test partition.

    Val and test receive ``floor(ratio * n)`` samples (at least one each);
    the rounding remainder goes to train.
    """
    n = len(samples)
    if n < 3:
        raise ValueError("need at least 3 samples to form three non-empty splits")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) <= 0:
        raise ValueError("ratios must be three positive numbers summing to 1")
    n_val = max(1, int(math.floor(ratios[1] * n + 1e-9)))
    n_test = max(1, int(math.floor(ratios[2] * n + 1e-9)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError("split leaves no training samples")
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5911])).permutation(n)
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple([samples[i] for i in p] for p in parts)


def concat(*datasets: DataSet, split: str = "train") -> DataSet:
    samples = [s for d in datasets for s in d.samples]
    return DataSet(datasets[0].name, split, samples, datasets[0].catalog, dict(datasets[0].manifest))


def kfold_partitions(data: DataSet, k: int = 3, seed: int = 0) -> list[tuple[DataSet, DataSet]]:
    """``k`` (train, val) pairs whose validation folds partition ``data``.

    Fold sizes differ by at most one; the first ``len(data) % k`` folds are
    the larger ones.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    n = len(data)
    if n < k:
        raise ValueError(f"dataset of {n} samples cannot form {k} folds")
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0xF01D])).permutation(n)
    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    folds, pos = [], 0
    for sz in sizes:
        folds.append(np.sort(perm[pos:pos + sz]))
        pos += sz
    pairs = []
    for i in range(k):
        train_idx = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        pairs.append((data.subset(train_idx, "train"), data.subset(folds[i], "val")))
    return pairs


# -- on-disk format ---------------------------------------------------------------


def write_ppm(path: Path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    payload = data[pos + 1:]
    if len(payload) != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_dataset(ds: DataSet, directory: str | Path) -> Path:
    """Write one split: ``manifest.json`` plus ``NNNNNN.ppm`` / ``NNNNNN.json`` pairs."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    names = ds.catalog.merged_classes
    for i, s in enumerate(ds.samples):
        write_ppm(out / f"{i:06d}.ppm", s.image)
        ann = [
            {"x_min": float(b[0]), "y_min": float(b[1]), "x_max": float(b[2]),
             "y_max": float(b[3]), "class": names[lab]}
            for b, lab in zip(s.boxes, s.labels)
        ]
        (out / f"{i:06d}.json").write_text(_dumps(ann))
    manifest = dict(ds.manifest)
    manifest.update({
        "name": ds.name,
        "split": ds.split,
        "num_images": len(ds),
        "counts": ds.class_counts(),
        "catalog": ds.catalog.to_dict(),
        "source_ids": [s.source_id for s in ds.samples],
    })
    manifest.setdefault("generator_version", GENERATOR_VERSION)
    (out / "manifest.json").write_text(_dumps(manifest))
    return out


def load_dataset(directory: str | Path) -> DataSet:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    catalog = CATALOG
    ids = manifest.get("source_ids")
    samples = []
    for i in range(manifest["num_images"]):
        img = read_ppm(d / f"{i:06d}.ppm")
        ann = json.loads((d / f"{i:06d}.json").read_text())
        boxes = [[a["x_min"], a["y_min"], a["x_max"], a["y_max"]] for a in ann]
        try:
            labels = [catalog.index(a["class"]) for a in ann]
        except ValueError as exc:
            raise ValueError(f"{d / f'{i:06d}.json'}: unknown class") from exc
        sid = ids[i] if ids else f"{d.name}/{i:06d}"
        samples.append(ImageSample(img, boxes, labels, sid))
    return DataSet(manifest.get("name", d.parent.name), manifest.get("split", d.name),
                   samples, catalog, manifest)


def save_corpus(splits: dict, directory: str | Path) -> Path:
    root = Path(directory)
    for split, ds in splits.items():
        save_dataset(ds, root / split)
    return root


def load_corpus(directory: str | Path) -> dict:
    root = Path(directory)
    return {p.name: load_dataset(p) for p in sorted(root.iterdir()) if (p / "manifest.json").exists()}
