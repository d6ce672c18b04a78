"""Training-time augmentation with consistent box transforms.

Geometric ops (``rot90_random``, ``hflip``, ``vflip``, ``center_crop``)
move raster and boxes together; photometric ops touch the raster only.
Every op is an independent Bernoulli trial; parameters are drawn whether or
not the op fires, so the random stream consumed per draw is fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image, ImageEnhance, ImageFilter, ImageOps

from .synthdata import MIN_BOX_AREA, ImageSample

GEOMETRIC_OPS = ("rot90_random", "hflip", "vflip", "center_crop")
PHOTOMETRIC_OPS = ("blur", "equalize", "contrast", "brightness", "darkness", "sharpness", "hue", "saturation")

DEFAULT_RANGES = {
    "blur": (3, 5),  # box-blur kernel width, odd
    "contrast": (0.7, 1.3),
    "brightness": (1.0, 1.3),
    "darkness": (0.7, 1.0),
    "sharpness": (0.5, 1.5),  # unsharp-mask amount
    "hue": (-18.0, 18.0),  # degrees
    "saturation": (0.7, 1.3),
    "center_crop": (0.8, 0.8),  # kept fraction per side
}


@dataclass(frozen=True)
class AugmentPolicy:
    geometric: tuple = ()
    photometric: tuple = ()
    probability: float = 0.5
    ranges: dict = field(default_factory=lambda: dict(DEFAULT_RANGES))
    seed: int = 0

    def __post_init__(self):
        bad = [g for g in self.geometric if g not in GEOMETRIC_OPS]
        bad += [p for p in self.photometric if p not in PHOTOMETRIC_OPS]
        if bad:
            raise ValueError(f"unknown augmentation ops: {bad}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")
        for name, (lo, hi) in self.ranges.items():
            if lo > hi:
                raise ValueError(f"empty parameter range for {name}")

    @property
    def enabled(self) -> bool:
        return bool(self.geometric or self.photometric)

    def to_dict(self) -> dict:
        return {"geometric": list(self.geometric), "photometric": list(self.photometric),
                "probability": self.probability, "seed": self.seed,
                "ranges": {k: list(v) for k, v in sorted(self.ranges.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPolicy":
        ranges = dict(DEFAULT_RANGES)
        ranges.update({k: tuple(v) for k, v in d.get("ranges", {}).items()})
        return cls(tuple(d.get("geometric", ())), tuple(d.get("photometric", ())),
                   float(d.get("probability", 0.5)), ranges, int(d.get("seed", 0)))


def policy_variant(kind: str, seed: int = 0, probability: float = 0.5) -> AugmentPolicy:
    """Named policies: ``none``, ``geometric``, ``photometric``, ``geometric+photometric``."""
    geo = GEOMETRIC_OPS if kind in ("geometric", "geometric+photometric") else ()
    pho = PHOTOMETRIC_OPS if kind in ("photometric", "geometric+photometric") else ()
    if kind not in ("none", "geometric", "photometric", "geometric+photometric"):
        raise ValueError(f"unknown augmentation variant {kind!r}")
    return AugmentPolicy(geo, pho, probability, seed=seed)


# -- box transforms ----------------------------------------------------------------


def box_transform_rot90(box, frame, quarter_turns: int):
    """Rotate a box counter-clockwise by ``quarter_turns`` within a ``(W, H)`` frame."""
    if quarter_turns not in (0, 1, 2, 3):
        raise ValueError("quarter_turns must be 0, 1, 2 or 3")
    x0, y0, x1, y1 = (float(v) for v in box)
    w, h = frame
    for _ in range(quarter_turns):
        x0, y0, x1, y1 = y0, w - x1, y1, w - x0
        w, h = h, w
    return (x0, y0, x1, y1)


def hflip_boxes(boxes: np.ndarray, width: float) -> np.ndarray:
    out = boxes.copy()
    out[:, 0], out[:, 2] = width - boxes[:, 2], width - boxes[:, 0]
    return out


def vflip_boxes(boxes: np.ndarray, height: float) -> np.ndarray:
    out = boxes.copy()
    out[:, 1], out[:, 3] = height - boxes[:, 3], height - boxes[:, 1]
    return out


def rot90_boxes(boxes: np.ndarray, frame, quarter_turns: int) -> np.ndarray:
    return np.array([box_transform_rot90(b, frame, quarter_turns) for b in boxes]).reshape(-1, 4)


# -- raster ops -------------------------------------------------------------------


def hflip(sample: ImageSample) -> ImageSample:
    return replace(sample, image=np.ascontiguousarray(sample.image[:, ::-1]),
                   boxes=hflip_boxes(sample.boxes, sample.width))


def vflip(sample: ImageSample) -> ImageSample:
    return replace(sample, image=np.ascontiguousarray(sample.image[::-1]),
                   boxes=vflip_boxes(sample.boxes, sample.height))


def rot90(sample: ImageSample, quarter_turns: int) -> ImageSample:
    # np.rot90 turns counter-clockwise, matching box_transform_rot90
    img = np.ascontiguousarray(np.rot90(sample.image, quarter_turns))
    return replace(sample, image=img,
                   boxes=rot90_boxes(sample.boxes, (sample.width, sample.height), quarter_turns))


def center_crop(sample: ImageSample, keep: float = 0.8, min_area: float = MIN_BOX_AREA) -> ImageSample:
    """Crop the central ``keep`` fraction and rescale bilinearly to the input size.

    Boxes are clipped to the crop; those left under ``min_area`` are dropped.
    If nothing survives the sample is returned unchanged.
    """
    h, w = sample.height, sample.width
    cw, ch = keep * w, keep * h
    ox, oy = (w - cw) / 2.0, (h - ch) / 2.0
    b = sample.boxes.copy()
    b[:, 0::2] = (np.clip(b[:, 0::2], ox, ox + cw) - ox) * (w / cw)
    b[:, 1::2] = (np.clip(b[:, 1::2], oy, oy + ch) - oy) * (h / ch)
    area = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    keep_mask = area >= min_area
    if not keep_mask.any():
        return sample
    img = Image.fromarray(sample.image).resize((w, h), Image.BILINEAR, box=(ox, oy, ox + cw, oy + ch))
    return replace(sample, image=np.asarray(img).copy(), boxes=b[keep_mask], labels=sample.labels[keep_mask])


def _photometric(img: Image.Image, op: str, param: float) -> Image.Image:
    if op == "blur":
        return img.filter(ImageFilter.BoxBlur(int(param) // 2))
    if op == "equalize":
        return ImageOps.equalize(img)
    if op == "contrast":
        return ImageEnhance.Contrast(img).enhance(param)
    if op in ("brightness", "darkness"):
        return ImageEnhance.Brightness(img).enhance(param)
    if op == "sharpness":
        return img.filter(ImageFilter.UnsharpMask(radius=2, percent=int(round(100 * param)), threshold=0))
    if op == "saturation":
        return ImageEnhance.Color(img).enhance(param)
    if op == "hue":
        hsv = np.asarray(img.convert("HSV")).copy()
        shift = int(round(param / 360.0 * 256.0))
        hsv[..., 0] = ((hsv[..., 0].astype(np.int64) + shift) % 256).astype(np.uint8)
        return Image.fromarray(hsv, "HSV").convert("RGB")
    raise ValueError(op)


def _draw_param(rng: np.random.Generator, op: str, ranges: dict) -> float:
    if op == "blur":
        lo, hi = ranges["blur"]
        return float(rng.choice(np.arange(int(lo), int(hi) + 1, 2)))
    if op == "rot90_random":
        return float(rng.integers(1, 4))
    if op in ranges:
        lo, hi = ranges[op]
        return float(rng.uniform(lo, hi))
    rng.uniform()  # keep per-op stream consumption constant
    return 0.0


def apply(sample: ImageSample, policy: AugmentPolicy, draw: int) -> ImageSample:
    """Augment ``sample`` with the sub-stream ``draw`` of the policy seed."""
    rng = np.random.default_rng(np.random.SeedSequence([policy.seed, 0xA46, draw]))
    out = sample
    for op in GEOMETRIC_OPS:
        fire = rng.uniform() < policy.probability
        param = _draw_param(rng, op, policy.ranges)
        if not (fire and op in policy.geometric):
            continue
        if op == "rot90_random":
            out = rot90(out, int(param))
        elif op == "hflip":
            out = hflip(out)
        elif op == "vflip":
            out = vflip(out)
        else:
            out = center_crop(out, param)
    pending = []
    for op in PHOTOMETRIC_OPS:
        fire = rng.uniform() < policy.probability
        param = _draw_param(rng, op, policy.ranges)
        if fire and op in policy.photometric:
            pending.append((op, param))
    if pending:
        img = Image.fromarray(out.image)
        for op, param in pending:
            img = _photometric(img, op, param)
        out = replace(out, image=np.asarray(img).copy())
    return out
