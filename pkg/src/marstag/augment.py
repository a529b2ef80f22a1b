"""Training-set augmentation and image preprocessing.

Augmentation cycles through a transform list until the requested number of
outputs per source image is produced. Rotations and flips are exact pixel
permutations; brightness is a multiplicative factor drawn from a range;
skew and shear warp by a random angle within a limit and are followed by a
centered square crop when the spec asks for one.

Skew/shear limits are validated against a crop-safety floor: the square
crop of the worst-case warp must still be covered by at least
``min_retained_area`` of real (non-introduced) pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datasets import Campaign, Instrument
from .errors import MarstagError
from .images import bilinear_resize, center_crop, center_square_crop

PIXEL_MAX = 255.0


@dataclass(frozen=True)
class Transform:
    kind: str  # ROT90 | ROT180 | ROT270 | FLIP_H | FLIP_V | BRIGHTNESS | SKEW | SHEAR
    lo: float = 0.0  # BRIGHTNESS factor range
    hi: float = 0.0
    limit_deg: float = 0.0  # SKEW / SHEAR angle limit

    def __str__(self) -> str:
        if self.kind == "BRIGHTNESS":
            return f"BRIGHTNESS({self.lo},{self.hi})"
        if self.kind in ("SKEW", "SHEAR"):
            return f"{self.kind}({self.limit_deg})"
        return self.kind


ROT90 = Transform("ROT90")
ROT180 = Transform("ROT180")
ROT270 = Transform("ROT270")
FLIP_H = Transform("FLIP_H")
FLIP_V = Transform("FLIP_V")


def brightness(lo: float = 0.8, hi: float = 1.2) -> Transform:
    return Transform("BRIGHTNESS", lo=lo, hi=hi)


def skew(limit_deg: float = 8.0) -> Transform:
    return Transform("SKEW", limit_deg=limit_deg)


def shear(limit_deg: float = 8.0) -> Transform:
    return Transform("SHEAR", limit_deg=limit_deg)


def parse_transform(token: str) -> Transform:
    token = token.strip()
    if "(" not in token:
        if token in ("ROT90", "ROT180", "ROT270", "FLIP_H", "FLIP_V"):
            return Transform(token)
        if token == "BRIGHTNESS":
            return brightness()
        if token in ("SKEW", "SHEAR"):
            return Transform(token, limit_deg=8.0)
        raise MarstagError("INVALID_SPEC", f"unknown transform {token!r}")
    kind, _, rest = token.partition("(")
    args = [float(a) for a in rest.rstrip(")").split(",") if a.strip()]
    if kind == "BRIGHTNESS":
        return brightness(*args)
    if kind in ("SKEW", "SHEAR"):
        return Transform(kind, limit_deg=args[0])
    raise MarstagError("INVALID_SPEC", f"unknown transform {token!r}")


@dataclass(frozen=True)
class AugmentationSpec:
    transforms: tuple[Transform, ...]
    per_source_count: int
    square_crop_after_warp: bool = False
    upsample_factor: dict[Campaign, int] = field(default_factory=dict)
    min_retained_area: float = 0.85

    def __post_init__(self):
        if self.per_source_count < 1:
            raise MarstagError("INVALID_SPEC", "per_source_count must be positive")
        if not self.transforms:
            raise MarstagError("INVALID_SPEC", "transform list is empty")


def _warp_shear(img: np.ndarray, angle_deg: float, horizontal: bool) -> np.ndarray:
    """Shear by angle; rows shift horizontally (SHEAR) or columns vertically
    (SKEW). Out-of-frame samples are filled with zeros."""
    rows, cols = img.shape
    t = math.tan(math.radians(angle_deg))
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    if horizontal:
        src_r = rr.astype(np.float64)
        src_c = cc - t * (rr - (rows - 1) / 2.0)
    else:
        src_r = rr - t * (cc - (cols - 1) / 2.0)
        src_c = cc.astype(np.float64)
    r0 = np.floor(src_r).astype(int)
    c0 = np.floor(src_c).astype(int)
    fr = src_r - r0
    fc = src_c - c0
    out = np.zeros_like(img, dtype=np.float64)
    padded = np.pad(img, 1, mode="constant")
    valid = (src_r >= 0) & (src_r <= rows - 1) & (src_c >= 0) & (src_c <= cols - 1)
    r0p = np.clip(r0, -1, rows) + 1
    c0p = np.clip(c0, -1, cols) + 1
    r1p = np.clip(r0 + 1, -1, rows) + 1
    c1p = np.clip(c0 + 1, -1, cols) + 1
    interp = (
        padded[r0p, c0p] * (1 - fr) * (1 - fc)
        + padded[r0p, c1p] * (1 - fr) * fc
        + padded[r1p, c0p] * fr * (1 - fc)
        + padded[r1p, c1p] * fr * fc
    )
    out[valid] = interp[valid]
    return out


def _shear_coverage(shape: tuple[int, int], angle_deg: float, horizontal: bool) -> float:
    """Fraction of the centered square crop covered by real pixels after the
    worst-case shear at this angle."""
    mask = _warp_shear(np.ones(shape, dtype=np.float64), angle_deg, horizontal)
    return float(center_square_crop(mask).mean())


def _apply(img: np.ndarray, t: Transform, rng: np.random.Generator) -> np.ndarray:
    if t.kind == "ROT90":
        return np.rot90(img, 1)
    if t.kind == "ROT180":
        return np.rot90(img, 2)
    if t.kind == "ROT270":
        return np.rot90(img, 3)
    if t.kind == "FLIP_H":
        return np.fliplr(img)
    if t.kind == "FLIP_V":
        return np.flipud(img)
    if t.kind == "BRIGHTNESS":
        factor = rng.uniform(t.lo, t.hi)
        return np.clip(img * factor, 0.0, PIXEL_MAX)
    if t.kind == "SKEW":
        angle = rng.uniform(-t.limit_deg, t.limit_deg)
        return _warp_shear(img, angle, horizontal=False)
    if t.kind == "SHEAR":
        angle = rng.uniform(-t.limit_deg, t.limit_deg)
        return _warp_shear(img, angle, horizontal=True)
    raise MarstagError("INVALID_SPEC", f"unknown transform kind {t.kind!r}")


def augment(
    image: np.ndarray, spec: AugmentationSpec, seed: int
) -> list[np.ndarray]:
    """Produce exactly ``spec.per_source_count`` augmented copies of an image.

    Deterministic given the seed. The original is not included; keeping it
    alongside the outputs multiplies a dataset by per_source_count + 1.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise MarstagError("EMPTY_IMAGE", "cannot augment an empty image")
    checked: set[tuple[str, float]] = set()
    for t in spec.transforms:
        if t.kind in ("SKEW", "SHEAR") and (t.kind, t.limit_deg) not in checked:
            cov = _shear_coverage(image.shape, t.limit_deg, t.kind == "SHEAR")
            if cov < spec.min_retained_area:
                raise MarstagError(
                    "INVALID_SPEC",
                    f"{t} retains {cov:.3f} of the crop, below "
                    f"{spec.min_retained_area}",
                )
            checked.add((t.kind, t.limit_deg))
    rng = np.random.default_rng(seed)
    out: list[np.ndarray] = []
    for i in range(spec.per_source_count):
        t = spec.transforms[i % len(spec.transforms)]
        img = _apply(image, t, rng)
        if spec.square_crop_after_warp:
            img = center_square_crop(img)
        out.append(np.ascontiguousarray(img))
    return out


def preprocess_resize(
    image: np.ndarray, mode: str = "msl_center_crop", target: int = 227
) -> np.ndarray:
    """Bring an image to target x target pixels.

    ``msl_center_crop``: scale the smallest side to ``target`` preserving
    aspect ratio, then center-crop the other side. ``hirise_square``: resize
    directly (landmark crops are already square-ish).
    """
    image = np.asarray(image, dtype=np.float64)
    rows, cols = image.shape
    if rows < 1 or cols < 1:
        raise MarstagError("EMPTY_IMAGE", "cannot preprocess an empty image")
    if mode == "hirise_square":
        return bilinear_resize(image, target, target)
    if mode == "msl_center_crop":
        scale = target / min(rows, cols)
        new_rows = max(target, int(round(rows * scale)))
        new_cols = max(target, int(round(cols * scale)))
        if rows <= cols:
            new_rows = target
        else:
            new_cols = target
        scaled = bilinear_resize(image, new_rows, new_cols)
        return center_crop(scaled, target, target)
    raise MarstagError("CONFIG_ERROR", f"unknown preprocess mode {mode!r}")


def hirise_recipe() -> AugmentationSpec:
    """Three right-angle rotations, both flips, and a random brightness
    adjustment; second-campaign images are duplicated once beforehand."""
    return AugmentationSpec(
        transforms=(ROT90, ROT180, ROT270, FLIP_H, FLIP_V, brightness()),
        per_source_count=6,
        square_crop_after_warp=False,
        upsample_factor={Campaign.SECOND_CAMPAIGN: 2},
    )


def msl_recipe(instrument: Instrument) -> AugmentationSpec:
    """Rotations plus flips for the arm-mounted camera, flips only for the
    mast-mounted cameras (their orientation is fixed)."""
    if instrument is Instrument.MAHLI:
        return AugmentationSpec(
            transforms=(ROT90, ROT180, ROT270, FLIP_H, FLIP_V),
            per_source_count=5,
        )
    return AugmentationSpec(transforms=(FLIP_H, FLIP_V), per_source_count=2)


def mer_recipe(limit_deg: float = 8.0) -> AugmentationSpec:
    """29 augmented copies per source from rotations, skews, and shears with
    varying angles, each followed by a square crop."""
    transforms = (
        (ROT90, ROT180, ROT270)
        + tuple(skew(limit_deg) for _ in range(13))
        + tuple(shear(limit_deg) for _ in range(13))
    )
    return AugmentationSpec(
        transforms=transforms, per_source_count=29, square_crop_after_warp=True
    )


def recipe_for(name: str, instrument: Instrument | None = None) -> AugmentationSpec | None:
    name = name.strip().lower()
    if name in ("", "none"):
        return None
    if name == "hirise":
        return hirise_recipe()
    if name == "msl":
        if instrument is None:
            raise MarstagError("CONFIG_ERROR", "msl recipe needs an instrument")
        return msl_recipe(instrument)
    if name == "mer":
        return mer_recipe()
    raise MarstagError("CONFIG_ERROR", f"unknown augmentation recipe {name!r}")
