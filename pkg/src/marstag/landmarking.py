"""Salient-landmark extraction from large orbital image strips.

Per-pixel salience is a weighted combination of two cues: the response to a
Canny edge filter, and the earth mover's distance between the intensity
histogram of a small window around the pixel and that of a larger enclosing
window. Connected regions above a salience threshold become landmarks,
which are cropped as bordered squares and resized for classification.

Detector parameters (window sizes, cue weights, threshold, Canny
thresholds) are tuned by a small generational genetic algorithm against
hand-labeled salient masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

from .errors import MarstagError
from .images import bilinear_resize

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class SalienceParams:
    inner_window: int = 5
    outer_window: int = 15
    w_canny: float = 1.0
    w_emd: float = 1.0
    salience_threshold: float = 0.5
    canny_low: float = 0.1
    canny_high: float = 0.2
    histogram_bins: int = 32

    def __post_init__(self):
        if self.inner_window % 2 == 0 or self.outer_window % 2 == 0:
            raise MarstagError("INVALID_PARAMS", "window sizes must be odd")
        if self.inner_window >= self.outer_window:
            raise MarstagError("INVALID_PARAMS", "inner window must be < outer window")
        if self.w_canny < 0 or self.w_emd < 0 or self.w_canny + self.w_emd <= 0:
            raise MarstagError("INVALID_PARAMS", "cue weights must be >= 0 and not both 0")
        if not 0.0 <= self.salience_threshold <= 1.0:
            raise MarstagError("INVALID_PARAMS", "salience threshold must be in [0,1]")
        if self.canny_low >= self.canny_high:
            raise MarstagError("INVALID_PARAMS", "canny_low must be < canny_high")
        if self.histogram_bins < 1:
            raise MarstagError("INVALID_PARAMS", "histogram_bins must be positive")


@dataclass(frozen=True)
class Landmark:
    source_image_id: str
    bbox: tuple[int, int, int, int]  # row0, col0, row1, col1; end-exclusive
    peak_salience: float
    area_px: int


def canny_response(image: np.ndarray, params: SalienceParams) -> np.ndarray:
    """Edge response in [0, 1]: Gaussian smooth, Sobel gradient, non-maximum
    suppression, hysteresis, then a 3x3 box smoothing of the binary edges.

    The hysteresis thresholds are fractions of the maximum gradient
    magnitude, so the response ignores constant intensity offsets.
    """
    image = np.asarray(image, dtype=np.float64)
    if min(image.shape) <= 5:
        raise MarstagError("IMAGE_TOO_SMALL", f"image {image.shape} too small for edges")
    smooth = ndimage.gaussian_filter(image, sigma=1.4, mode="nearest")
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak == 0.0:
        return np.zeros_like(image)
    mag /= peak

    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    # Sector -> (forward neighbor offset); backward is the negation.
    sectors = [
        ((angle < 22.5) | (angle >= 157.5), (0, 1)),
        ((angle >= 22.5) & (angle < 67.5), (1, -1)),
        ((angle >= 67.5) & (angle < 112.5), (1, 0)),
        ((angle >= 112.5) & (angle < 157.5), (1, 1)),
    ]
    padded = np.pad(mag, 1, mode="constant")

    def shifted(dr, dc):
        return padded[1 + dr : 1 + dr + mag.shape[0], 1 + dc : 1 + dc + mag.shape[1]]

    keep = np.zeros(mag.shape, dtype=bool)
    for sel, (dr, dc) in sectors:
        fwd = shifted(dr, dc)
        bwd = shifted(-dr, -dc)
        # >= forward but strictly > backward: a flat two-pixel ridge keeps
        # exactly one pixel, so a step edge stays a thin line.
        keep |= sel & (mag >= fwd) & (mag > bwd)

    strong = keep & (mag >= params.canny_high)
    weak = keep & (mag >= params.canny_low)
    labels, n = ndimage.label(weak, structure=EIGHT_CONNECTED)
    edges = np.zeros(mag.shape, dtype=np.float64)
    if n:
        strong_labels = np.unique(labels[strong])
        strong_labels = strong_labels[strong_labels > 0]
        edges[np.isin(labels, strong_labels)] = 1.0
    # box smoothing can leave -1e-17 style round-off; clamp to the contract
    return np.clip(ndimage.uniform_filter(edges, size=3, mode="constant"), 0.0, 1.0)


def emd_1d(hist_a, hist_b) -> float:
    """Earth mover's distance between two histograms on shared unit-spaced
    bins: both are normalized to unit mass, then the L1 distance between
    their cumulative distributions is the optimal transport cost."""
    a = np.asarray(hist_a, dtype=np.float64)
    b = np.asarray(hist_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MarstagError("LENGTH_MISMATCH", f"histogram shapes {a.shape} vs {b.shape}")
    if a.sum() <= 0 or b.sum() <= 0:
        raise MarstagError("ZERO_MASS", "histograms must have positive mass")
    ca = np.cumsum(a / a.sum())
    cb = np.cumsum(b / b.sum())
    return float(np.abs(ca - cb).sum())


def _integral(ind: np.ndarray) -> np.ndarray:
    s = np.zeros((ind.shape[0] + 1, ind.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(ind, axis=0), axis=1, out=s[1:, 1:])
    return s


def _box_counts(integral: np.ndarray, rows: int, cols: int, offset: int, half: int):
    """Window sums centered at each of the rows x cols pixels; the integral
    image is over an array padded by ``offset`` on each side."""
    r0 = np.arange(rows) + offset - half
    c0 = np.arange(cols) + offset - half
    r1 = r0 + 2 * half + 1
    c1 = c0 + 2 * half + 1
    return (
        integral[np.ix_(r1, c1)]
        - integral[np.ix_(r0, c1)]
        - integral[np.ix_(r1, c0)]
        + integral[np.ix_(r0, c0)]
    )


def _emd_salience_raw(
    image: np.ndarray, params: SalienceParams, lo: float, hi: float
) -> np.ndarray:
    """Unnormalized per-pixel EMD between inner- and outer-window intensity
    histograms, with edge replication where the outer window overruns."""
    rows, cols = image.shape
    bins = params.histogram_bins
    if hi <= lo:
        return np.zeros_like(image)
    idx = np.clip(((image - lo) / (hi - lo) * bins).astype(int), 0, bins - 1)
    half_out = params.outer_window // 2
    half_in = params.inner_window // 2
    padded = np.pad(idx, half_out, mode="edge")
    n_in = params.inner_window**2
    n_out = params.outer_window**2
    cdf_in = np.zeros((rows, cols), dtype=np.float64)
    cdf_out = np.zeros((rows, cols), dtype=np.float64)
    emd = np.zeros((rows, cols), dtype=np.float64)
    for b in range(bins):
        sat = _integral((padded == b).astype(np.float64))
        cdf_in += _box_counts(sat, rows, cols, half_out, half_in) / n_in
        cdf_out += _box_counts(sat, rows, cols, half_out, half_out) / n_out
        emd += np.abs(cdf_in - cdf_out)
    return emd


def emd_salience(
    image: np.ndarray, params: SalienceParams, tile_rows: int = 1024
) -> np.ndarray:
    """Windowed-EMD salience map normalized to [0, 1] by its maximum.

    Long strips are processed in row tiles overlapping by the outer window
    so per-tile results stitch into exactly the single-pass map while
    bounding working memory.
    """
    image = np.asarray(image, dtype=np.float64)
    rows, cols = image.shape
    if params.outer_window > min(rows, cols):
        raise MarstagError(
            "IMAGE_TOO_SMALL",
            f"outer window {params.outer_window} exceeds image {image.shape}",
        )
    lo, hi = float(image.min()), float(image.max())
    half_out = params.outer_window // 2
    out = np.empty((rows, cols), dtype=np.float64)
    r = 0
    while r < rows:
        r_end = min(rows, r + tile_rows)
        pad_top = min(half_out, r)
        pad_bot = min(half_out, rows - r_end)
        tile = image[r - pad_top : r_end + pad_bot]
        raw = _emd_salience_raw(tile, params, lo, hi)
        out[r:r_end] = raw[pad_top : pad_top + (r_end - r)]
        r = r_end
    peak = out.max()
    if peak > 0:
        out /= peak
    return out


def combine_salience(
    canny_map: np.ndarray, emd_map: np.ndarray, params: SalienceParams
) -> np.ndarray:
    """Weighted average of the two cues; stays within [0, 1]."""
    if canny_map.shape != emd_map.shape:
        raise MarstagError(
            "DIMENSION_MISMATCH", f"{canny_map.shape} vs {emd_map.shape}"
        )
    total = params.w_canny + params.w_emd
    return (params.w_canny * canny_map + params.w_emd * emd_map) / total


def salience_map(
    image: np.ndarray, params: SalienceParams, tile_rows: int = 1024
) -> np.ndarray:
    """Full salience pipeline: Canny cue + windowed EMD cue, combined."""
    return combine_salience(
        canny_response(image, params), emd_salience(image, params, tile_rows), params
    )


def extract_landmarks(
    smap: np.ndarray,
    params: SalienceParams,
    min_area: int = 25,
    source_image_id: str = "",
) -> list[Landmark]:
    """8-connected components of the super-threshold region, largest peak
    salience first; components below ``min_area`` pixels are dropped."""
    mask = np.asarray(smap) >= params.salience_threshold
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    found: list[Landmark] = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        component = labels[sl] == i
        area = int(component.sum())
        if area < min_area:
            continue
        peak = float(np.asarray(smap)[sl][component].max())
        found.append(
            Landmark(
                source_image_id=source_image_id,
                bbox=(sl[0].start, sl[1].start, sl[0].stop, sl[1].stop),
                peak_salience=peak,
                area_px=area,
            )
        )
    found.sort(key=lambda lm: (-lm.peak_salience, lm.bbox))
    return found


def crop_landmark(
    image: np.ndarray, landmark: Landmark, border: int = 30, out_size: int = 227
) -> np.ndarray:
    """Bordered square crop of a landmark, resized to out_size x out_size.

    The bounding box is expanded to a centered square, grown by the border
    on every side, clamped to the image, then bilinearly resized.
    """
    image = np.asarray(image, dtype=np.float64)
    rows, cols = image.shape
    r0, c0, r1, c1 = landmark.bbox
    h, w = r1 - r0, c1 - c0
    side = max(h, w)
    r0 -= (side - h) // 2
    c0 -= (side - w) // 2
    r1, c1 = r0 + side, c0 + side
    r0, c0 = max(0, r0 - border), max(0, c0 - border)
    r1, c1 = min(rows, r1 + border), min(cols, c1 + border)
    return bilinear_resize(image[r0:r1, c0:c1], out_size, out_size)


# ---------------------------------------------------------------------------
# Genetic-algorithm parameter tuning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaConfig:
    population: int = 30
    generations: int = 40
    mutation_rate: float = 0.25
    crossover_rate: float = 0.7
    elitism: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise MarstagError("INVALID_PARAMS", "population must be >= 2")
        if not 0 <= self.elitism < self.population:
            raise MarstagError("INVALID_PARAMS", "elitism must be < population")


@dataclass(frozen=True)
class SalienceBounds:
    """Inclusive search bounds per tunable detector parameter."""

    inner_window: tuple[float, float] = (3, 9)
    outer_window: tuple[float, float] = (11, 31)
    w_canny: tuple[float, float] = (0.0, 1.0)
    w_emd: tuple[float, float] = (0.0, 1.0)
    salience_threshold: tuple[float, float] = (0.05, 0.95)
    canny_low: tuple[float, float] = (0.02, 0.4)
    canny_high: tuple[float, float] = (0.1, 0.8)
    histogram_bins: tuple[float, float] = (16, 16)

    def ordered(self) -> list[tuple[str, tuple[float, float]]]:
        out = []
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if lo > hi:
                raise MarstagError("INVALID_PARAMS", f"bounds for {f.name} reversed")
            out.append((f.name, (float(lo), float(hi))))
        return out


def _to_odd(x: float, lo: float, hi: float) -> int:
    v = int(round(x))
    if v % 2 == 0:
        v += 1 if v + 1 <= hi else -1
    return max(int(math.ceil(lo)), min(v, int(math.floor(hi))))


def _decode(vector: np.ndarray, bounds: SalienceBounds) -> SalienceParams:
    raw = dict(zip([name for name, _ in bounds.ordered()], vector))
    b = dict(bounds.ordered())
    inner = _to_odd(raw["inner_window"], *b["inner_window"])
    outer = _to_odd(raw["outer_window"], *b["outer_window"])
    if inner >= outer:
        inner = max(3, outer - 2)
    w_canny = float(raw["w_canny"])
    w_emd = float(raw["w_emd"])
    if w_canny + w_emd <= 0:
        w_emd = 1e-6
    low = float(raw["canny_low"])
    high = float(raw["canny_high"])
    if low >= high:
        low = high * 0.5
    return SalienceParams(
        inner_window=inner,
        outer_window=outer,
        w_canny=w_canny,
        w_emd=w_emd,
        salience_threshold=float(raw["salience_threshold"]),
        canny_low=low,
        canny_high=high,
        histogram_bins=int(round(raw["histogram_bins"])),
    )


def mask_f1(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = pred.astype(bool)
    truth = truth.astype(bool)
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    if tp == 0:
        return 1.0 if (fp == 0 and fn == 0) else 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


@dataclass
class GaResult:
    params: SalienceParams
    fitness: float
    best_per_generation: list[float]


def ga_optimize_full(
    labeled: list[tuple[np.ndarray, np.ndarray]],
    bounds: SalienceBounds,
    cfg: GaConfig,
) -> GaResult:
    """Tune detector parameters to maximize mean per-image F1 between the
    thresholded salience mask and a hand-labeled ground-truth mask.

    Generational GA: tournament selection of size 2, uniform crossover,
    Gaussian mutation, elitism. Deterministic given cfg.seed; the best
    individual ever evaluated is returned.
    """
    if not labeled:
        raise MarstagError("EMPTY_TRAINING_SET", "no labeled images for tuning")
    spec = bounds.ordered()
    lows = np.array([lo for _, (lo, hi) in spec])
    highs = np.array([hi for _, (lo, hi) in spec])
    genes = len(spec)
    rng = np.random.default_rng(cfg.seed)

    def fitness(vector: np.ndarray) -> float:
        params = _decode(vector, bounds)
        total = 0.0
        for img, truth in labeled:
            smap = salience_map(img, params)
            total += mask_f1(smap >= params.salience_threshold, truth)
        return total / len(labeled)

    pop = rng.uniform(lows, highs, size=(cfg.population, genes))
    fits = np.array([fitness(v) for v in pop])
    best_idx = int(fits.argmax())
    best_vec, best_fit = pop[best_idx].copy(), float(fits[best_idx])
    history = [best_fit]

    def tournament() -> np.ndarray:
        i, j = rng.integers(0, cfg.population, size=2)
        return pop[i] if fits[i] >= fits[j] else pop[j]

    for _ in range(cfg.generations):
        elite_order = np.argsort(-fits)
        children = [pop[k].copy() for k in elite_order[: cfg.elitism]]
        while len(children) < cfg.population:
            p1, p2 = tournament(), tournament()
            if rng.random() < cfg.crossover_rate:
                swap = rng.random(genes) < 0.5
                child = np.where(swap, p1, p2)
            else:
                child = p1.copy()
            mutate = rng.random(genes) < cfg.mutation_rate
            noise = rng.normal(0.0, 0.1 * (highs - lows))
            child = np.clip(np.where(mutate, child + noise, child), lows, highs)
            children.append(child)
        pop = np.array(children)
        fits = np.array([fitness(v) for v in pop])
        gen_best = int(fits.argmax())
        if fits[gen_best] > best_fit:
            best_vec, best_fit = pop[gen_best].copy(), float(fits[gen_best])
        history.append(best_fit)
    return GaResult(_decode(best_vec, bounds), best_fit, history)


def ga_optimize(
    labeled: list[tuple[np.ndarray, np.ndarray]],
    bounds: SalienceBounds,
    cfg: GaConfig,
) -> SalienceParams:
    return ga_optimize_full(labeled, bounds, cfg).params


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_landmarks(path, landmarks: list[Landmark]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("source_image_id,row0,col0,row1,col1,peak_salience,area_px\n")
        for lm in landmarks:
            r0, c0, r1, c1 = lm.bbox
            fh.write(
                f"{lm.source_image_id},{r0},{c0},{r1},{c1},"
                f"{lm.peak_salience:.6f},{lm.area_px}\n"
            )


def load_landmarks(path) -> list[Landmark]:
    import csv as _csv

    out: list[Landmark] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in _csv.DictReader(fh):
            out.append(
                Landmark(
                    source_image_id=row["source_image_id"],
                    bbox=(
                        int(row["row0"]),
                        int(row["col0"]),
                        int(row["row1"]),
                        int(row["col1"]),
                    ),
                    peak_salience=float(row["peak_salience"]),
                    area_px=int(row["area_px"]),
                )
            )
    return out


def save_salience_params(path, params: SalienceParams) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(params):
            fh.write(f"{f.name}={getattr(params, f.name)!r}\n")


def load_salience_params(path) -> SalienceParams:
    values: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = float(val)
    ints = {"inner_window", "outer_window", "histogram_bins"}
    kwargs = {k: (int(v) if k in ints else v) for k, v in values.items()}
    return SalienceParams(**kwargs)
