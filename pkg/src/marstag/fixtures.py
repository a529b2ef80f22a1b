"""Synthetic demo dataset generator.

Builds a small, fully self-contained archive: class-structured grayscale
images, a manifest with acquisition groups and georeferences, one long
strip holding two bright landmarks, and a ready-to-run pipeline config.
Used by the demo scripts and the end-to-end tests; everything is seeded
and reproducible.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .catalogs import hirise_catalog
from .config import PipelineConfig, save_config
from .images import save_grayscale
from .landmarking import SalienceParams, save_salience_params

# Latitude per source-image group; polar classes only make sense south of -60.
_GROUP_LATS = [-75.0, -30.0, -82.0, -10.0, -65.0, -45.0]


def class_image(class_index: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """A grayscale image whose intensity band identifies its class, noisy
    enough that the trained head stays imperfect and calibration matters."""
    base = 25.0 + 22.0 * class_index
    img = np.full((size, size), base) + rng.normal(0.0, 16.0, (size, size))
    # a small bright square gives the edge detector something to find
    r0 = 4 + (class_index * 3) % (size - 12)
    img[r0 : r0 + 6, r0 : r0 + 6] += 30.0
    return np.clip(img, 0.0, 255.0)


def strip_image(rng: np.random.Generator) -> np.ndarray:
    strip = np.full((96, 200), 30.0) + rng.normal(0.0, 1.5, (96, 200))
    strip[20:32, 30:42] = 220.0
    strip[60:72, 140:152] = 200.0
    return np.clip(strip, 0.0, 255.0)


def make_demo_dataset(
    root: Path | str,
    per_class: int = 12,
    unlabeled: int = 24,
    seed: int = 7,
) -> dict[str, Path]:
    """Write images/, manifest.csv, strip.png, and marstag.cfg under root.

    Returns the key paths. Labeled samples cover all eight orbital classes;
    extra unlabeled records stand in for archive-only items.
    """
    root = Path(root)
    images = root / "images"
    images.mkdir(parents=True, exist_ok=True)
    out_dir = root / "out"
    rng = np.random.default_rng(seed)
    catalog = hirise_catalog()
    classes = catalog.ids()

    rows = []
    counter = 0
    for k, class_id in enumerate(classes):
        for j in range(per_class):
            sample_id = f"s{counter:04d}"
            counter += 1
            img = class_image(k, rng)
            ref = f"{sample_id}.png"
            save_grayscale(images / ref, img)
            group = counter % 24
            lat0 = _GROUP_LATS[group % len(_GROUP_LATS)]
            rows.append(
                {
                    "sample_id": sample_id,
                    "image_ref": ref,
                    "instrument": "HIRISE",
                    "source_image_id": f"src{group:02d}",
                    "sol": str(100 + group),
                    "site_id": f"site{group % 5}",
                    "single_label": class_id,
                    "multi_labels": "",
                    "campaign": "SECOND_CAMPAIGN" if k >= 6 and j >= 8 else "PRIMARY",
                    "lat0": f"{lat0 + 0.01 * j:.4f}",
                    "lon0": f"{(10.0 * k + j) % 360 - 180:.4f}",
                    "dlat": "-0.001",
                    "dlon": "0.001",
                }
            )
    for j in range(unlabeled):
        sample_id = f"u{j:04d}"
        img = class_image(rng.integers(0, len(classes)), rng)
        ref = f"{sample_id}.png"
        save_grayscale(images / ref, img)
        group = j % 24
        lat0 = _GROUP_LATS[group % len(_GROUP_LATS)]
        rows.append(
            {
                "sample_id": sample_id,
                "image_ref": ref,
                "instrument": "HIRISE",
                "source_image_id": f"src{group:02d}",
                "sol": str(100 + group),
                "site_id": f"site{group % 5}",
                "single_label": "",
                "multi_labels": "",
                "campaign": "PRIMARY",
                "lat0": f"{lat0 - 0.02 * j:.4f}",
                "lon0": f"{(3.0 * j) % 360 - 180:.4f}",
                "dlat": "-0.001",
                "dlon": "0.001",
            }
        )

    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    strip = root / "strip.png"
    save_grayscale(strip, strip_image(rng))

    salience_path = root / "salience_params.txt"
    save_salience_params(
        salience_path,
        SalienceParams(
            inner_window=5,
            outer_window=15,
            w_canny=0.2,
            w_emd=0.8,
            salience_threshold=0.5,
            canny_low=0.1,
            canny_high=0.3,
            histogram_bins=16,
        ),
    )

    cfg = PipelineConfig(
        manifest=str(manifest),
        images_dir=str(images),
        out_dir=str(out_dir),
        catalog="hirise",
        group_key="SOURCE_IMAGE",
        fractions=(0.6, 0.2, 0.2),
        seed=seed,
        model="softmax",
        calibration="TEMPERATURE",
        tau=0.9,
        augment_recipe="custom",
        augment_transforms=("ROT90", "FLIP_H"),
        augment_count=2,
        augment_to=("TRAIN",),
        epochs=40,
        learning_rate=0.3,
        batch_size=32,
        l2=0.0001,
        landmark_image=str(strip),
        landmark_source_id="strip00",
        salience_params=str(salience_path),
        landmark_min_area=25,
        timestamp="2020-08-01T00:00:00Z",
        workers=1,
    )
    cfg_path = root / "marstag.cfg"
    save_config(cfg_path, cfg)
    return {"root": root, "manifest": manifest, "config": cfg_path, "out_dir": out_dir}
