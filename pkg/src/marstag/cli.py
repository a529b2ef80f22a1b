"""Command-line pipeline driver.

Subcommands chain the library into the full flow: split -> augment ->
landmarks -> train -> calibrate -> evaluate -> tag -> index, plus query and
report. Every stage reads/writes plain text artifacts under the configured
output directory, and identical configs and seeds reproduce identical
bytes.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
nonconvergence (best-effort artifacts are still written). The environment
variable MARSTAG_LOG sets log verbosity (DEBUG, INFO, WARNING, ...).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import report as report_mod
from .archive import (
    ArchiveItem,
    QueryLog,
    build_index,
    distribution_shift_report,
    load_index,
    load_tags,
    polar_filter,
    query as run_query,
    save_index,
    save_query_log,
    save_tags,
    serve_queries,
    tag_archive,
)
from .augment import AugmentationSpec, augment, parse_transform, preprocess_resize, recipe_for
from .calibration import (
    CalibrationMethod,
    OptConfig,
    abstention_report,
    apply_calibrator_rows,
    confusion_matrix,
    ece,
    fit_calibrator,
    load_calibrator,
    mce,
    nll,
    per_class_metrics,
    reliability_bins,
    save_calibrator,
    softmax_rows,
    threshold_predict,
)
from .catalogs import MER_CHAIN_CATEGORY_ORDER
from .config import PipelineConfig, load_config
from .datasets import (
    GroupKey,
    Split,
    class_distribution,
    load_manifest,
    load_splits,
    save_manifest,
    save_splits,
    split_grouped,
    upsample_second_campaign,
)
from .errors import ConfigError, MarstagError
from .images import load_grayscale, save_grayscale
from .landmarking import (
    SalienceParams,
    crop_landmark,
    extract_landmarks,
    load_salience_params,
    salience_map,
    save_landmarks,
)
from .models import (
    HybridClassifier,
    extract_features,
    load_model,
    most_common_baseline,
    multilabel_loss,
    predict_chain,
    predict_logits,
    predict_multilabel,
    save_model,
    train_chain,
    train_multilabel,
    train_softmax,
)

log = logging.getLogger("marstag")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NONCONVERGENCE = 4


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _base_id(sample_id: str) -> str:
    return sample_id.split("__aug")[0].split("__up")[0]


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MarstagError("MISSING_INPUT", f"{what} not found: {path}")
    return path


def _records(cfg: PipelineConfig, catalog, augmented: bool = False):
    manifest = Path(cfg.manifest)
    _require(manifest, "manifest")
    records = load_manifest(manifest, catalog)
    if augmented:
        aug_manifest = cfg.out_path("manifest_augmented.csv")
        if aug_manifest.exists():
            seen = {r.sample_id for r in records}
            for r in load_manifest(aug_manifest, catalog):
                if r.sample_id not in seen:
                    records.append(r)
    return records


def _feature_task(args) -> list[float]:
    path, preprocess, target = args
    img = load_grayscale(path)
    if preprocess != "none":
        img = preprocess_resize(img, preprocess, target)
    return extract_features(img).tolist()


def _compute_features(cfg: PipelineConfig, records) -> dict[str, np.ndarray]:
    tasks = [
        (str(Path(cfg.images_dir) / r.image_ref), cfg.preprocess, cfg.target_size)
        for r in records
    ]
    workers = cfg.workers or os.cpu_count() or 1
    if workers > 1 and len(tasks) > 8:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            vectors = list(pool.map(_feature_task, tasks, chunksize=16))
    else:
        vectors = [_feature_task(t) for t in tasks]
    return {r.sample_id: np.array(v) for r, v in zip(records, vectors)}


def _save_features(path, features: dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        dim = len(next(iter(features.values()))) if features else 0
        w.writerow(["sample_id"] + [f"f{i}" for i in range(dim)])
        for sid, vec in features.items():
            w.writerow([sid] + ["%.17g" % v for v in vec])


def _load_features(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            out[row[0]] = np.array([float(v) for v in row[1:]])
    return out


def _features_for(cfg: PipelineConfig, records) -> dict[str, np.ndarray]:
    path = cfg.out_path("features.csv")
    known = _load_features(path) if path.exists() else {}
    missing = [r for r in records if r.sample_id not in known]
    if missing:
        known.update(_compute_features(cfg, missing))
    return known


def _split_of(splits: dict[str, Split], sample_id: str) -> Split | None:
    return splits.get(sample_id) or splits.get(_base_id(sample_id))


def _labeled(records, splits: dict[str, Split], split: Split):
    return [
        r
        for r in records
        if r.single_label is not None and _split_of(splits, r.sample_id) is split
    ]


def _write_logits(path, ids, Z) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id"] + [f"z{i}" for i in range(Z.shape[1])])
        for sid, row in zip(ids, Z):
            w.writerow([sid] + ["%.17g" % v for v in row])


def _write_labels(path, ids, labels) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label"])
        for sid, lab in zip(ids, labels):
            w.writerow([sid, lab])


def _single_label_head(cfg: PipelineConfig):
    model = load_model(_require(cfg.out_path("model.txt"), "model"))
    if isinstance(model, HybridClassifier):
        return model, model.v2
    if cfg.model in ("softmax", "hybrid"):
        return model, model
    raise ConfigError(f"stage needs a single-label head, model is {cfg.model!r}")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def cmd_split(cfg: PipelineConfig) -> int:
    catalog = cfg.load_catalog()
    records = _records(cfg, catalog)
    assignment = split_grouped(records, GroupKey(cfg.group_key), cfg.fractions, cfg.seed)
    cfg.out_path().mkdir(parents=True, exist_ok=True)
    save_splits(cfg.out_path("splits.csv"), assignment)
    counts = {s.value: len(assignment.members(s)) for s in Split}
    log.info("split sizes: %s", counts)
    return EXIT_OK


def _spec_for(cfg: PipelineConfig, record) -> AugmentationSpec | None:
    if cfg.augment_recipe == "custom":
        return AugmentationSpec(
            transforms=tuple(parse_transform(t) for t in cfg.augment_transforms),
            per_source_count=cfg.augment_count,
            square_crop_after_warp=cfg.augment_square_crop,
        )
    return recipe_for(cfg.augment_recipe, record.instrument)


def cmd_augment(cfg: PipelineConfig) -> int:
    if cfg.augment_recipe == "none":
        log.info("augmentation disabled")
        return EXIT_OK
    catalog = cfg.load_catalog()
    records = _records(cfg, catalog)
    if not records:
        raise MarstagError("EMPTY_DATASET", "manifest has no records to augment")
    splits = load_splits(_require(cfg.out_path("splits.csv"), "splits"))
    targets = {Split(s) for s in cfg.augment_to}

    upsample = {}
    sample_spec = _spec_for(cfg, records[0])
    if sample_spec is not None:
        upsample = sample_spec.upsample_factor
    expanded = upsample_second_campaign(records, upsample, splits)

    aug_dir = cfg.out_path("augmented")
    aug_dir.mkdir(parents=True, exist_ok=True)
    out_rows = list(expanded)
    n_generated = 0
    for r in expanded:
        if _split_of(splits, r.sample_id) not in targets:
            continue
        spec = _spec_for(cfg, r)
        img = load_grayscale(Path(cfg.images_dir) / r.image_ref)
        seed = (zlib.crc32(r.sample_id.encode()) ^ cfg.seed) & 0xFFFFFFFF
        for i, out in enumerate(augment(img, spec, seed)):
            aug_id = f"{r.sample_id}__aug{i:02d}"
            ref = f"{aug_id}.png"
            save_grayscale(aug_dir / ref, out)
            rel = os.path.relpath(aug_dir / ref, cfg.images_dir)
            row = type(r)(**{**r.__dict__, "sample_id": aug_id,
                             "image_ref": rel, "georef": None})
            out_rows.append(row)
            n_generated += 1
    save_manifest(cfg.out_path("manifest_augmented.csv"), out_rows)
    log.info("augmented %d images from %d records", n_generated, len(records))
    return EXIT_OK


def cmd_landmarks(cfg: PipelineConfig) -> int:
    if not cfg.landmark_image:
        log.info("no landmark image configured")
        return EXIT_OK
    strip = load_grayscale(_require(Path(cfg.landmark_image), "landmark image"))
    params = (
        load_salience_params(cfg.salience_params)
        if cfg.salience_params
        else SalienceParams()
    )
    smap = salience_map(strip, params)
    landmarks = extract_landmarks(
        smap, params, min_area=cfg.landmark_min_area,
        source_image_id=cfg.landmark_source_id,
    )
    cfg.out_path().mkdir(parents=True, exist_ok=True)
    save_landmarks(cfg.out_path("landmarks.csv"), landmarks)
    crops = cfg.out_path("crops")
    crops.mkdir(exist_ok=True)
    for i, lm in enumerate(landmarks):
        crop = crop_landmark(strip, lm, cfg.landmark_border, cfg.landmark_out_size)
        save_grayscale(crops / f"{cfg.landmark_source_id}_{i:03d}.png", crop)
    log.info("found %d landmarks", len(landmarks))
    return EXIT_OK


def _multilabel_matrix(records, class_ids):
    idx = {c: j for j, c in enumerate(class_ids)}
    Y = np.zeros((len(records), len(class_ids)))
    for i, r in enumerate(records):
        for c in r.multi_labels:
            if c in idx:
                Y[i, idx[c]] = 1.0
    return Y


def cmd_train(cfg: PipelineConfig) -> int:
    from .models import SgdConfig

    catalog = cfg.load_catalog()
    records = _records(cfg, catalog, augmented=True)
    splits = load_splits(_require(cfg.out_path("splits.csv"), "splits"))
    features = _features_for(cfg, records)
    _save_features(cfg.out_path("features.csv"), features)

    sgd = SgdConfig(
        learning_rate=cfg.learning_rate,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed + 1,
        l2=cfg.l2,
    )
    if cfg.model in ("softmax", "hybrid"):
        train_recs = _labeled(records, splits, Split.TRAIN)
        if not train_recs:
            raise MarstagError("EMPTY_DATASET", "no labeled training records")
        X = np.stack([features[r.sample_id] for r in train_recs])
        y = [r.single_label for r in train_recs]
        head = train_softmax(X, y, sgd, classes=catalog.ids())
        if cfg.model == "hybrid":
            v1_catalog = cfg.load_v1_catalog()
            v1_records = load_manifest(_require(Path(cfg.v1_manifest), "v1 manifest"), v1_catalog)
            v1_feats = _compute_features(cfg, v1_records)
            labeled1 = [r for r in v1_records if r.single_label]
            X1 = np.stack([v1_feats[r.sample_id] for r in labeled1])
            y1 = [r.single_label for r in labeled1]
            v1 = train_softmax(X1, y1, sgd, classes=v1_catalog.ids())
            model = HybridClassifier(head, v1, cfg.trigger_class)
        else:
            model = head
    elif cfg.model in ("multilabel", "chain"):
        train_recs = [
            r for r in records
            if r.multi_labels and _split_of(splits, r.sample_id) is Split.TRAIN
        ]
        if not train_recs:
            raise MarstagError("EMPTY_DATASET", "no multi-label training records")
        X = np.stack([features[r.sample_id] for r in train_recs])
        if cfg.model == "multilabel":
            Y = _multilabel_matrix(train_recs, catalog.ids())
            model = train_multilabel(X, Y, sgd, classes=catalog.ids())
        else:
            order = list(cfg.chain_category_order) or (
                MER_CHAIN_CATEGORY_ORDER if cfg.catalog == "mer" else None
            )
            chain_classes = catalog.chain_order(order)
            Y = _multilabel_matrix(train_recs, chain_classes)
            sites = [r.site_id for r in train_recs]
            model = train_chain(X, Y, sites, sgd, chain_classes)
    else:
        raise ConfigError(f"unknown model kind {cfg.model!r}")
    save_model(cfg.out_path("model.txt"), model)
    log.info("trained %s model on %d records", cfg.model, len(train_recs))
    return EXIT_OK


def cmd_calibrate(cfg: PipelineConfig) -> int:
    if cfg.model not in ("softmax", "hybrid"):
        log.info("calibration applies to single-label heads; skipping for %s", cfg.model)
        return EXIT_OK
    catalog = cfg.load_catalog()
    records = _records(cfg, catalog)
    splits = load_splits(_require(cfg.out_path("splits.csv"), "splits"))
    _, head = _single_label_head(cfg)
    features = _features_for(cfg, records)
    val = _labeled(records, splits, Split.VAL)
    if not val:
        raise MarstagError("EMPTY_DATASET", "no labeled validation records")
    ids = [r.sample_id for r in val]
    Z = np.stack([predict_logits(head, features[r.sample_id]) for r in val])
    y = np.array([head.classes.index(r.single_label) for r in val])
    _write_logits(cfg.out_path("val_logits.csv"), ids, Z)
    _write_labels(cfg.out_path("val_labels.csv"), ids, [r.single_label for r in val])
    cal = fit_calibrator(
        CalibrationMethod(cfg.calibration), Z, y,
        OptConfig(max_iters=cfg.opt_max_iters, tolerance=cfg.opt_tolerance),
    )
    save_calibrator(cfg.out_path("calibrator.txt"), cal)
    log.info(
        "calibrated %s: nll %.5f -> %.5f", cfg.calibration, cal.identity_nll, cal.final_nll
    )
    if not cal.converged:
        print("ERROR NONCONVERGENCE: calibrator hit the iteration budget", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def _write_metrics(path, pairs: list[tuple[str, object]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in pairs:
            if isinstance(value, float):
                fh.write(f"{key} = {value:.6f}\n")
            else:
                fh.write(f"{key} = {value}\n")


def cmd_evaluate(cfg: PipelineConfig) -> int:
    catalog = cfg.load_catalog()
    records = _records(cfg, catalog)
    splits = load_splits(_require(cfg.out_path("splits.csv"), "splits"))
    features = _features_for(cfg, records)
    labeled = [r for r in records if r.single_label or r.multi_labels]
    dist = class_distribution(labeled, catalog)
    with open(cfg.out_path("labeled_distribution.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "count", "percent"])
        for row in dist:
            w.writerow([row.class_id, row.count, f"{row.percent:.4f}"])

    if cfg.model in ("multilabel", "chain"):
        return _evaluate_multilabel(cfg, catalog, records, splits, features)

    _, head = _single_label_head(cfg)
    calibrator = load_calibrator(_require(cfg.out_path("calibrator.txt"), "calibrator"))
    test = _labeled(records, splits, Split.TEST)
    if not test:
        raise MarstagError("EMPTY_DATASET", "no labeled test records")
    ids = [r.sample_id for r in test]
    Z = np.stack([predict_logits(head, features[r.sample_id]) for r in test])
    y = np.array([head.classes.index(r.single_label) for r in test])
    _write_logits(cfg.out_path("test_logits.csv"), ids, Z)
    _write_labels(cfg.out_path("test_labels.csv"), ids, [r.single_label for r in test])

    p_un = softmax_rows(Z)
    p_cal = apply_calibrator_rows(calibrator, Z)
    rep_un = abstention_report(p_un, y, cfg.tau)
    rep_cal = abstention_report(p_cal, y, cfg.tau)

    train_labels = [r.single_label for r in _labeled(records, splits, Split.TRAIN)]
    baseline_acc = 0.0
    if train_labels:
        base = most_common_baseline(train_labels, catalog)
        baseline_acc = float(np.mean([r.single_label == base.class_id for r in test]))

    m = cfg.reliability_bins
    _write_metrics(
        cfg.out_path("metrics.txt"),
        [
            ("n_test", len(test)),
            ("baseline_accuracy", baseline_acc),
            ("accuracy_precal_argmax", float((p_un.argmax(1) == y).mean())),
            ("accuracy_postcal_argmax", float((p_cal.argmax(1) == y).mean())),
            ("nll_uncalibrated", nll(p_un, y)),
            ("nll_calibrated", nll(p_cal, y)),
            ("ece_uncalibrated", ece(p_un, y, m)),
            ("ece_calibrated", ece(p_cal, y, m)),
            ("mce_uncalibrated", mce(p_un, y, m)),
            ("mce_calibrated", mce(p_cal, y, m)),
            ("tau", cfg.tau),
            ("accuracy_at_tau_uncalibrated", rep_un.accuracy_at_tau),
            ("abstention_rate_uncalibrated", rep_un.abstention_rate),
            ("accuracy_at_tau_calibrated", rep_cal.accuracy_at_tau),
            ("abstention_rate_calibrated", rep_cal.abstention_rate),
        ],
    )

    bins = reliability_bins(p_cal, y, m)
    with open(cfg.out_path("reliability.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count", "conf", "acc"])
        edges = bins.edges
        for i in range(m):
            w.writerow(
                [
                    f"{edges[i]:.6f}",
                    f"{edges[i + 1]:.6f}",
                    int(bins.counts[i]),
                    f"{bins.confidences[i]:.6f}",
                    f"{bins.accuracies[i]:.6f}",
                ]
            )

    preds = [threshold_predict(row, cfg.tau) for row in p_cal]
    with open(cfg.out_path("per_class.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "precision", "recall", "f1", "support", "group"])
        for cm in per_class_metrics(preds, y, head.classes):
            w.writerow(
                [cm.class_id, f"{cm.precision:.6f}", f"{cm.recall:.6f}",
                 f"{cm.f1:.6f}", cm.support, cm.group]
            )
    mat = confusion_matrix(preds, y, head.classes)
    with open(cfg.out_path("confusion.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + head.classes + ["abstain"])
        for i, class_id in enumerate(head.classes):
            w.writerow([class_id] + [int(v) for v in mat[i]])
    log.info("evaluated %d test records", len(test))
    return EXIT_OK


def _evaluate_multilabel(cfg, catalog, records, splits, features) -> int:
    model = load_model(_require(cfg.out_path("model.txt"), "model"))
    test = [
        r for r in records
        if r.multi_labels and _split_of(splits, r.sample_id) is Split.TEST
    ]
    if not test:
        raise MarstagError("EMPTY_DATASET", "no multi-label test records")
    X = np.stack([features[r.sample_id] for r in test])
    Y = _multilabel_matrix(test, model.classes)
    if cfg.model == "chain":
        P = np.stack(
            [predict_chain(model, x, r.site_id, cfg.strict_sites) for x, r in zip(X, test)]
        )
    else:
        P = np.stack([predict_multilabel(model, x) for x in X])
    loss = multilabel_loss(Y, P)
    preds = [[int(v >= 0.5) for v in row] for row in P]
    tp = sum(p and t for row_p, row_t in zip(preds, Y) for p, t in zip(row_p, row_t))
    fp = sum(p and not t for row_p, row_t in zip(preds, Y) for p, t in zip(row_p, row_t))
    fn = sum((not p) and t for row_p, row_t in zip(preds, Y) for p, t in zip(row_p, row_t))
    micro_f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    _write_metrics(
        cfg.out_path("metrics.txt"),
        [
            ("n_test", len(test)),
            ("multilabel_bce", loss),
            ("micro_f1_at_0.5", micro_f1),
        ],
    )
    log.info("evaluated %d multi-label test records (bce %.4f)", len(test), loss)
    return EXIT_OK


def cmd_tag(cfg: PipelineConfig) -> int:
    catalog = cfg.load_catalog()
    records = _records(cfg, catalog)
    features = _features_for(cfg, records)
    model, head = _single_label_head(cfg)
    cal_path = cfg.out_path("calibrator.txt")
    calibrator = load_calibrator(cal_path) if cal_path.exists() else None
    items = [
        ArchiveItem(
            item_id=r.sample_id,
            features=features[r.sample_id],
            instrument=r.instrument.value,
            georef=r.georef,
        )
        for r in records
    ]
    result = tag_archive(
        items,
        model if isinstance(model, HybridClassifier) else head,
        calibrator,
        cfg.tau,
        catalog,
        other_class=cfg.other_class,
        tagged_at=cfg.timestamp or None,
    )
    tags = polar_filter(result.tags, set(cfg.polar_classes), cfg.polar_cutoff)
    save_tags(cfg.out_path("tags.csv"), tags)
    if result.failures:
        with open(cfg.out_path("tag_failures.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["item_id", "error"])
            w.writerows(result.failures)

    arch_counts: dict[str, int] = {}
    for t in tags:
        arch_counts[t.class_id] = arch_counts.get(t.class_id, 0) + 1
    with open(cfg.out_path("archive_distribution.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "count"])
        for c in sorted(arch_counts):
            w.writerow([c, arch_counts[c]])

    labeled = [r for r in records if r.single_label]
    if labeled and tags:
        lab_counts = {
            row.class_id: row.count for row in class_distribution(labeled, catalog)
        }
        rows = distribution_shift_report(lab_counts, tags, cfg.other_class)
        with open(cfg.out_path("shift_report.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "labeled_percent", "archive_percent", "ratio", "flag"])
            for r in rows:
                ratio = "inf" if r.flagged_inf else f"{r.ratio:.6f}"
                w.writerow(
                    [r.class_id, f"{r.labeled_percent:.6f}",
                     f"{r.archive_percent:.6f}", ratio, "INF" if r.flagged_inf else ""]
                )
    log.info(
        "tagged %d of %d items (%d below tau, %d other, %d failures)",
        len(tags), result.n_items, result.n_below_threshold, result.n_other,
        len(result.failures),
    )
    return EXIT_OK


def cmd_index(cfg: PipelineConfig) -> int:
    tags = load_tags(_require(cfg.out_path("tags.csv"), "tags"))
    index = build_index(tags)
    save_index(cfg.out_path("index.txt"), index)
    log.info("indexed %d classes", len(index.postings))
    return EXIT_OK


def cmd_query(cfg: PipelineConfig, args) -> int:
    from datetime import datetime, timezone

    catalog = cfg.load_catalog()
    index = load_index(_require(cfg.out_path("index.txt"), "index"))
    qlog = QueryLog()
    now = None
    if args.now:
        now = datetime.strptime(args.now, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)
    if args.serve:
        serve_queries(index, catalog, sys.stdin, sys.stdout, qlog, now)
    else:
        if not args.class_id:
            raise ConfigError("query needs a class id (or --serve)")
        lat_range = tuple(args.lat) if args.lat else None
        items = run_query(
            index, catalog, args.class_id, args.min_conf, args.instrument,
            lat_range, qlog, now,
        )
        for item in items:
            print(item)
        print()
    if qlog.entries:
        save_query_log(cfg.out_path("querylog.csv"), qlog)
    return EXIT_OK


def cmd_report(cfg: PipelineConfig) -> int:
    report_dir = cfg.out_path("report")
    rel_path = _require(cfg.out_path("reliability.csv"), "reliability bins")
    pc_path = _require(cfg.out_path("per_class.csv"), "per-class metrics")
    cm_path = _require(cfg.out_path("confusion.csv"), "confusion matrix")

    with open(rel_path, newline="", encoding="utf-8") as fh:
        bins_rows = [
            {
                "bin_lo": float(r["bin_lo"]),
                "bin_hi": float(r["bin_hi"]),
                "count": int(r["count"]),
                "conf": float(r["conf"]),
                "acc": float(r["acc"]),
            }
            for r in csv.DictReader(fh)
        ]
    with open(pc_path, newline="", encoding="utf-8") as fh:
        pc_rows = [
            {
                "class": r["class"],
                "precision": float(r["precision"]),
                "recall": float(r["recall"]),
                "f1": float(r["f1"]),
                "support": int(r["support"]),
                "group": r["group"],
            }
            for r in csv.DictReader(fh)
        ]
    with open(cm_path, newline="", encoding="utf-8") as fh:
        reader = list(csv.reader(fh))
    if not bins_rows or not pc_rows or len(reader) < 2:
        raise MarstagError("MISSING_INPUT", "metrics inputs are empty")
    classes = reader[0][1:-1]
    matrix = np.array([[int(v) for v in row[1:]] for row in reader[1:]])

    report_dir.mkdir(parents=True, exist_ok=True)
    report_mod.emit_reliability_svg(bins_rows, report_dir / "reliability.svg")
    report_mod.emit_pr_scatter_svg(pc_rows, report_dir / "pr_scatter.svg")
    report_mod.emit_confusion_svg(matrix, classes, report_dir / "confusion.svg")

    shift_path = cfg.out_path("shift_report.csv")
    if shift_path.exists():
        with open(shift_path, newline="", encoding="utf-8") as fh:
            shift_rows = [
                {
                    "class": r["class"],
                    "labeled_percent": float(r["labeled_percent"]),
                    "archive_percent": float(r["archive_percent"]),
                }
                for r in csv.DictReader(fh)
            ]
        if shift_rows:
            report_mod.emit_shift_svg(shift_rows, report_dir / "shift.svg")

    tables = report_dir / "tables.txt"
    with open(tables, "w", encoding="utf-8") as fh:
        fh.write("Per-class precision/recall\n")
        fh.write(
            report_mod.format_table(
                ["class", "precision", "recall", "f1", "support", "group"],
                [
                    [r["class"], f"{r['precision']:.3f}", f"{r['recall']:.3f}",
                     f"{r['f1']:.3f}", r["support"], r["group"]]
                    for r in pc_rows
                ],
            )
        )
        fh.write("\nConfusion matrix (rows true, cols predicted)\n")
        fh.write(
            report_mod.format_table(
                ["true\\pred"] + classes + ["abstain"],
                [[classes[i]] + [int(v) for v in matrix[i]] for i in range(len(classes))],
            )
        )
        qlog_path = cfg.out_path("querylog.csv")
        if qlog_path.exists():
            from .archive import load_query_log, usage_report

            rows = usage_report(load_query_log(qlog_path))
            fh.write("\nMonthly queries per class\n")
            fh.write(
                report_mod.format_table(
                    ["month", "class", "queries"], [list(r) for r in rows]
                )
            )
    log.info("report written to %s", report_dir)
    return EXIT_OK


def cmd_run(cfg: PipelineConfig) -> int:
    status = EXIT_OK
    stages = [cmd_split, cmd_augment, cmd_landmarks, cmd_train, cmd_calibrate]
    if cfg.model in ("softmax", "hybrid"):
        stages += [cmd_evaluate, cmd_tag, cmd_index]
    else:
        stages += [cmd_evaluate]
    for stage in stages:
        rc = stage(cfg)
        status = max(status, rc)
    return status


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("-c", "--config", required=True, help="pipeline config file")
    sub.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable; wins over the file)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marstag",
        description="Landmark extraction, calibrated classification, and archive tagging",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("split", "augment", "landmarks", "train", "calibrate",
                 "evaluate", "tag", "index", "report", "run"):
        s = sub.add_parser(name)
        _add_common(s)
    q = sub.add_parser("query")
    _add_common(q)
    q.add_argument("class_id", nargs="?", help="class id to search")
    q.add_argument("--min-conf", type=float, default=0.0)
    q.add_argument("--instrument", default=None)
    q.add_argument("--lat", type=float, nargs=2, metavar=("LO", "HI"), default=None)
    q.add_argument("--now", default=None, help="fixed RFC 3339 timestamp for the log")
    q.add_argument("--serve", action="store_true", help="serve the line protocol on stdin")
    return parser


_COMMANDS = {
    "split": cmd_split,
    "augment": cmd_augment,
    "landmarks": cmd_landmarks,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "tag": cmd_tag,
    "index": cmd_index,
    "report": cmd_report,
    "run": cmd_run,
}


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    return out


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("MARSTAG_LOG", "WARNING").upper(), logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args.set))
        cfg.out_path().mkdir(parents=True, exist_ok=True)
        if args.command == "query":
            return cmd_query(cfg, args)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"ERROR {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MarstagError as exc:
        print(f"ERROR {exc}", file=sys.stderr)
        return exc.exit_status
    except FileNotFoundError as exc:
        print(f"ERROR MISSING_INPUT: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
