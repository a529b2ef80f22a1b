"""End-to-end acceptance checks.

Each test prints one PASS/FAIL line (visible with ``pytest -s``) and
enforces a wall-clock budget. Oracles are independent of the code paths
they check: brute-force per-item recomputation for the binned calibration
error, a transportation LP for the 1-D earth mover's distance, a linear
scan for index queries, and closed forms elsewhere.
"""

import hashlib
import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy.optimize import linprog

from marstag.archive import ArchiveItem, TagRecord, build_index, polar_filter, query, tag_archive
from marstag.augment import augment, mer_recipe
from marstag.calibration import (
    CalibrationMethod,
    Calibrator,
    OptConfig,
    abstention_report,
    apply_calibrator,
    apply_calibrator_rows,
    ece,
    fit_calibrator,
    softmax,
    softmax_rows,
)
from marstag.catalogs import hirise_catalog, msl_v1_catalog, msl_v2_catalog
from marstag.cli import main as cli_main
from marstag.datasets import GeoRef, GroupKey, Instrument, SampleRecord, split_grouped
from marstag.fixtures import make_demo_dataset
from marstag.landmarking import (
    GaConfig,
    Landmark,
    SalienceBounds,
    SalienceParams,
    crop_landmark,
    emd_1d,
    extract_landmarks,
    ga_optimize_full,
    salience_map,
)
from marstag.models import (
    ChainModel,
    HybridClassifier,
    SgdConfig,
    SoftmaxHead,
    hybrid_classify,
    multilabel_loss,
    multilabel_grad_logits,
    predict_chain,
    sigmoid,
    site_one_hot,
    train_softmax,
)


@contextmanager
def criterion(number, name, limit_seconds):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number:02d} {name}: FAIL "
              f"({time.perf_counter() - start:.1f}s)")
        raise
    elapsed = time.perf_counter() - start
    print(f"ACCEPTANCE {number:02d} {name}: PASS ({elapsed:.1f}s)")
    assert elapsed < limit_seconds, f"criterion {number} exceeded {limit_seconds}s"


def sample_labels(rng, logits):
    probs = softmax_rows(logits)
    return (probs.cumsum(axis=1) < rng.random(len(logits))[:, None]).sum(axis=1)


def test_01_calibration_identities():
    with criterion(1, "calibration identities", 5):
        rng = np.random.default_rng(0)
        total = 0
        for k in range(2, 25):
            n = 435
            Z = rng.normal(0, 3, size=(n, k))
            base = softmax_rows(Z)
            temp = apply_calibrator_rows(
                Calibrator(CalibrationMethod.TEMPERATURE, T=1.0), Z
            )
            mat = apply_calibrator_rows(
                Calibrator(CalibrationMethod.MATRIX, W=np.eye(k), b=np.zeros(k)), Z
            )
            assert np.abs(temp - base).max() < 1e-12
            assert np.abs(mat - base).max() < 1e-12
            total += n
        assert total >= 10000


def test_02_temperature_argmax_invariance():
    with criterion(2, "temperature argmax invariance", 5):
        rng = np.random.default_rng(1)
        checked = 0
        while checked < 10000:
            k = int(rng.integers(2, 12))
            n = 500
            Z = rng.normal(0, 4, size=(n, k))
            T = np.exp(rng.uniform(np.log(0.05), np.log(20.0), size=n))
            scaled = softmax_rows(Z / T[:, None])
            assert np.array_equal(scaled.argmax(axis=1), softmax_rows(Z).argmax(axis=1))
            checked += n


def brute_force_ece(probs, labels, m):
    stats = {}
    for row, label in zip(probs, labels):
        conf = max(row)
        pred = int(np.argmax(row))
        idx = min(m - 1, max(0, int(np.ceil(conf * m)) - 1))
        count, conf_sum, correct = stats.get(idx, (0, 0.0, 0))
        stats[idx] = (count + 1, conf_sum + conf, correct + (pred == label))
    total = len(labels)
    return sum(
        (count / total) * abs(correct / count - conf_sum / count)
        for count, conf_sum, correct in stats.values()
    )


def test_03_ece_oracle_equivalence():
    with criterion(3, "ece matches brute-force oracle", 10):
        hand = ece(np.array([[0.6, 0.4], [0.9, 0.1]]), np.array([1, 0]), 2)
        assert hand == pytest.approx(0.25, abs=1e-12)
        rng = np.random.default_rng(2)
        for _ in range(1000):
            n = int(rng.integers(1, 50))
            k = int(rng.integers(2, 7))
            m = int(rng.integers(1, 16))
            probs = softmax_rows(rng.normal(0, 2, size=(n, k)))
            labels = rng.integers(0, k, size=n)
            assert ece(probs, labels, m) == pytest.approx(
                brute_force_ece(probs, labels, m), abs=1e-12
            )


def test_04_temperature_recovery():
    with criterion(4, "temperature recovery T=3", 30):
        rng = np.random.default_rng(42)
        z0 = rng.normal(0.0, 1.5, size=(20000, 5))
        labels = sample_labels(rng, z0)
        cal = fit_calibrator(CalibrationMethod.TEMPERATURE, 3.0 * z0, labels, OptConfig())
        assert 2.85 <= cal.T <= 3.15


def test_05_calibration_trend_on_overconfident_head():
    with criterion(5, "calibration trend (ECE halves, acc@0.9 rises)", 120):
        k = 4
        centers = np.stack(
            [[np.cos(a), np.sin(a)] for a in 2 * np.pi * np.arange(k) / k]
        )

        def blobs(n, sigma, seed):
            r = np.random.default_rng(seed)
            y = r.integers(0, k, size=n)
            return centers[y] + r.normal(0, sigma, size=(n, 2)), y

        # training blobs are tighter than validation blobs, so the head is
        # systematically over-confident on validation
        Xtr, ytr = blobs(600, 0.35, seed=1)
        Xval, yval = blobs(4000, 0.6, seed=2)
        head = train_softmax(
            Xtr,
            [str(v) for v in ytr],
            SgdConfig(epochs=250, learning_rate=0.5, batch_size=32, seed=3),
            classes=[str(i) for i in range(k)],
        )
        Z = Xval @ head.weights.T + head.bias
        p_un = softmax_rows(Z)
        ece_un = ece(p_un, yval, 10)
        rep_un = abstention_report(p_un, yval, 0.9)
        plain_acc_un = float((p_un.argmax(axis=1) == yval).mean())
        assert ece_un > 0.05  # the fixture really is miscalibrated
        for method in CalibrationMethod:
            cal = fit_calibrator(method, Z, yval, OptConfig(max_iters=500))
            p_cal = apply_calibrator_rows(cal, Z)
            ece_cal = ece(p_cal, yval, 10)
            rep_cal = abstention_report(p_cal, yval, 0.9)
            assert ece_cal <= 0.5 * ece_un, method
            assert rep_cal.accuracy_at_tau > plain_acc_un, method
            assert rep_cal.abstention_rate > rep_un.abstention_rate, method


def test_06_multilabel_loss_closed_forms():
    with criterion(6, "multi-label loss closed forms", 5):
        loss = multilabel_loss(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]]))
        assert loss == pytest.approx(np.log(2), abs=1e-9)
        rng = np.random.default_rng(3)
        for _ in range(10):
            n, m = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            z = rng.normal(size=(n, m))
            y = (rng.random((n, m)) > 0.5).astype(float)
            grad = multilabel_grad_logits(z, y)
            assert np.allclose(grad, (sigmoid(z) - y) / (n * m))
            eps = 1e-6
            for i in range(n):
                for j in range(m):
                    zp, zm = z.copy(), z.copy()
                    zp[i, j] += eps
                    zm[i, j] -= eps
                    numeric = (
                        multilabel_loss(y, sigmoid(zp)) - multilabel_loss(y, sigmoid(zm))
                    ) / (2 * eps)
                    assert numeric == pytest.approx(grad[i, j], abs=1e-6)


def test_07_chain_reduction_identity():
    with criterion(7, "chain reduces to binary relevance bitwise", 5):
        rng = np.random.default_rng(4)
        d, n_classes = 8, 5
        sites = ["s1", "s2", "s3", "<UNKNOWN>"]
        w_feat = rng.normal(size=(n_classes, d))
        w_site = rng.normal(size=(n_classes, len(sites)))
        steps = [
            np.concatenate([w_feat[t], np.zeros(t), w_site[t]])
            for t in range(n_classes)
        ]
        model = ChainModel(list("abcde"), steps, sites, d)
        for _ in range(1000):
            x = rng.normal(size=d)
            site = sites[int(rng.integers(0, 3))]
            onehot = site_one_hot(site, sites)
            binary_relevance = sigmoid(
                np.array(
                    [
                        np.dot(w_feat[t], x) + np.dot(w_site[t], onehot)
                        for t in range(n_classes)
                    ]
                )
            )
            assert np.array_equal(predict_chain(model, x, site), binary_relevance)


def transport_lp_emd(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a / a.sum()
    b = b / b.sum()
    n = len(a)
    cost = np.abs(np.subtract.outer(np.arange(n), np.arange(n))).ravel()
    A_eq = []
    for i in range(n):
        row = np.zeros((n, n))
        row[i, :] = 1.0
        A_eq.append(row.ravel())
    for j in range(n):
        col = np.zeros((n, n))
        col[:, j] = 1.0
        A_eq.append(col.ravel())
    res = linprog(
        cost, A_eq=np.array(A_eq), b_eq=np.concatenate([a, b]), method="highs"
    )
    assert res.success
    return res.fun


def test_08_emd_transport_lp_oracle():
    with criterion(8, "1-D EMD equals transportation LP", 30):
        rng = np.random.default_rng(5)
        for _ in range(500):
            a = rng.uniform(0.0, 1.0, size=8) + 1e-6
            b = rng.uniform(0.0, 1.0, size=8) + 1e-6
            assert emd_1d(a, b) == pytest.approx(transport_lp_emd(a, b), abs=1e-9)
        for _ in range(200):
            a = rng.uniform(0.01, 1.0, size=8)
            b = rng.uniform(0.01, 1.0, size=8)
            c = rng.uniform(0.01, 1.0, size=8)
            assert emd_1d(a, b) == pytest.approx(emd_1d(b, a), abs=1e-9)
            assert emd_1d(a, a) <= 1e-12
            assert emd_1d(a, b) <= emd_1d(a, c) + emd_1d(c, b) + 1e-9


def test_09_landmark_pipeline_and_ga_recovery():
    with criterion(9, "landmark pipeline fixture + GA recovery", 120):
        # two bright blobs on a noisy strip -> exactly two landmarks
        rng = np.random.default_rng(9)
        strip = np.full((96, 200), 30.0) + rng.normal(0, 1.5, (96, 200))
        blob_a = (20, 30, 32, 42)
        blob_b = (60, 140, 72, 152)
        strip[blob_a[0]:blob_a[2], blob_a[1]:blob_a[3]] = 220.0
        strip[blob_b[0]:blob_b[2], blob_b[1]:blob_b[3]] = 200.0
        strip = np.clip(strip, 0, 255)
        params = SalienceParams(
            inner_window=5, outer_window=15, w_canny=0.2, w_emd=0.8,
            salience_threshold=0.5, canny_low=0.1, canny_high=0.3, histogram_bins=16,
        )
        found = extract_landmarks(
            salience_map(strip, params), params, min_area=25, source_image_id="strip"
        )
        assert len(found) == 2
        margin = params.outer_window // 2
        for lm, blob in zip(sorted(found, key=lambda l: l.bbox), (blob_a, blob_b)):
            r0, c0, r1, c1 = lm.bbox
            # component sits on the blob: contains its center, within a
            # window-sized dilation of the blob rectangle
            assert r0 <= (blob[0] + blob[2]) // 2 <= r1
            assert c0 <= (blob[1] + blob[3]) // 2 <= c1
            assert blob[0] - margin <= r0 and r1 <= blob[2] + margin
            assert blob[1] - margin <= c0 and c1 <= blob[3] + margin

        # 40x40 box + 30-px border spans exactly 100x100 before the resize
        big = np.random.default_rng(10).uniform(0, 255, size=(300, 300))
        lm40 = Landmark("s", (130, 130, 170, 170), 1.0, 1600)
        pre = crop_landmark(big, lm40, border=30, out_size=100)
        assert np.array_equal(pre, big[100:200, 100:200])
        out = crop_landmark(big, lm40, border=30, out_size=227)
        assert out.shape == (227, 227)

        # GA recovers the threshold that regenerates the ground-truth mask
        size = 48
        yy, xx = np.mgrid[0:size, 0:size]
        c = (size - 1) / 2
        img = 40.0 + 180.0 * np.exp(
            -((yy - c) ** 2 + (xx - c) ** 2) / (2 * (size / 5) ** 2)
        )
        img = np.clip(img + np.random.default_rng(5).normal(0, 2.0, (size, size)), 0, 255)
        base = SalienceParams(
            inner_window=3, outer_window=11, w_canny=0.3, w_emd=0.7,
            salience_threshold=0.5, canny_low=0.1, canny_high=0.3, histogram_bins=16,
        )
        truth = salience_map(img, base) >= 0.5
        bounds = SalienceBounds(
            inner_window=(3, 3), outer_window=(11, 11), w_canny=(0.3, 0.3),
            w_emd=(0.7, 0.7), salience_threshold=(0.05, 0.95),
            canny_low=(0.1, 0.1), canny_high=(0.3, 0.3), histogram_bins=(16, 16),
        )
        result = ga_optimize_full(
            [(img, truth)], bounds, GaConfig(population=30, generations=40, seed=123)
        )
        assert abs(result.params.salience_threshold - 0.5) <= 0.05


def test_10_split_and_augmentation_arithmetic():
    with criterion(10, "group-disjoint splits + 29-per-source augmentation", 60):
        records = []
        for g in range(12):
            for i in range(4 + g % 3):
                records.append(
                    SampleRecord(
                        sample_id=f"g{g}i{i}",
                        image_ref="x.png",
                        instrument=Instrument.PANCAM_L,
                        source_image_id=f"src{g}",
                    )
                )
        for seed in range(100):
            asg = split_grouped(records, GroupKey.SOURCE_IMAGE, (0.6, 0.15, 0.25), seed)
            by_group = {}
            for r in records:
                by_group.setdefault(r.source_image_id, set()).add(
                    asg.assignment[r.sample_id]
                )
            assert all(len(splits) == 1 for splits in by_group.values())

        # 1806 training sources, 29 augmented copies each, originals kept
        recipe = mer_recipe()
        rng = np.random.default_rng(6)
        img = rng.uniform(0, 255, size=(12, 12))
        total = 0
        for idx in range(1806):
            total += len(augment(img, recipe, seed=idx))
        total += 1806  # the originals
        assert total == 54180
        # same recipe on the 456 validation sources
        assert 456 * (recipe.per_source_count + 1) == 13680


def test_11_deployment_rules_and_query_oracle():
    with criterion(11, "deployment rules + query oracle", 30):
        catalog = hirise_catalog()
        classes = ["crater", "other", "spider"]
        head = SoftmaxHead(10.0 * np.eye(3), np.zeros(3), classes)

        def item(item_id, hot, scale, lat=None):
            x = np.zeros(3)
            x[classes.index(hot)] = scale
            georef = None
            if lat is not None:
                georef = GeoRef(lat0=lat, lon0=0.0, dlat_per_row=0.0, dlon_per_col=0.0)
            return ArchiveItem(item_id, x, instrument="HIRISE", georef=georef)

        items = [
            item("confident_crater", "crater", 1.0, lat=-40.0),
            item("weak_crater", "crater", 0.1, lat=-40.0),
            item("confident_other", "other", 1.0, lat=-40.0),
            item("spider_north", "spider", 1.0, lat=-30.0),
            item("spider_south", "spider", 1.0, lat=-80.0),
        ]
        result = tag_archive(items, head, None, 0.9, catalog, tagged_at="t")
        swiss = [
            TagRecord("swiss_north", "swiss_cheese", 0.99, lat=-30.0, lon=0.0,
                      instrument="HIRISE", tagged_at="t"),
            TagRecord("swiss_south", "swiss_cheese", 0.99, lat=-80.0, lon=0.0,
                      instrument="HIRISE", tagged_at="t"),
        ]
        tags = polar_filter(result.tags + swiss, {"spider", "swiss_cheese"}, -60.0)
        index = build_index(tags)
        indexed = {i for postings in index.postings.values() for i, _ in postings}
        assert "weak_crater" not in indexed  # below 0.9
        assert "confident_other" not in indexed  # catch-all class
        assert "spider_north" not in indexed  # wrong latitude
        assert "swiss_north" not in indexed
        assert {"confident_crater", "spider_south", "swiss_south"} <= indexed

        # query results match a brute-force linear scan over 10k random tags
        rng = np.random.default_rng(7)
        class_pool = ["crater", "spider", "dark_dune", "bright_dune", "slope_streak"]
        instruments = ["HIRISE", "CAM2", "CAM3"]
        random_tags = [
            TagRecord(
                item_id=f"i{j:05d}",
                class_id=class_pool[rng.integers(0, len(class_pool))],
                confidence=float(np.round(rng.uniform(0.9, 1.0), 6)),
                lat=float(np.round(rng.uniform(-90, 30), 3)),
                lon=0.0,
                instrument=instruments[rng.integers(0, 3)],
                tagged_at="t",
            )
            for j in range(10000)
        ]
        index = build_index(random_tags)
        best = {}
        for t in random_tags:
            key = (t.class_id, t.item_id)
            if key not in best or t.confidence > best[key].confidence:
                best[key] = t
        for _ in range(50):
            cls = class_pool[rng.integers(0, len(class_pool))]
            min_conf = float(rng.uniform(0.9, 1.0))
            instrument = (
                instruments[rng.integers(0, 3)] if rng.random() < 0.5 else None
            )
            lat_range = (-75.0, -10.0) if rng.random() < 0.5 else None
            expected = sorted(
                (
                    t
                    for (c, _), t in best.items()
                    if c == cls
                    and t.confidence >= min_conf
                    and (instrument is None or t.instrument == instrument)
                    and (lat_range is None or lat_range[0] <= t.lat <= lat_range[1])
                ),
                key=lambda t: (-t.confidence, t.item_id),
            )
            got = query(index, catalog, cls, min_conf, instrument, lat_range)
            assert got == [t.item_id for t in expected]


def test_12_hybrid_dispatch():
    with criterion(12, "hybrid dispatch covers 35 classes", 5):
        v2cat, v1cat = msl_v2_catalog(), msl_v1_catalog()
        assert len(v2cat.classes) == 19 and len(v1cat.classes) == 17
        d = 6
        rng = np.random.default_rng(8)
        v2 = SoftmaxHead(rng.normal(size=(19, d)), np.zeros(19), v2cat.ids())
        v1 = SoftmaxHead(rng.normal(size=(17, d)), np.zeros(17), v1cat.ids())
        hybrid = HybridClassifier(v2, v1, "other_rover_part")
        assert len(hybrid.reachable_classes()) == 35

        # forcing the first stage onto the trigger always yields v1 output
        forced = SoftmaxHead(np.zeros((19, d)), np.zeros(19), v2cat.ids())
        forced.bias[v2cat.ids().index("other_rover_part")] = 50.0
        triggered = HybridClassifier(forced, v1, "other_rover_part")
        for _ in range(200):
            x = rng.normal(size=d)
            class_id, probs = hybrid_classify(triggered, x)
            assert class_id in v1.classes
            assert probs.shape == (17,)
        # and a non-trigger argmax stays with the first stage
        forced_sand = SoftmaxHead(np.zeros((19, d)), np.zeros(19), v2cat.ids())
        forced_sand.bias[v2cat.ids().index("sand")] = 50.0
        class_id, probs = hybrid_classify(
            HybridClassifier(forced_sand, v1, "other_rover_part"), np.zeros(d)
        )
        assert class_id == "sand" and probs.shape == (19,)


def test_13_end_to_end_determinism(tmp_path):
    with criterion(13, "pipeline runs are byte-identical", 300):
        paths = make_demo_dataset(tmp_path / "demo", seed=7)
        assert cli_main(["run", "-c", str(paths["config"])]) == 0
        out2 = tmp_path / "demo" / "out2"
        assert cli_main(["run", "-c", str(paths["config"]),
                         "--set", f"out_dir={out2}"]) == 0

        def digest(path):
            return hashlib.sha256(path.read_bytes()).hexdigest()

        for name in ("metrics.txt", "tags.csv", "index.txt",
                      "reliability.csv", "per_class.csv", "confusion.csv"):
            assert digest(paths["out_dir"] / name) == digest(out2 / name), name
        # and a rerun into the same directory stays identical
        before = digest(paths["out_dir"] / "tags.csv")
        assert cli_main(["run", "-c", str(paths["config"])]) == 0
        assert digest(paths["out_dir"] / "tags.csv") == before
