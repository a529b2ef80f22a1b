"""Full-archive tagging behind a class-searchable index.

Every archive item is classified with a trained head plus calibrator; only
predictions at or above the confidence threshold, and not of the catch-all
"other" class, become tags. Tags carry geographic coordinates when the
source image is georeferenced, and tags for south-polar-only classes are
dropped at implausible latitudes. The retained tags feed an inverted index
ordered by confidence, queried either programmatically or through a
line-oriented protocol shared with the CLI.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .calibration import (
    Calibrator,
    apply_calibrator,
    softmax,
    threshold_predict,
)
from .catalogs import ClassCatalog
from .datasets import GeoRef
from .errors import MarstagError
from .models import HybridClassifier, SoftmaxHead, predict_logits

DEFAULT_POLAR_CUTOFF_DEG = -60.0


def pixel_to_latlon(g: GeoRef, row: float, col: float) -> tuple[float, float]:
    """Affine pixel-to-planet conversion; longitude wraps into [-180, 180)."""
    lat = g.lat0 + row * g.dlat_per_row
    if abs(lat) > 90.0:
        raise MarstagError("LATITUDE_OUT_OF_RANGE", f"latitude {lat} outside [-90, 90]")
    lon = ((g.lon0 + col * g.dlon_per_col + 180.0) % 360.0) - 180.0
    return lat, lon


@dataclass
class ArchiveItem:
    item_id: str
    features: np.ndarray
    instrument: str = ""
    georef: GeoRef | None = None
    pixel: tuple[float, float] | None = None  # (row, col) of the item's center


@dataclass
class TagRecord:
    item_id: str
    class_id: str
    confidence: float
    lat: float | None = None
    lon: float | None = None
    instrument: str = ""
    tagged_at: str = ""  # RFC 3339


@dataclass
class TaggingResult:
    tags: list[TagRecord]
    n_items: int = 0
    n_below_threshold: int = 0
    n_other: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)


def _classify(head, calibrator: Calibrator | None, features) -> tuple[str, float]:
    if isinstance(head, HybridClassifier):
        # Calibration applies to the first-stage head; the fine-grained
        # second stage reports its own raw softmax confidence.
        z2 = predict_logits(head.v2, features)
        p2 = apply_calibrator(calibrator, z2) if calibrator is not None else softmax(z2)
        top2 = int(p2.argmax())
        if head.v2.classes[top2] != head.trigger_class_id:
            return head.v2.classes[top2], float(p2[top2])
        p1 = softmax(predict_logits(head.v1, features))
        return head.v1.classes[int(p1.argmax())], float(p1.max())
    logits = predict_logits(head, features)
    if calibrator is not None:
        probs = apply_calibrator(calibrator, logits)
    else:
        probs = softmax(logits)
    k = threshold_predict(probs, 0.0)
    return head.classes[k], float(probs[k])


def tag_archive(
    items,
    head: SoftmaxHead | HybridClassifier,
    calibrator: Calibrator | None,
    tau: float,
    catalog: ClassCatalog,
    other_class: str = "other",
    tagged_at: str | None = None,
) -> TaggingResult:
    """Tag a stream of archive items, keeping confident non-"other" classes.

    Output order follows input order. Per-item failures are recorded and
    skipped so one bad item cannot abort a multi-day archive run; the
    summary carries the failure list.
    """
    if tagged_at is None:
        tagged_at = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    result = TaggingResult(tags=[])
    for item in items:
        result.n_items += 1
        try:
            class_id, confidence = _classify(head, calibrator, item.features)
            if confidence < tau:
                result.n_below_threshold += 1
                continue
            if class_id == other_class:
                result.n_other += 1
                continue
            lat = lon = None
            if item.georef is not None and item.pixel is not None:
                lat, lon = pixel_to_latlon(item.georef, *item.pixel)
            elif item.georef is not None:
                lat, lon = pixel_to_latlon(item.georef, 0.0, 0.0)
            result.tags.append(
                TagRecord(
                    item_id=item.item_id,
                    class_id=class_id,
                    confidence=confidence,
                    lat=lat,
                    lon=lon,
                    instrument=item.instrument,
                    tagged_at=tagged_at,
                )
            )
        except Exception as exc:  # keep the stream alive
            result.failures.append((item.item_id, str(exc)))
    return result


def polar_filter(
    tags: list[TagRecord],
    polar_classes: set[str],
    lat_cutoff: float = DEFAULT_POLAR_CUTOFF_DEG,
) -> list[TagRecord]:
    """Drop tags of south-polar-only classes found north of the cutoff
    latitude; everything else passes through unchanged."""
    out: list[TagRecord] = []
    for t in tags:
        if t.class_id in polar_classes:
            if t.lat is None:
                raise MarstagError(
                    "MISSING_LATITUDE", f"polar-class tag {t.item_id!r} lacks latitude"
                )
            if t.lat > lat_cutoff:
                continue
        out.append(t)
    return out


# ---------------------------------------------------------------------------
# Class-searchable index
# ---------------------------------------------------------------------------

@dataclass
class ArchiveIndex:
    postings: dict[str, list[tuple[str, float]]]  # class -> (item, conf) desc
    meta: dict[str, tuple[str, float | None]]  # item -> (instrument, lat)


def build_index(tags: list[TagRecord]) -> ArchiveIndex:
    """Invert tags into per-class postings sorted by descending confidence
    (ties by item id); duplicate (item, class) pairs keep the max."""
    best: dict[str, dict[str, TagRecord]] = {}
    meta: dict[str, tuple[str, float | None]] = {}
    for t in tags:
        per_class = best.setdefault(t.class_id, {})
        prev = per_class.get(t.item_id)
        if prev is None or t.confidence > prev.confidence:
            per_class[t.item_id] = t
        meta[t.item_id] = (t.instrument, t.lat)
    postings = {
        class_id: sorted(
            ((t.item_id, t.confidence) for t in per_class.values()),
            key=lambda p: (-p[1], p[0]),
        )
        for class_id, per_class in sorted(best.items())
    }
    return ArchiveIndex(postings, meta)


@dataclass(frozen=True)
class QueryEntry:
    timestamp: datetime
    class_id: str
    result_count: int


@dataclass
class QueryLog:
    entries: list[QueryEntry] = field(default_factory=list)


def query(
    index: ArchiveIndex,
    catalog: ClassCatalog,
    class_id: str,
    min_conf: float = 0.0,
    instrument: str | None = None,
    lat_range: tuple[float, float] | None = None,
    log: QueryLog | None = None,
    now: datetime | None = None,
) -> list[str]:
    """Item ids for a class, filtered by confidence/instrument/latitude,
    in posting (descending confidence) order. Every query is logged."""
    if class_id not in catalog:
        raise MarstagError("UNKNOWN_CLASS", f"unknown class {class_id!r}")
    results: list[str] = []
    for item_id, conf in index.postings.get(class_id, []):
        if conf < min_conf:
            continue
        inst, lat = index.meta.get(item_id, ("", None))
        if instrument is not None and inst != instrument:
            continue
        if lat_range is not None:
            if lat is None or not (lat_range[0] <= lat <= lat_range[1]):
                continue
        results.append(item_id)
    if log is not None:
        stamp = now if now is not None else datetime.now(timezone.utc)
        log.entries.append(QueryEntry(stamp, class_id, len(results)))
    return results


def usage_report(log: QueryLog) -> list[tuple[str, str, int]]:
    """(month, class, query count) rows, months in UTC, sorted."""
    counts: dict[tuple[str, str], int] = {}
    for e in log.entries:
        month = e.timestamp.astimezone(timezone.utc).strftime("%Y-%m")
        key = (month, e.class_id)
        counts[key] = counts.get(key, 0) + 1
    return [(m, c, counts[(m, c)]) for m, c in sorted(counts)]


@dataclass(frozen=True)
class ShiftRow:
    class_id: str
    labeled_percent: float
    archive_percent: float
    ratio: float  # inf flagged via math.inf
    flagged_inf: bool = False


def distribution_shift_report(
    labeled_counts: dict[str, int],
    archive_tags: list[TagRecord],
    other_class: str = "other",
) -> list[ShiftRow]:
    """Labeled-set versus archive-prediction class shares, excluding the
    catch-all class on both sides, with the archive/labeled ratio."""
    if not labeled_counts or not archive_tags:
        raise MarstagError("EMPTY_DATASET", "need both labeled counts and archive tags")
    labeled = {c: n for c, n in labeled_counts.items() if c != other_class}
    archive: dict[str, int] = {}
    for t in archive_tags:
        if t.class_id != other_class:
            archive[t.class_id] = archive.get(t.class_id, 0) + 1
    lab_total = sum(labeled.values())
    arc_total = sum(archive.values())
    rows: list[ShiftRow] = []
    for c in sorted(set(labeled) | set(archive)):
        lab_pct = labeled.get(c, 0) / lab_total * 100.0 if lab_total else 0.0
        arc_pct = archive.get(c, 0) / arc_total * 100.0 if arc_total else 0.0
        if lab_pct > 0:
            rows.append(ShiftRow(c, lab_pct, arc_pct, arc_pct / lab_pct))
        else:
            rows.append(ShiftRow(c, lab_pct, arc_pct, float("inf"), flagged_inf=True))
    return rows


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_tags(path, tags: list[TagRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "class", "confidence", "lat", "lon", "instrument", "tagged_at"])
        for t in tags:
            w.writerow(
                [
                    t.item_id,
                    t.class_id,
                    f"{t.confidence:.6f}",
                    "" if t.lat is None else f"{t.lat:.6f}",
                    "" if t.lon is None else f"{t.lon:.6f}",
                    t.instrument,
                    t.tagged_at,
                ]
            )


def load_tags(path) -> list[TagRecord]:
    tags: list[TagRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            tags.append(
                TagRecord(
                    item_id=row["item_id"],
                    class_id=row["class"],
                    confidence=float(row["confidence"]),
                    lat=float(row["lat"]) if row["lat"] else None,
                    lon=float(row["lon"]) if row["lon"] else None,
                    instrument=row["instrument"],
                    tagged_at=row["tagged_at"],
                )
            )
    return tags


def save_index(path, index: ArchiveIndex) -> None:
    """Per-class sections, each posting on its own line."""
    with open(path, "w", encoding="utf-8") as fh:
        for class_id in sorted(index.postings):
            fh.write(f"[{class_id}]\n")
            for item_id, conf in index.postings[class_id]:
                inst, lat = index.meta.get(item_id, ("", None))
                lat_s = "" if lat is None else f"{lat:.6f}"
                fh.write(f"{item_id} {conf:.6f} {inst} {lat_s}\n")


def load_index(path) -> ArchiveIndex:
    postings: dict[str, list[tuple[str, float]]] = {}
    meta: dict[str, tuple[str, float | None]] = {}
    current: str | None = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                postings[current] = []
                continue
            if current is None:
                raise MarstagError("MALFORMED_ROW", f"posting before any section: {line!r}")
            parts = line.split(" ")
            item_id, conf = parts[0], float(parts[1])
            inst = parts[2] if len(parts) > 2 else ""
            lat = float(parts[3]) if len(parts) > 3 and parts[3] else None
            postings[current].append((item_id, conf))
            meta[item_id] = (inst, lat)
    return ArchiveIndex(postings, meta)


def save_query_log(path, log: QueryLog) -> None:
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if fh.tell() == 0:
            w.writerow(["timestamp", "class_id", "result_count"])
        for e in log.entries:
            w.writerow(
                [e.timestamp.strftime("%Y-%m-%dT%H:%M:%SZ"), e.class_id, e.result_count]
            )


def load_query_log(path) -> QueryLog:
    log = QueryLog()
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            log.entries.append(
                QueryEntry(
                    datetime.strptime(row["timestamp"], "%Y-%m-%dT%H:%M:%SZ").replace(
                        tzinfo=timezone.utc
                    ),
                    row["class_id"],
                    int(row["result_count"]),
                )
            )
    return log


# ---------------------------------------------------------------------------
# Line-oriented query protocol
# ---------------------------------------------------------------------------

def serve_queries(
    index: ArchiveIndex,
    catalog: ClassCatalog,
    in_stream,
    out_stream,
    log: QueryLog | None = None,
    now: datetime | None = None,
) -> None:
    """Serve `QUERY class min_conf [instrument] [lat_lo lat_hi]` requests.

    Responses are item ids one per line followed by a blank line; errors are
    a single `ERROR <code>` line followed by a blank line. `QUIT` or end of
    input stops the loop.
    """
    for raw in in_stream:
        line = raw.strip()
        if not line:
            continue
        if line.upper() == "QUIT":
            break
        tokens = line.split()
        if tokens[0].upper() != "QUERY" or len(tokens) < 3:
            out_stream.write("ERROR BAD_REQUEST\n\n")
            out_stream.flush()
            continue
        try:
            class_id = tokens[1]
            min_conf = float(tokens[2])
            rest = tokens[3:]
            instrument = None
            lat_range = None
            if len(rest) >= 2 and _is_float(rest[-1]) and _is_float(rest[-2]):
                lat_range = (float(rest[-2]), float(rest[-1]))
                rest = rest[:-2]
            if rest:
                instrument = rest[0]
            items = query(
                index, catalog, class_id, min_conf, instrument, lat_range, log, now
            )
            for item_id in items:
                out_stream.write(item_id + "\n")
            out_stream.write("\n")
        except MarstagError as exc:
            out_stream.write(f"ERROR {exc.code}\n\n")
        out_stream.flush()


def _is_float(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False
