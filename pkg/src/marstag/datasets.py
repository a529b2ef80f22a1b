"""Dataset records, manifest I/O, label-vote merging, and grouped splits.

A manifest is a UTF-8 CSV with one row per image. Columns: sample_id,
image_ref, instrument, source_image_id, sol, site_id, single_label,
multi_labels (semicolon-separated), campaign, lat0, lon0, dlat, dlon.
Empty string means absent.

Splits are group-disjoint: every sample carrying the same group key value
(source image, sol, or site) lands in the same split, so evaluation images
never share an acquisition with training images.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .catalogs import ClassCatalog
from .errors import MarstagError


class Instrument(str, Enum):
    HIRISE = "HIRISE"
    MASTCAM_LEFT = "MASTCAM_LEFT"
    MASTCAM_RIGHT = "MASTCAM_RIGHT"
    MAHLI = "MAHLI"
    PANCAM_L = "PANCAM_L"
    PANCAM_R = "PANCAM_R"


class Campaign(str, Enum):
    PRIMARY = "PRIMARY"
    SECOND_CAMPAIGN = "SECOND_CAMPAIGN"


class Split(str, Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


class GroupKey(str, Enum):
    SOURCE_IMAGE = "SOURCE_IMAGE"
    SOL_RANGE = "SOL_RANGE"
    SITE = "SITE"


@dataclass(frozen=True)
class GeoRef:
    """Affine pixel-to-planet mapping: degrees at pixel (0, 0) plus per-pixel steps."""

    lat0: float
    lon0: float
    dlat_per_row: float = 0.0
    dlon_per_col: float = 0.0


@dataclass
class SampleRecord:
    sample_id: str
    image_ref: str
    instrument: Instrument
    source_image_id: str = ""
    sol: int | None = None
    site_id: str = ""
    single_label: str | None = None
    multi_labels: frozenset[str] = frozenset()
    campaign: Campaign = Campaign.PRIMARY
    georef: GeoRef | None = None

    def group_value(self, key: GroupKey) -> str:
        if key is GroupKey.SOURCE_IMAGE:
            return self.source_image_id
        if key is GroupKey.SOL_RANGE:
            return "" if self.sol is None else str(self.sol)
        return self.site_id


@dataclass
class SplitAssignment:
    assignment: dict[str, Split]
    fractions: tuple[float, float, float]
    group_key: GroupKey

    def members(self, split: Split) -> list[str]:
        return [s for s, v in self.assignment.items() if v is split]


MANIFEST_COLUMNS = [
    "sample_id",
    "image_ref",
    "instrument",
    "source_image_id",
    "sol",
    "site_id",
    "single_label",
    "multi_labels",
    "campaign",
    "lat0",
    "lon0",
    "dlat",
    "dlon",
]


def load_manifest(path, catalog: ClassCatalog) -> list[SampleRecord]:
    """Parse a manifest CSV into records, validating labels against the catalog.

    Raises MALFORMED_ROW (with the 1-based line number), UNKNOWN_CLASS, or
    DUPLICATE_SAMPLE_ID.
    """
    records: list[SampleRecord] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                rec = _parse_row(row, catalog)
            except MarstagError:
                raise
            except Exception as exc:
                raise MarstagError(
                    "MALFORMED_ROW", f"line {lineno}: {exc}"
                ) from exc
            if rec.sample_id in seen:
                raise MarstagError(
                    "DUPLICATE_SAMPLE_ID",
                    f"line {lineno}: duplicate sample_id {rec.sample_id!r}",
                )
            seen.add(rec.sample_id)
            records.append(rec)
    return records


def _parse_row(row: dict, catalog: ClassCatalog) -> SampleRecord:
    def get(key):
        v = row.get(key)
        return "" if v is None else v.strip()

    sample_id = get("sample_id")
    if not sample_id:
        raise ValueError("missing sample_id")
    single = get("single_label") or None
    if single is not None:
        single = catalog.resolve(single)
    multi = frozenset(
        catalog.resolve(tok.strip())
        for tok in get("multi_labels").split(";")
        if tok.strip()
    )
    georef = None
    if get("lat0") or get("lon0"):
        georef = GeoRef(
            lat0=float(get("lat0") or 0.0),
            lon0=float(get("lon0") or 0.0),
            dlat_per_row=float(get("dlat") or 0.0),
            dlon_per_col=float(get("dlon") or 0.0),
        )
    return SampleRecord(
        sample_id=sample_id,
        image_ref=get("image_ref"),
        instrument=Instrument(get("instrument")),
        source_image_id=get("source_image_id"),
        sol=int(get("sol")) if get("sol") else None,
        site_id=get("site_id"),
        single_label=single,
        multi_labels=multi,
        campaign=Campaign(get("campaign")) if get("campaign") else Campaign.PRIMARY,
        georef=georef,
    )


def save_manifest(path, records: list[SampleRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for r in records:
            g = r.georef
            w.writerow(
                [
                    r.sample_id,
                    r.image_ref,
                    r.instrument.value,
                    r.source_image_id,
                    "" if r.sol is None else r.sol,
                    r.site_id,
                    r.single_label or "",
                    ";".join(sorted(r.multi_labels)),
                    r.campaign.value,
                    "" if g is None else repr(g.lat0),
                    "" if g is None else repr(g.lon0),
                    "" if g is None else repr(g.dlat_per_row),
                    "" if g is None else repr(g.dlon_per_col),
                ]
            )


@dataclass(frozen=True)
class VoteSet:
    sample_id: str
    votes: tuple[str, ...]


NEEDS_REVIEW = None  # merge_votes sentinel: no strict majority, send to expert review


def merge_votes(votes: VoteSet) -> str | None:
    """Return the strict-majority class id, or None when review is needed.

    With the usual three votes, two agreeing settle the label; three-way
    disagreement (and any even tie) is left for expert review.
    """
    if not votes.votes:
        raise MarstagError("EMPTY_VOTES", f"no votes for {votes.sample_id}")
    counts: dict[str, int] = {}
    for v in votes.votes:
        counts[v] = counts.get(v, 0) + 1
    top = max(counts, key=lambda c: counts[c])
    if counts[top] * 2 > len(votes.votes):
        return top
    return NEEDS_REVIEW


def resolve_priority(present_classes: set[str], catalog: ClassCatalog) -> str:
    """Collapse a set of present classes to the highest-priority one."""
    if not present_classes:
        raise MarstagError("EMPTY_CLASS_SET", "no classes to resolve")
    order = {c: i for i, c in enumerate(catalog.priority_order)}
    missing = [c for c in present_classes if c not in order]
    if missing:
        raise MarstagError(
            "CLASS_NOT_IN_PRIORITY_ORDER",
            f"classes missing from priority order: {sorted(missing)}",
        )
    return min(present_classes, key=lambda c: order[c])


def split_grouped(
    records: list[SampleRecord],
    group_key: GroupKey,
    fractions: tuple[float, float, float],
    seed: int,
) -> SplitAssignment:
    """Assign whole groups to train/val/test, chasing the target fractions.

    Groups are shuffled with the seed, then each group goes to the split with
    the largest remaining sample deficit. Realized fractions land within
    (largest group size / n) of the targets; group disjointness is exact.
    """
    if not records:
        raise MarstagError("EMPTY_DATASET", "no records to split")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise MarstagError(
            "BAD_FRACTIONS", f"fractions must be nonnegative and sum to 1: {fractions}"
        )
    groups: dict[str, list[str]] = {}
    for r in records:
        gv = r.group_value(group_key)
        if not gv:
            raise MarstagError(
                "MISSING_GROUP_KEY", f"record {r.sample_id!r} lacks {group_key.value}"
            )
        groups.setdefault(gv, []).append(r.sample_id)

    rng = np.random.default_rng(seed)
    order = rng.permutation(sorted(groups))
    n = len(records)
    splits = (Split.TRAIN, Split.VAL, Split.TEST)
    targets = [f * n for f in fractions]
    assigned = [0.0, 0.0, 0.0]
    assignment: dict[str, Split] = {}
    for gv in order:
        deficits = [targets[i] - assigned[i] for i in range(3)]
        dest = max(range(3), key=lambda i: (deficits[i], -i))
        for sid in groups[gv]:
            assignment[sid] = splits[dest]
        assigned[dest] += len(groups[gv])
    return SplitAssignment(assignment, tuple(fractions), group_key)


def split_by_sol_bounds(
    records: list[SampleRecord], train_max_sol: int, val_max_sol: int
) -> SplitAssignment:
    """Contiguous mission-day split: sols up to ``train_max_sol`` train, up to
    ``val_max_sol`` validate, later sols test."""
    if not records:
        raise MarstagError("EMPTY_DATASET", "no records to split")
    assignment: dict[str, Split] = {}
    for r in records:
        if r.sol is None:
            raise MarstagError("MISSING_GROUP_KEY", f"record {r.sample_id!r} lacks sol")
        if r.sol <= train_max_sol:
            assignment[r.sample_id] = Split.TRAIN
        elif r.sol <= val_max_sol:
            assignment[r.sample_id] = Split.VAL
        else:
            assignment[r.sample_id] = Split.TEST
    counts = [
        sum(1 for s in assignment.values() if s is sp)
        for sp in (Split.TRAIN, Split.VAL, Split.TEST)
    ]
    n = len(records)
    return SplitAssignment(assignment, tuple(c / n for c in counts), GroupKey.SOL_RANGE)


def save_splits(path, assignment: SplitAssignment) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "split"])
        for sid in assignment.assignment:
            w.writerow([sid, assignment.assignment[sid].value])


def load_splits(path) -> dict[str, Split]:
    out: dict[str, Split] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[row["sample_id"]] = Split(row["split"])
    return out


@dataclass(frozen=True)
class DistributionRow:
    class_id: str
    count: int
    percent: float


def class_distribution(
    records: list[SampleRecord], catalog: ClassCatalog
) -> list[DistributionRow]:
    """Per-class counts and percent-of-dataset.

    A record contributes its single label, or each of its multi-labels, so
    for multi-label datasets the percents may total more than 100.
    """
    counts = {c: 0 for c in catalog.ids()}
    for r in records:
        labels = {r.single_label} if r.single_label else set(r.multi_labels)
        for c in labels:
            if c in counts:
                counts[c] += 1
    n = len(records)
    return [
        DistributionRow(c, counts[c], (counts[c] / n * 100.0) if n else 0.0)
        for c in catalog.ids()
    ]


def upsample_second_campaign(
    records: list[SampleRecord],
    factor_map: dict[Campaign, int],
    splits: dict[str, Split] | None = None,
) -> list[SampleRecord]:
    """Duplicate records per campaign factor ahead of augmentation.

    Only TRAIN/VAL records are duplicated (evaluation sets stay untouched);
    copies get a ``__upN`` suffix so sample ids remain unique.
    """
    out: list[SampleRecord] = []
    for r in records:
        out.append(r)
        factor = factor_map.get(r.campaign, 1)
        if factor <= 1:
            continue
        if splits is not None:
            split = splits.get(r.sample_id)
            if split is Split.TEST or split is None:
                continue
        for k in range(1, factor):
            dup = SampleRecord(**{**r.__dict__, "sample_id": f"{r.sample_id}__up{k}"})
            out.append(dup)
    return out
