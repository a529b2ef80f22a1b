"""Class catalogs: the label vocabulary of a dataset plus its priority order.

A catalog lists classes as (class_id, display name, category group). The
priority order is used to collapse multi-class annotations into a single
label: the class appearing earliest in the order wins.

Built-in catalogs cover the three missions this pipeline targets; custom
catalogs load from CSV (columns: class_id, class_name, category_group,
priority rank given by file order).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .errors import MarstagError


@dataclass(frozen=True)
class ClassDef:
    class_id: str
    name: str
    group: str = ""


@dataclass(frozen=True)
class ClassCatalog:
    classes: tuple[ClassDef, ...]
    priority_order: tuple[str, ...] = ()
    _by_id: dict = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise MarstagError("DUPLICATE_CLASS", "class ids must be unique")
        unknown = [c for c in self.priority_order if c not in set(ids)]
        if unknown:
            raise MarstagError(
                "UNKNOWN_CLASS", f"priority order names unknown classes: {unknown}"
            )
        lookup = {c.class_id: c for c in self.classes}
        lookup.update({c.name: c for c in self.classes})
        object.__setattr__(self, "_by_id", lookup)

    def ids(self) -> list[str]:
        return [c.class_id for c in self.classes]

    def __contains__(self, class_id: str) -> bool:
        return any(c.class_id == class_id for c in self.classes)

    def index(self, class_id: str) -> int:
        for i, c in enumerate(self.classes):
            if c.class_id == class_id:
                return i
        raise MarstagError("UNKNOWN_CLASS", f"class {class_id!r} not in catalog")

    def resolve(self, label: str) -> str:
        """Map a class id or display name to the canonical class id."""
        hit = self._by_id.get(label)
        if hit is None:
            raise MarstagError("UNKNOWN_CLASS", f"unknown class {label!r}")
        return hit.class_id

    def group_of(self, class_id: str) -> str:
        return self.classes[self.index(class_id)].group

    def chain_order(self, category_order: list[str] | None = None) -> list[str]:
        """Class ids ordered by category group, alphabetical within a group.

        Groups missing from ``category_order`` are appended afterwards in
        their catalog order.
        """
        groups_seen: list[str] = []
        for c in self.classes:
            if c.group not in groups_seen:
                groups_seen.append(c.group)
        if category_order is None:
            category_order = groups_seen
        else:
            category_order = list(category_order) + [
                g for g in groups_seen if g not in category_order
            ]
        out: list[str] = []
        for grp in category_order:
            members = sorted(c.class_id for c in self.classes if c.group == grp)
            out.extend(members)
        return out


def load_catalog_csv(path) -> ClassCatalog:
    """Load a catalog from CSV; priority order is the file row order."""
    classes = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            classes.append(
                ClassDef(
                    class_id=row["class_id"].strip(),
                    name=row.get("class_name", row["class_id"]).strip(),
                    group=row.get("category_group", "").strip(),
                )
            )
    return ClassCatalog(tuple(classes), tuple(c.class_id for c in classes))


def hirise_catalog() -> ClassCatalog:
    """Eight orbital landmark classes, listed alphabetically.

    The priority order collapses multi-class annotations: rarer, more
    scientifically specific classes outrank the common ones, with the
    catch-all "other" last.
    """
    names = [
        ("bright_dune", "Bright dune"),
        ("crater", "Crater"),
        ("dark_dune", "Dark dune"),
        ("impact_ejecta", "Impact ejecta"),
        ("other", "Other"),
        ("slope_streak", "Slope streak"),
        ("spider", "Spider"),
        ("swiss_cheese", "Swiss cheese"),
    ]
    priority = (
        "impact_ejecta",
        "slope_streak",
        "spider",
        "dark_dune",
        "bright_dune",
        "swiss_cheese",
        "crater",
        "other",
    )
    return ClassCatalog(
        tuple(ClassDef(i, n, "orbital") for i, n in names), priority
    )


def msl_v2_catalog() -> ClassCatalog:
    """Nineteen surface classes of scientific and engineering interest."""
    rows = [
        ("arm_cover", "Arm cover", "rover part"),
        ("artifact", "Artifact", "quality"),
        ("close_up_rock", "Close-up rock", "surface"),
        ("distant_landscape", "Distant landscape", "surface"),
        ("drill_hole", "Drill hole", "rover feature"),
        ("drt", "DRT", "rover part"),
        ("drt_spot", "DRT spot", "rover feature"),
        ("float_rock", "Float rock", "surface"),
        ("layered_rock", "Layered rock", "surface"),
        ("light_toned_veins", "Light-toned veins", "surface"),
        ("mastcam_cal_target", "Mastcam calibration target", "rover part"),
        ("nearby_surface", "Nearby surface", "surface"),
        ("night_sky", "Night sky", "sky"),
        ("other_rover_part", "Other rover part", "rover part"),
        ("sand", "Sand", "surface"),
        ("sun", "Sun", "sky"),
        ("wheel", "Wheel", "rover part"),
        ("wheel_joint", "Wheel joint", "rover part"),
        ("wheel_tracks", "Wheel tracks", "rover feature"),
    ]
    classes = tuple(ClassDef(*r) for r in rows)
    return ClassCatalog(classes, tuple(c.class_id for c in classes))


def msl_v1_catalog() -> ClassCatalog:
    """Seventeen fine-grained rover hardware classes (the older head).

    Dispatched to when the newer head predicts "other_rover_part"; its ids
    are disjoint from the newer catalog's so the combined output vocabulary
    is well defined.
    """
    ids = [
        "apxs",
        "apxs_cal_target",
        "chemcam_cal_target",
        "chemin_inlet",
        "drill",
        "drill_holes",
        "drt_front",
        "drt_side",
        "ground",
        "horizon",
        "inlet",
        "mahli_cal_target",
        "mastcam",
        "observation_tray",
        "portion_box",
        "portion_tube",
        "scoop",
    ]
    classes = tuple(
        ClassDef(i, i.replace("_", " ").capitalize(), "rover part") for i in ids
    )
    return ClassCatalog(classes, tuple(ids))


def mer_catalog() -> ClassCatalog:
    """Twenty-four multi-label surface classes in five category groups."""
    rows = [
        ("rover_deck", "Rover deck", "rover hardware"),
        ("pancam_cal_target", "Pancam cal. target", "rover hardware"),
        ("rover_arm", "Rover arm", "rover hardware"),
        ("other_hardware", "Other hardware", "rover hardware"),
        ("rover_tracks", "Rover tracks", "artificial geology"),
        ("soil_trench", "Soil trench", "artificial geology"),
        ("rat_brushed_target", "RAT brushed target", "artificial geology"),
        ("rat_hole", "RAT hole", "artificial geology"),
        ("outcrop_rock", "Outcrop rock", "natural geology"),
        ("float_rock", "Float rock", "natural geology"),
        ("clasts", "Clasts", "natural geology"),
        ("bright_soil", "Bright soil", "natural geology"),
        ("dunes_ripples", "Dunes/ripples", "natural geology"),
        ("rock_linear_features", "Rock (linear features)", "natural geology"),
        ("rock_rounded_features", "Rock (rounded features)", "natural geology"),
        ("soil", "Soil", "natural geology"),
        ("spherules", "Spherules", "natural geology"),
        ("distant_vista", "Distant vista", "image type"),
        ("sky", "Sky", "image type"),
        ("close_up_rock", "Close-up rock", "image type"),
        ("nearby_surface", "Nearby surface", "image type"),
        ("rover_parts", "Rover parts", "image type"),
        ("astronomy", "Astronomy", "miscellaneous"),
        ("artifacts", "Artifacts", "miscellaneous"),
    ]
    classes = tuple(ClassDef(*r) for r in rows)
    return ClassCatalog(classes, tuple(c.class_id for c in classes))


# Category ordering used when a chained multi-label head is assembled for the
# MER-style catalog: general image content first, fine-grained geology last.
MER_CHAIN_CATEGORY_ORDER = [
    "image type",
    "rover hardware",
    "artificial geology",
    "natural geology",
    "miscellaneous",
]
