import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from marstag.catalogs import ClassCatalog, ClassDef
from marstag.datasets import (
    Campaign,
    GroupKey,
    Instrument,
    SampleRecord,
    Split,
    VoteSet,
    class_distribution,
    load_manifest,
    load_splits,
    merge_votes,
    resolve_priority,
    save_splits,
    split_by_sol_bounds,
    split_grouped,
    upsample_second_campaign,
)
from marstag.errors import MarstagError

HEADER = (
    "sample_id,image_ref,instrument,source_image_id,sol,site_id,"
    "single_label,multi_labels,campaign,lat0,lon0,dlat,dlon\n"
)


def write_manifest(path, rows):
    path.write_text(HEADER + "".join(rows), encoding="utf-8")
    return path


def make_records(groups, per_group, group_key=GroupKey.SOURCE_IMAGE):
    records = []
    for g in range(groups):
        for i in range(per_group):
            records.append(
                SampleRecord(
                    sample_id=f"g{g}i{i}",
                    image_ref="x.png",
                    instrument=Instrument.HIRISE,
                    source_image_id=f"src{g}",
                    sol=g,
                    site_id=f"site{g}",
                    single_label="crater",
                )
            )
    return records


class TestLoadManifest:
    def test_header_only_gives_empty_list(self, tmp_path, hirise):
        path = write_manifest(tmp_path / "m.csv", [])
        assert load_manifest(path, hirise) == []

    def test_three_rows_preserved_in_order(self, tmp_path, hirise):
        rows = [
            "a,1.png,HIRISE,s1,5,t1,crater,,PRIMARY,,,,\n",
            "b,2.png,HIRISE,s1,5,t1,spider,,PRIMARY,-70.5,10.0,-0.001,0.001\n",
            "c,3.png,HIRISE,s2,6,t2,,crater;spider,SECOND_CAMPAIGN,,,,\n",
        ]
        recs = load_manifest(write_manifest(tmp_path / "m.csv", rows), hirise)
        assert [r.sample_id for r in recs] == ["a", "b", "c"]
        assert recs[0].single_label == "crater"
        assert recs[1].georef.lat0 == -70.5
        assert recs[2].multi_labels == {"crater", "spider"}
        assert recs[2].campaign is Campaign.SECOND_CAMPAIGN

    def test_display_names_resolve_to_ids(self, tmp_path, hirise):
        rows = ["a,1.png,HIRISE,s1,5,t1,Swiss cheese,,PRIMARY,,,,\n"]
        recs = load_manifest(write_manifest(tmp_path / "m.csv", rows), hirise)
        assert recs[0].single_label == "swiss_cheese"

    def test_unknown_class_rejected(self, tmp_path, hirise):
        rows = ["a,1.png,HIRISE,s1,5,t1,Volcano,,PRIMARY,,,,\n"]
        with pytest.raises(MarstagError) as err:
            load_manifest(write_manifest(tmp_path / "m.csv", rows), hirise)
        assert err.value.code == "UNKNOWN_CLASS"

    def test_duplicate_sample_id_rejected(self, tmp_path, hirise):
        rows = [
            "a,1.png,HIRISE,s1,5,t1,crater,,PRIMARY,,,,\n",
            "a,2.png,HIRISE,s1,5,t1,crater,,PRIMARY,,,,\n",
        ]
        with pytest.raises(MarstagError) as err:
            load_manifest(write_manifest(tmp_path / "m.csv", rows), hirise)
        assert err.value.code == "DUPLICATE_SAMPLE_ID"

    def test_malformed_row_reports_line(self, tmp_path, hirise):
        rows = ["a,1.png,HIRISE,s1,not_a_sol,t1,crater,,PRIMARY,,,,\n"]
        with pytest.raises(MarstagError) as err:
            load_manifest(write_manifest(tmp_path / "m.csv", rows), hirise)
        assert err.value.code == "MALFORMED_ROW"
        assert "line 2" in str(err.value)


class TestMergeVotes:
    def test_unanimous(self):
        assert merge_votes(VoteSet("s", ("crater",) * 3)) == "crater"

    def test_two_of_three_majority(self):
        assert merge_votes(VoteSet("s", ("crater", "crater", "other"))) == "crater"

    def test_three_way_disagreement_needs_review(self):
        assert merge_votes(VoteSet("s", ("crater", "spider", "other"))) is None

    def test_even_tie_needs_review(self):
        assert merge_votes(VoteSet("s", ("crater", "other"))) is None

    @given(st.lists(st.sampled_from(["a", "b", "c"]), min_size=1, max_size=9))
    def test_resolved_implies_strict_majority(self, votes):
        outcome = merge_votes(VoteSet("s", tuple(votes)))
        if outcome is not None:
            assert votes.count(outcome) * 2 > len(votes)


class TestResolvePriority:
    def test_singleton(self, hirise):
        assert resolve_priority({"crater"}, hirise) == "crater"

    def test_slope_streak_beats_crater(self, hirise):
        assert resolve_priority({"crater", "slope_streak"}, hirise) == "slope_streak"

    def test_earliest_of_three(self, hirise):
        got = resolve_priority({"other", "swiss_cheese", "dark_dune"}, hirise)
        assert got == "dark_dune"

    def test_full_priority_order(self, hirise):
        assert hirise.priority_order == (
            "impact_ejecta",
            "slope_streak",
            "spider",
            "dark_dune",
            "bright_dune",
            "swiss_cheese",
            "crater",
            "other",
        )

    @given(st.sets(st.sampled_from(["crater", "spider", "other", "dark_dune"]), min_size=1))
    def test_input_order_irrelevant(self, hirise, classes):
        expected = resolve_priority(set(classes), hirise)
        assert resolve_priority(set(reversed(sorted(classes))), hirise) == expected

    def test_class_outside_priority_order(self):
        catalog = ClassCatalog(
            (ClassDef("a", "A"), ClassDef("b", "B")), priority_order=("a",)
        )
        with pytest.raises(MarstagError) as err:
            resolve_priority({"b"}, catalog)
        assert err.value.code == "CLASS_NOT_IN_PRIORITY_ORDER"


class TestSplitGrouped:
    def test_degenerate_fractions_all_train(self):
        records = make_records(4, 3)
        asg = split_grouped(records, GroupKey.SOURCE_IMAGE, (1.0, 0.0, 0.0), seed=0)
        assert all(v is Split.TRAIN for v in asg.assignment.values())

    def test_ten_by_ten_fixture(self):
        records = make_records(10, 10)
        asg = split_grouped(records, GroupKey.SOURCE_IMAGE, (0.6, 0.15, 0.25), seed=7)
        sizes = {s: len(asg.members(s)) for s in Split}
        assert sizes[Split.TRAIN] == 60
        assert sizes[Split.VAL] in (10, 20)
        assert sizes[Split.TEST] in (20, 30)
        assert sum(sizes.values()) == 100
        for g in range(10):
            assigned = {asg.assignment[f"g{g}i{i}"] for i in range(10)}
            assert len(assigned) == 1

    def test_group_disjoint_across_seeds(self):
        records = make_records(7, 5)
        for seed in range(100):
            asg = split_grouped(records, GroupKey.SOURCE_IMAGE, (0.6, 0.15, 0.25), seed)
            for g in range(7):
                assert len({asg.assignment[f"g{g}i{i}"] for i in range(5)}) == 1

    def test_deterministic(self):
        records = make_records(9, 4)
        a = split_grouped(records, GroupKey.SOURCE_IMAGE, (0.5, 0.25, 0.25), seed=3)
        b = split_grouped(records, GroupKey.SOURCE_IMAGE, (0.5, 0.25, 0.25), seed=3)
        assert a.assignment == b.assignment

    @given(
        st.lists(st.integers(min_value=1, max_value=12), min_size=2, max_size=20),
        st.integers(min_value=0, max_value=10_000),
    )
    def test_fraction_tolerance(self, group_sizes, seed):
        records = []
        for g, size in enumerate(group_sizes):
            for i in range(size):
                records.append(
                    SampleRecord(
                        sample_id=f"g{g}i{i}",
                        image_ref="x.png",
                        instrument=Instrument.HIRISE,
                        source_image_id=f"src{g}",
                    )
                )
        fractions = (0.6, 0.15, 0.25)
        asg = split_grouped(records, GroupKey.SOURCE_IMAGE, fractions, seed)
        n = len(records)
        slack = max(group_sizes) / n
        for frac, split in zip(fractions, Split):
            realized = len(asg.members(split)) / n
            assert abs(realized - frac) <= slack + 1e-12

    def test_missing_group_key(self):
        rec = SampleRecord("a", "x.png", Instrument.HIRISE, source_image_id="")
        with pytest.raises(MarstagError) as err:
            split_grouped([rec], GroupKey.SOURCE_IMAGE, (1.0, 0.0, 0.0), 0)
        assert err.value.code == "MISSING_GROUP_KEY"

    def test_empty_dataset(self):
        with pytest.raises(MarstagError) as err:
            split_grouped([], GroupKey.SOURCE_IMAGE, (1.0, 0.0, 0.0), 0)
        assert err.value.code == "EMPTY_DATASET"

    def test_roundtrip_csv(self, tmp_path):
        records = make_records(4, 2)
        asg = split_grouped(records, GroupKey.SOURCE_IMAGE, (0.5, 0.25, 0.25), seed=1)
        save_splits(tmp_path / "s.csv", asg)
        assert load_splits(tmp_path / "s.csv") == asg.assignment


class TestSolBounds:
    def test_mission_day_boundaries(self):
        records = []
        for sol in (1, 500, 948, 949, 1500, 1920, 1921, 2224):
            records.append(
                SampleRecord(
                    sample_id=f"sol{sol}",
                    image_ref="x.png",
                    instrument=Instrument.MAHLI,
                    sol=sol,
                )
            )
        asg = split_by_sol_bounds(records, train_max_sol=948, val_max_sol=1920)
        assert asg.assignment["sol1"] is Split.TRAIN
        assert asg.assignment["sol948"] is Split.TRAIN
        assert asg.assignment["sol949"] is Split.VAL
        assert asg.assignment["sol1920"] is Split.VAL
        assert asg.assignment["sol1921"] is Split.TEST
        assert asg.assignment["sol2224"] is Split.TEST


class TestClassDistribution:
    def test_soil_share(self, mer):
        records = []
        for i in range(3004):
            labels = {"soil"} if i < 2891 else {"sky"}
            records.append(
                SampleRecord(
                    sample_id=f"r{i}",
                    image_ref="x.png",
                    instrument=Instrument.PANCAM_L,
                    site_id="s",
                    multi_labels=frozenset(labels),
                )
            )
        rows = {r.class_id: r for r in class_distribution(records, mer)}
        assert rows["soil"].count == 2891
        assert round(rows["soil"].percent, 2) == 96.24

    def test_empty_class_zero(self, hirise):
        records = make_records(2, 2)
        rows = {r.class_id: r for r in class_distribution(records, hirise)}
        assert rows["spider"].count == 0
        assert rows["spider"].percent == 0.0

    def test_multilabel_percents_exceed_100(self, mer):
        records = [
            SampleRecord(
                sample_id=f"r{i}",
                image_ref="x.png",
                instrument=Instrument.PANCAM_L,
                site_id="s",
                multi_labels=frozenset({"soil", "sky"}),
            )
            for i in range(2)
        ]
        rows = {r.class_id: r for r in class_distribution(records, mer)}
        assert rows["soil"].percent == 100.0
        assert rows["sky"].percent == 100.0


class TestUpsample:
    def test_second_campaign_doubles_in_train(self):
        records = make_records(2, 2)
        records[0].campaign = Campaign.SECOND_CAMPAIGN
        splits = {r.sample_id: Split.TRAIN for r in records}
        splits[records[2].sample_id] = Split.TEST
        out = upsample_second_campaign(records, {Campaign.SECOND_CAMPAIGN: 2}, splits)
        ids = [r.sample_id for r in out]
        assert ids.count("g0i0") == 1 and "g0i0__up1" in ids
        assert len(out) == len(records) + 1

    def test_test_split_untouched(self):
        records = make_records(1, 1)
        records[0].campaign = Campaign.SECOND_CAMPAIGN
        out = upsample_second_campaign(
            records, {Campaign.SECOND_CAMPAIGN: 2}, {records[0].sample_id: Split.TEST}
        )
        assert len(out) == 1
