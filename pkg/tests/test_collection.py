from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptmint.collection import (
    Collection,
    FrequencyTable,
    MediaType,
    NftRecord,
    PropertyKey,
    Tier,
    assign_tiers,
    build_frequency_table,
    rank_collection,
    rarity_score,
    read_records_jsonl,
    record_from_json,
    record_to_json,
    write_records_jsonl,
)
from promptmint.pipeline import synth_collection


def make_record(token_id, props, collection_id="c", **kwargs):
    keys = frozenset(PropertyKey(t, v) for t, v in props)
    defaults = dict(width=512, height=512, media_type=MediaType.IMAGE)
    defaults.update(kwargs)
    return NftRecord(collection_id, token_id, keys, **defaults)


def make_collection(prop_lists, collection_id="c"):
    records = tuple(
        make_record(f"{i:03d}", props, collection_id) for i, props in enumerate(prop_lists)
    )
    return Collection(collection_id, records)


# independent oracle: recount every property over all items, no FrequencyTable
def brute_force_scores(collection: Collection) -> dict[str, float]:
    items = list(collection)
    n = len(items)
    scores = {}
    for record in items:
        total = 0.0
        for key in record.properties:
            count = sum(1 for other in items if key in other.properties)
            total += n / count
        scores[record.token_id] = total
    return scores


def brute_force_ranking(collection: Collection) -> list[str]:
    scores = brute_force_scores(collection)
    return [tid for tid, _ in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))]


class TestPropertyKey:
    def test_strips_whitespace(self):
        key = PropertyKey("  Fur ", " Golden  ")
        assert key.trait_type == "Fur"
        assert key.value == "Golden"

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            PropertyKey("Fur", "   ")

    def test_case_sensitive_equality(self):
        assert PropertyKey("Fur", "Golden") != PropertyKey("fur", "Golden")
        assert PropertyKey("Fur", "Golden") == PropertyKey("Fur", "Golden")

    def test_token_round_trip(self):
        key = PropertyKey("Fur", "Golden:Shiny")
        assert PropertyKey.from_token(key.token()) == key


class TestFrequencyTable:
    def test_single_key_on_one_of_four(self):
        collection = make_collection([[("A", "x"), ("B", "y")]] + [[("B", "y")]] * 3)
        table = build_frequency_table(collection)
        assert table.frequency(PropertyKey("A", "x")) == 0.25

    def test_universal_property(self):
        collection = make_collection([[("B", "y")]] * 4)
        table = build_frequency_table(collection)
        assert table.frequency(PropertyKey("B", "y")) == 1.0

    def test_empty_collection_rejected(self):
        with pytest.raises(ValueError, match="empty collection"):
            build_frequency_table(Collection("c", ()))

    def test_counts_match_brute_force_recount(self):
        collection = synth_collection(50, 4, 5, zipf_skew=1.0, seed=11)
        table = build_frequency_table(collection)
        for key, count in table.counts.items():
            recount = sum(1 for r in collection if key in r.properties)
            assert count == recount
        all_keys = {k for r in collection for k in r.properties}
        assert set(table.counts) == all_keys


class TestRarityScore:
    def test_quarter_and_half_frequencies_sum_to_six(self):
        # brute-force check first: A:x on 1 of 4 (eta .25), B:y on 2 of 4 (eta .5)
        collection = make_collection(
            [
                [("A", "x"), ("B", "y")],
                [("B", "y")],
                [("C", "z")],
                [("C", "z")],
            ]
        )
        table = build_frequency_table(collection)
        assert brute_force_scores(collection)["000"] == pytest.approx(6.0)
        assert rarity_score(collection.records[0], table) == pytest.approx(6.0)

    def test_universal_property_scores_one(self):
        collection = make_collection([[("B", "y")]] * 4)
        table = build_frequency_table(collection)
        assert rarity_score(collection.records[0], table) == 1.0

    def test_unique_property_scores_n(self):
        n = 7
        prop_lists = [[("U", "only")]] + [[("B", "y")]] * (n - 1)
        collection = make_collection(prop_lists)
        table = build_frequency_table(collection)
        assert rarity_score(collection.records[0], table) == pytest.approx(n)

    def test_unknown_property_rejected(self):
        collection = make_collection([[("A", "x")]] * 2)
        table = build_frequency_table(collection)
        stranger = make_record("zzz", [("Q", "new")])
        with pytest.raises(KeyError, match="unknown property"):
            rarity_score(stranger, table)

    def test_zero_property_record_scores_zero(self):
        record = make_record("000", [])
        table = FrequencyTable({PropertyKey("A", "x"): 1}, 1)
        assert rarity_score(record, table) == 0.0


class TestRanking:
    def test_ties_break_by_token_id(self):
        # scores 9, 5, 5: two tied items must order by ascending token_id
        collection = make_collection(
            [
                [("A", "rare"), ("B", "x")],
                [("B", "x"), ("C", "y")],
                [("B", "x"), ("C", "y")],
            ]
        )
        report = rank_collection(collection)
        assert [row.token_id for row in report.rows] == ["000", "001", "002"]
        assert report.rows[1].rarity == report.rows[2].rarity

    def test_single_item(self):
        report = rank_collection(make_collection([[("A", "x")]]))
        assert report.rows[0].rank == 1
        assert report.rows[0].percentile == 1.0
        assert report.rows[0].tier is Tier.HIGH

    def test_hundred_item_ranking_matches_sort_oracle(self):
        collection = synth_collection(100, 5, 6, zipf_skew=1.2, seed=3)
        report = rank_collection(collection)
        assert [row.token_id for row in report.rows] == brute_force_ranking(collection)

    def test_zero_property_records_rank_last(self):
        collection = make_collection([[("A", "x")], [], [("A", "x"), ("B", "y")]])
        report = rank_collection(collection)
        assert report.rows[-1].token_id == "001"
        assert report.rows[-1].rarity == 0.0


class TestTiers:
    def test_thousand_items_split_50_550_400(self):
        collection = synth_collection(1000, 6, 8, zipf_skew=1.0, seed=5)
        counts = rank_collection(collection).tier_counts()
        assert counts[Tier.HIGH] == 50
        assert counts[Tier.MEDIUM] == 550
        assert counts[Tier.LOW] == 400

    def test_single_item_is_high(self):
        report = rank_collection(make_collection([[("A", "x")]]))
        assert report.tier_counts()[Tier.HIGH] == 1

    def test_twenty_items_ceiling_arithmetic(self):
        # ceil(0.05 * 20) = 1 High, ceil(0.60 * 20) = 12 -> 11 Medium, 8 Low
        collection = synth_collection(20, 4, 5, zipf_skew=1.0, seed=9)
        counts = rank_collection(collection).tier_counts()
        assert counts == {Tier.HIGH: 1, Tier.MEDIUM: 11, Tier.LOW: 8}

    def test_invalid_cut_ordering_rejected(self):
        report = rank_collection(make_collection([[("A", "x")]] * 3))
        with pytest.raises(ValueError):
            assign_tiers(report, high_cut=0.7, med_cut=0.6)

    def test_reassignment_with_custom_cuts(self):
        collection = synth_collection(10, 3, 4, zipf_skew=1.0, seed=2)
        report = rank_collection(collection)
        relaxed = assign_tiers(report, high_cut=0.3, med_cut=0.8)
        assert relaxed.tier_counts()[Tier.HIGH] == 3


# --- property-based invariants ------------------------------------------------

@st.composite
def property_matrices(draw):
    n_items = draw(st.integers(1, 50))
    n_traits = draw(st.integers(1, 8))
    n_values = draw(st.integers(1, 5))
    matrix = [
        [draw(st.integers(0, n_values - 1)) for _ in range(n_traits)]
        for _ in range(n_items)
    ]
    return matrix


def collection_from_matrix(matrix) -> Collection:
    prop_lists = [
        [(f"t{t}", f"v{v}") for t, v in enumerate(row)] for row in matrix
    ]
    return make_collection(prop_lists)


@given(property_matrices())
@settings(max_examples=60, deadline=None)
def test_rarity_at_least_property_count(matrix):
    collection = collection_from_matrix(matrix)
    table = build_frequency_table(collection)
    for record in collection:
        assert rarity_score(record, table) >= len(record.properties) - 1e-12


@given(property_matrices())
@settings(max_examples=40, deadline=None)
def test_scores_match_brute_force_oracle(matrix):
    collection = collection_from_matrix(matrix)
    table = build_frequency_table(collection)
    oracle = brute_force_scores(collection)
    for record in collection:
        assert rarity_score(record, table) == pytest.approx(oracle[record.token_id], abs=1e-9)


@given(property_matrices())
@settings(max_examples=40, deadline=None)
def test_tier_partition_sizes(matrix):
    collection = collection_from_matrix(matrix)
    report = rank_collection(collection)
    counts = report.tier_counts()
    n = len(collection)
    assert sum(counts.values()) == n
    assert counts[Tier.HIGH] == math.ceil(0.05 * n)
    assert counts[Tier.HIGH] + counts[Tier.MEDIUM] == math.ceil(0.60 * n)


@given(st.data())
@settings(max_examples=40, deadline=None)
def test_rarer_replacement_strictly_increases_score(data):
    matrix = data.draw(property_matrices())
    collection = collection_from_matrix(matrix)
    table = build_frequency_table(collection)
    record = collection.records[data.draw(st.integers(0, len(collection) - 1))]
    # find a (held, candidate) pair where the candidate is strictly rarer
    for held in record.sorted_properties():
        rarer = [
            key
            for key in table.counts
            if key.trait_type == held.trait_type
            and key not in record.properties
            and table.counts[key] < table.counts[held]
        ]
        if rarer:
            swapped = NftRecord(
                record.collection_id,
                record.token_id,
                (record.properties - {held}) | {rarer[0]},
                record.width,
                record.height,
            )
            assert rarity_score(swapped, table) > rarity_score(record, table)
            return


@given(property_matrices(), st.randoms())
@settings(max_examples=30, deadline=None)
def test_property_order_never_changes_results(matrix, rng):
    collection = collection_from_matrix(matrix)
    shuffled_lists = []
    for row in matrix:
        pairs = [(f"t{t}", f"v{v}") for t, v in enumerate(row)]
        rng.shuffle(pairs)
        shuffled_lists.append(pairs)
    shuffled = make_collection(shuffled_lists)
    report_a = rank_collection(collection)
    report_b = rank_collection(shuffled)
    for row_a, row_b in zip(report_a.rows, report_b.rows):
        assert row_a.token_id == row_b.token_id
        assert row_a.rarity == row_b.rarity
        assert row_a.tier == row_b.tier


# --- serialization -------------------------------------------------------------

class TestSerialization:
    def test_round_trip(self, tmp_path):
        collection = synth_collection(25, 3, 4, zipf_skew=0.7, seed=17)
        path = tmp_path / "records.jsonl"
        write_records_jsonl(collection.records, path)
        loaded = read_records_jsonl(path)
        assert loaded == list(collection.records)

    def test_record_json_fields(self):
        record = make_record("007", [("A", "x")], last_price_eth=1.5)
        obj = record_to_json(record)
        assert set(obj) == {
            "collection_id", "token_id", "properties", "width",
            "height", "media_type", "last_price_eth",
        }
        assert record_from_json(obj) == record

    def test_missing_token_id_reported(self):
        with pytest.raises(ValueError, match="missing token_id"):
            record_from_json({"collection_id": "c", "width": 1, "height": 1})
