import random

import pytest

from conftest import entity, make_alignment, predicate
from factlink.errors import (
    DanglingFactError,
    DuplicateIdError,
    MalformedRecordError,
    ReservedTokenError,
    UnknownIdError,
)
from factlink.io import write_jsonl
from factlink.kg import (
    EntryKind,
    KgFact,
    build_store,
    entry_frequencies,
    entry_text,
    filter_by_frequency,
    load_kg,
    lookup_surface,
    restrict_to_benchmark,
)


def write_kg_files(tmp_path, entries, facts):
    entries_path = tmp_path / "entries.jsonl"
    facts_path = tmp_path / "facts.jsonl"
    write_jsonl(entries_path, entries)
    write_jsonl(facts_path, facts)
    return entries_path, facts_path


JORDAN_ENTRY = {
    "id": "Q41421",
    "kind": "entity",
    "label": "Michael Jordan",
    "description": "American basketball player and businessman",
    "aliases": ["Air Jordan", "M.J.", "His Airness"],
}
TEAM_ENTRY = {"id": "Q128109", "kind": "entity", "label": "Chicago Bulls"}
PLAYS_FOR = {"id": "P54", "kind": "predicate", "label": "member of sports team"}


class TestLoadKg:
    def test_entry_loads_and_is_retrievable(self, tmp_path):
        entries_path, facts_path = write_kg_files(
            tmp_path,
            [JORDAN_ENTRY, TEAM_ENTRY, PLAYS_FOR],
            [{"subject": "Q41421", "predicate": "P54", "object": "Q128109"}],
        )
        store = load_kg(entries_path, facts_path)
        entry = store.entry("Q41421")
        assert entry.label == "Michael Jordan"
        assert entry.kind is EntryKind.ENTITY
        assert entry.aliases == ("Air Jordan", "M.J.", "His Airness")
        assert KgFact("Q41421", "P54", "Q128109") in store.fact_set

    def test_empty_facts_stream(self, tmp_path):
        entries_path, facts_path = write_kg_files(tmp_path, [JORDAN_ENTRY], [])
        store = load_kg(entries_path, facts_path)
        assert store.facts == ()
        assert entry_frequencies(store.facts) == {}

    def test_dangling_fact_reference_names_line(self, tmp_path):
        entries_path, facts_path = write_kg_files(
            tmp_path,
            [JORDAN_ENTRY, TEAM_ENTRY, PLAYS_FOR],
            [
                {"subject": "Q41421", "predicate": "P54", "object": "Q128109"},
                {"subject": "Q41421", "predicate": "P54", "object": "Q999999"},
            ],
        )
        with pytest.raises(DanglingFactError, match="line 2.*Q999999"):
            load_kg(entries_path, facts_path)

    def test_duplicate_id_rejected(self, tmp_path):
        entries_path, facts_path = write_kg_files(tmp_path, [JORDAN_ENTRY, JORDAN_ENTRY], [])
        with pytest.raises(DuplicateIdError, match="Q41421"):
            load_kg(entries_path, facts_path)

    def test_malformed_record_names_line(self, tmp_path):
        entries_path, facts_path = write_kg_files(
            tmp_path, [TEAM_ENTRY, {"id": "X1", "kind": "entity"}], []
        )
        with pytest.raises(MalformedRecordError, match="line 2"):
            load_kg(entries_path, facts_path)

    def test_kind_must_match_fact_position(self, tmp_path):
        entries_path, facts_path = write_kg_files(
            tmp_path,
            [JORDAN_ENTRY, TEAM_ENTRY, PLAYS_FOR],
            [{"subject": "Q41421", "predicate": "Q128109", "object": "P54"}],
        )
        with pytest.raises(DanglingFactError):
            load_kg(entries_path, facts_path)


class TestEntryInvariants:
    def test_label_not_repeated_in_aliases(self):
        with pytest.raises(ValueError, match="label repeated"):
            entity("Q1", "Bulls", aliases=("Bulls",))

    def test_duplicate_alias_rejected(self):
        with pytest.raises(ValueError, match="duplicate alias"):
            entity("Q1", "Bulls", aliases=("B", "B"))

    def test_marker_token_rejected_in_label(self):
        with pytest.raises(ReservedTokenError):
            entity("Q1", "Bulls <DESC> team")


def clique_store(extra_entities=()):
    """Complete graph over six core entities (each participates in exactly
    5 facts) plus optional extras wired to a few core members."""
    core = [f"e{i}" for i in range(6)]
    entries = [entity(eid, f"Core {eid}") for eid in core]
    entries.append(predicate("P1", "linked to"))
    facts = [
        KgFact(core[i], "P1", core[j])
        for i in range(6)
        for j in range(i + 1, 6)
    ]
    for eid, degree in extra_entities:
        entries.append(entity(eid, f"Extra {eid}"))
        facts.extend(KgFact(core[i], "P1", eid) for i in range(degree))
    return build_store(entries, facts)


class TestFilterByFrequency:
    def test_below_threshold_removed(self):
        store = clique_store(extra_entities=[("y", 4)])
        filtered = filter_by_frequency(store, 5)
        assert "y" not in filtered.entries

    def test_at_threshold_retained(self):
        filtered = filter_by_frequency(clique_store(), 5)
        assert set(filtered.entries) == {"e0", "e1", "e2", "e3", "e4", "e5", "P1"}

    def test_min_count_one_keeps_fact_covered_store(self):
        store = clique_store(extra_entities=[("y", 2)])
        filtered = filter_by_frequency(store, 1)
        assert set(filtered.entries) == set(store.entries)
        assert set(filtered.facts) == set(store.facts)

    def test_cascading_removal_reaches_fixpoint(self):
        # chain: removing the tail entity orphans the only fact keeping the
        # middle entity alive, and so on.
        entries = [
            entity("a", "A"),
            entity("b", "B"),
            entity("c", "C"),
            predicate("P1", "next"),
        ]
        facts = [KgFact("a", "P1", "b"), KgFact("b", "P1", "c"), KgFact("c", "P1", "a")]
        # every entry has frequency 2, P1 has 3; min_count 3 keeps only P1's
        # count but P1 loses all facts once entities go, so the store empties
        filtered = filter_by_frequency(build_store(entries, facts), 3)
        assert filtered.entries == {}
        assert filtered.facts == ()

    def test_fixpoint_property_random_stores(self):
        rng = random.Random(7)
        for _ in range(25):
            n_entities = rng.randint(2, 12)
            entries = [entity(f"e{i}", f"Entity {i}") for i in range(n_entities)]
            entries.append(predicate("P1", "rel"))
            facts = []
            for _ in range(rng.randint(0, 25)):
                s = rng.randrange(n_entities)
                o = rng.randrange(n_entities)
                facts.append(KgFact(f"e{s}", "P1", f"e{o}"))
            store = build_store(entries, facts)
            min_count = rng.randint(1, 4)
            filtered = filter_by_frequency(store, min_count)
            counts = entry_frequencies(filtered.facts)
            assert all(counts.get(eid, 0) >= min_count for eid in filtered.entries)
            # idempotent at the fixpoint
            again = filter_by_frequency(filtered, min_count)
            assert set(again.entries) == set(filtered.entries)
            assert set(again.facts) == set(filtered.facts)


class TestRestrictToBenchmark:
    def test_exact_entry_set(self, jordan_store):
        fact = KgFact("Q41421", "P54", "Q128109")
        alignments = [make_alignment("Michael Jordan", "played for", "Chicago Bulls", fact)]
        brkg = restrict_to_benchmark(jordan_store, alignments)
        # brute-force oracle: union of fact-entry ids over the alignments
        expected = set()
        for a in alignments:
            expected.update(a.fact.ids)
        assert set(brkg.entries) == expected == {"Q41421", "P54", "Q128109"}
        assert len(brkg.entity_ids()) == 2
        assert len(brkg.predicate_ids()) == 1

    def test_empty_alignments(self, jordan_store):
        brkg = restrict_to_benchmark(jordan_store, [])
        assert brkg.entries == {}
        assert brkg.facts == ()

    def test_full_coverage_identity(self, jordan_store):
        alignments = [
            make_alignment("s", "r", "o", fact) for fact in jordan_store.facts
        ]
        brkg = restrict_to_benchmark(jordan_store, alignments)
        assert set(brkg.entries) == set(jordan_store.entries)
        assert set(brkg.facts) == set(jordan_store.facts)

    def test_unknown_id_raises(self, jordan_store):
        alignments = [make_alignment("s", "r", "o", KgFact("Q1", "P54", "Q128109"))]
        with pytest.raises(UnknownIdError, match="Q1"):
            restrict_to_benchmark(jordan_store, alignments)


class TestEntryText:
    def test_label_and_description(self, jordan_store):
        rendered = entry_text(jordan_store.entry("Q41421"))
        assert rendered == (
            "Michael Jordan <DESC> American basketball player and businessman"
        )

    def test_predicate_rendering(self, jordan_store):
        rendered = entry_text(jordan_store.entry("P19"))
        assert rendered == "place of birth <DESC> most specific known birth location"

    def test_masked(self, jordan_store):
        rendered = entry_text(jordan_store.entry("Q41421"), mask_description=True)
        assert rendered == "Michael Jordan <DESC> <mask>"

    def test_no_description(self):
        assert entry_text(entity("Q1", "Bulls")) == "Bulls"
        assert entry_text(entity("Q1", "Bulls"), mask_description=True) == "Bulls"


class TestLookupSurface:
    def test_polysemous_surface(self, jordan_store):
        assert lookup_surface(jordan_store, "Michael Jordan") == {"Q41421", "Q3308205"}

    def test_alias_lookup(self, jordan_store):
        assert lookup_surface(jordan_store, "M.J.") == {"Q41421"}
        assert lookup_surface(jordan_store, "The Bulls") == {"Q128109"}

    def test_unseen_surface(self, jordan_store):
        assert lookup_surface(jordan_store, "LeBron James") == frozenset()

    def test_label_always_resolves_to_entry(self, jordan_store):
        for eid in jordan_store.entity_ids():
            entry = jordan_store.entry(eid)
            assert eid in lookup_surface(jordan_store, entry.label)

    def test_case_folding_flag(self):
        store = build_store([entity("Q1", "Bulls")], [], case_fold=True)
        assert lookup_surface(store, "BULLS") == {"Q1"}
        strict = build_store([entity("Q1", "Bulls")], [])
        assert lookup_surface(strict, "BULLS") == frozenset()

    def test_nfc_normalization(self):
        # decomposed e + combining acute equals the precomposed form
        store = build_store([entity("Q1", "Hétu")], [])
        assert lookup_surface(store, "Hétu") == {"Q1"}


class TestStoreInvariants:
    def test_every_fact_resolves(self):
        rng = random.Random(11)
        for _ in range(20):
            n = rng.randint(1, 8)
            entries = [entity(f"e{i}", f"Entity {i}") for i in range(n)]
            entries.append(predicate("P1", "rel"))
            facts = [
                KgFact(f"e{rng.randrange(n)}", "P1", f"e{rng.randrange(n)}")
                for _ in range(rng.randint(0, 10))
            ]
            store = build_store(entries, facts)
            for fact in store.facts:
                assert fact.subject_id in store.entries
                assert fact.predicate_id in store.entries
                assert fact.object_id in store.entries

    def test_surface_index_covers_exactly_labels_and_aliases(self, jordan_store):
        expected = set()
        for eid in jordan_store.entity_ids():
            entry = jordan_store.entry(eid)
            expected.add(entry.label)
            expected.update(entry.aliases)
        assert set(jordan_store.surface_index) == expected
