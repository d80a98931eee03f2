import itertools

import pytest

from conftest import entity, make_alignment, predicate
from factlink.corpus import (
    Alignment,
    OieTriple,
    SentenceFactPair,
    align,
    alignment_from_record,
    alignment_record,
    augment_aliases,
    oie_text,
    oie_uid,
    read_alignments,
    read_oie_file,
    read_pairs_file,
    remove_leakage,
    write_alignments,
)
from factlink.errors import MissingContextError, ReservedTokenError, UnknownIdError
from factlink.io import write_jsonl
from factlink.kg import KgFact, build_store


def triple(s, r, o, sentence=None):
    return OieTriple(subject=s, relation=r, object=o, sentence=sentence)


PLAYED_FOR_FACT = KgFact("Q41421", "P54", "Q128109")


class TestAlign:
    def test_exact_label_match_aligns(self, jordan_store):
        oies = {
            "s1": [triple("Michael Jordan", "played for", "Chicago Bulls")],
        }
        pairs = [
            SentenceFactPair(
                sentence_id="s1",
                sentence="Michael Jordan played for Chicago Bulls.",
                fact=PLAYED_FOR_FACT,
            )
        ]
        result = align(oies, pairs, jordan_store)
        assert len(result) == 1
        assert result[0].fact == PLAYED_FOR_FACT
        assert result[0].oie.subject == "Michael Jordan"
        assert result[0].augmented is False
        # provenance sentence attached from the pair
        assert result[0].oie.sentence == "Michael Jordan played for Chicago Bulls."

    def test_relation_text_is_not_checked(self, jordan_store):
        # only subject/object text matters; a nonsense relation still aligns
        # (the documented precision limit of distant supervision)
        oies = {"s1": [triple("Michael Jordan", "April in", "Brooklyn")]}
        pairs = [
            SentenceFactPair(
                sentence_id="s1",
                sentence="Michael Jordan (born in Brooklyn) ...",
                fact=KgFact("Q41421", "P19", "Q18419"),
            )
        ]
        result = align(oies, pairs, jordan_store)
        assert len(result) == 1

    def test_near_match_fails(self, jordan_store):
        oies = {"s1": [triple("M. Jordan", "played for", "Chicago Bulls")]}
        pairs = [
            SentenceFactPair(sentence_id="s1", sentence="...", fact=PLAYED_FOR_FACT)
        ]
        assert align(oies, pairs, jordan_store) == []

    def test_gold_mention_takes_priority_over_label(self, jordan_store):
        oies = {"s1": [triple("M.J.", "played for", "the Bulls")]}
        pairs = [
            SentenceFactPair(
                sentence_id="s1",
                sentence="M.J. played for the Bulls.",
                fact=PLAYED_FOR_FACT,
                subject_surface="M.J.",
                object_surface="the Bulls",
            )
        ]
        assert len(align(oies, pairs, jordan_store)) == 1

    def test_multiple_distinct_oies_all_align(self, jordan_store):
        oies = {
            "s1": [
                triple("Michael Jordan", "played for", "Chicago Bulls"),
                triple("Michael Jordan", "was a member of", "Chicago Bulls"),
            ]
        }
        pairs = [
            SentenceFactPair(sentence_id="s1", sentence="...", fact=PLAYED_FOR_FACT)
        ]
        assert len(align(oies, pairs, jordan_store)) == 2

    def test_exact_duplicates_collapse(self, jordan_store):
        oies = {
            "s1": [
                triple("Michael Jordan", "played for", "Chicago Bulls"),
                triple("Michael Jordan", "played for", "Chicago Bulls"),
            ]
        }
        pairs = [
            SentenceFactPair(sentence_id="s1", sentence="...", fact=PLAYED_FOR_FACT)
        ]
        assert len(align(oies, pairs, jordan_store)) == 1

    def test_synthetic_world_perfect_precision_and_recall(self):
        # brute-force oracle over a world where every label is unique
        entries = [entity(f"e{i}", f"uniquename{i}") for i in range(8)]
        entries.append(predicate("P1", "rel"))
        facts = [KgFact(f"e{i}", "P1", f"e{i+1}") for i in range(7)]
        store = build_store(entries, facts)
        oies = {}
        pairs = []
        for i, fact in enumerate(facts):
            sid = f"s{i}"
            s_label = store.entry(fact.subject_id).label
            o_label = store.entry(fact.object_id).label
            oies[sid] = [
                triple(s_label, "relates to", o_label),
                triple("somebody", "does", "something"),  # noise
            ]
            pairs.append(SentenceFactPair(sentence_id=sid, sentence=f"{s_label} ...", fact=fact))
        result = align(oies, pairs, store)
        produced = {(a.oie.subject, a.oie.object, a.fact.ids) for a in result}
        expected = {
            (store.entry(f.subject_id).label, store.entry(f.object_id).label, f.ids)
            for f in facts
        }
        assert produced == expected

    def test_deterministic_order(self, jordan_store):
        oies = {
            "s1": [
                triple("Michael Jordan", "was a member of", "Chicago Bulls"),
                triple("Michael Jordan", "played for", "Chicago Bulls"),
            ]
        }
        pairs = [
            SentenceFactPair(sentence_id="s1", sentence="...", fact=PLAYED_FOR_FACT)
        ]
        first = align(oies, pairs, jordan_store)
        second = align(dict(reversed(list(oies.items()))), pairs, jordan_store)
        assert first == second


class TestAugmentAliases:
    def test_cartesian_count(self, jordan_store):
        # subject aliases restricted to 2 for the worked example
        entries = [
            entity("Q41421", "Michael Jordan", aliases=("Air Jordan", "M.J.")),
            entity("Q128109", "Chicago Bulls", aliases=("The Bulls",)),
            predicate("P54", "member of sports team"),
        ]
        store = build_store(entries, [PLAYED_FOR_FACT])
        original = make_alignment(
            "Michael Jordan", "played for", "Chicago Bulls", PLAYED_FOR_FACT
        )
        result = augment_aliases([original], store)
        augmented = [a for a in result if a.augmented]
        assert len(augmented) == 3 * 2 - 1 == 5
        produced = {(a.oie.subject, a.oie.object) for a in augmented}
        assert ("Air Jordan", "Chicago Bulls") in produced
        assert ("M.J.", "The Bulls") in produced
        assert ("Michael Jordan", "Chicago Bulls") not in produced
        assert original in result
        assert all(a.oie.relation == "played for" for a in result)

    def test_no_aliases_no_augmentation(self):
        entries = [
            entity("Q1", "Alpha"),
            entity("Q2", "Beta"),
            predicate("P1", "rel"),
        ]
        fact = KgFact("Q1", "P1", "Q2")
        store = build_store(entries, [fact])
        result = augment_aliases([make_alignment("Alpha", "r", "Beta", fact)], store)
        assert len(result) == 1

    def test_single_subject_alias(self):
        entries = [
            entity("Q1", "Alpha", aliases=("A.",)),
            entity("Q2", "Beta"),
            predicate("P1", "rel"),
        ]
        fact = KgFact("Q1", "P1", "Q2")
        store = build_store(entries, [fact])
        result = augment_aliases([make_alignment("Alpha", "r", "Beta", fact)], store)
        assert len([a for a in result if a.augmented]) == 2 * 1 - 1 == 1

    def test_count_formula_property(self):
        for n_subject, n_object in itertools.product(range(4), range(4)):
            entries = [
                entity("Q1", "Alpha", aliases=tuple(f"A{i}" for i in range(n_subject))),
                entity("Q2", "Beta", aliases=tuple(f"B{i}" for i in range(n_object))),
                predicate("P1", "rel"),
            ]
            fact = KgFact("Q1", "P1", "Q2")
            store = build_store(entries, [fact])
            result = augment_aliases([make_alignment("Alpha", "r", "Beta", fact)], store)
            expected = (1 + n_subject) * (1 + n_object) - 1
            assert len([a for a in result if a.augmented]) == expected

    def test_rejects_already_augmented_input(self, jordan_store):
        augmented = make_alignment("X", "r", "Y", PLAYED_FOR_FACT, augmented=True)
        with pytest.raises(ValueError):
            augment_aliases([augmented], jordan_store)


class TestRemoveLeakage:
    def test_identical_alignment_removed(self):
        a = make_alignment("Alpha", "r", "Beta", KgFact("Q1", "P1", "Q2"))
        assert remove_leakage([a], [a]) == []

    def test_same_fact_different_surface_retained(self):
        fact = KgFact("Q1", "P1", "Q2")
        train = [make_alignment("Alpha", "r", "Beta", fact)]
        test = [make_alignment("A.", "r", "Beta", fact)]
        # oracle: set difference on (normalized oie, fact) pairs
        assert remove_leakage(train, test) == train

    def test_disjoint_sets_unchanged(self):
        train = [make_alignment("Alpha", "r", "Beta", KgFact("Q1", "P1", "Q2"))]
        test = [make_alignment("Gamma", "r", "Delta", KgFact("Q3", "P1", "Q4"))]
        assert remove_leakage(train, test) == train

    def test_result_disjoint_from_test_property(self):
        facts = [KgFact(f"Q{i}", "P1", f"Q{i+1}") for i in range(6)]
        train = [
            make_alignment(f"S{i % 4}", "r", f"O{i % 3}", facts[i % len(facts)])
            for i in range(12)
        ]
        test = train[::2]
        cleaned = remove_leakage(train, test)
        test_keys = {(a.oie.slots, a.fact.ids) for a in test}
        assert all((a.oie.slots, a.fact.ids) not in test_keys for a in cleaned)


class TestOieText:
    def test_plain_rendering(self):
        t = triple("M. Jordan", "grew up in", "Wilmington")
        assert oie_text(t) == "<SUBJ> M. Jordan <REL> grew up in <OBJ> Wilmington"

    def test_context_rendering(self):
        t = triple("M. Jordan", "grew up in", "Wilmington", sentence="He grew up there.")
        assert oie_text(t, with_context=True) == (
            "<SUBJ> M. Jordan <REL> grew up in <OBJ> Wilmington <SENT> He grew up there."
        )

    def test_missing_context(self):
        with pytest.raises(MissingContextError):
            oie_text(triple("a", "b", "c"), with_context=True)

    def test_injective_on_marker_free_triples(self):
        triples = [
            triple("a b", "c", "d"),
            triple("a", "b c", "d"),
            triple("a", "b", "c d"),
            triple("a b c", "d", "e"),
        ]
        rendered = {oie_text(t) for t in triples}
        assert len(rendered) == len(triples)

    def test_marker_tokens_rejected_at_construction(self):
        with pytest.raises(ReservedTokenError):
            triple("a <REL> b", "c", "d")

    def test_empty_slot_rejected(self):
        with pytest.raises(ValueError):
            triple("  ", "r", "o")


class TestFileFormats:
    def test_oie_and_pairs_round_trip(self, tmp_path, jordan_store):
        oie_path = tmp_path / "oie.jsonl"
        pairs_path = tmp_path / "pairs.jsonl"
        write_jsonl(
            oie_path,
            [
                {
                    "sentence_id": "s1",
                    "subject": "Michael Jordan",
                    "relation": "played for",
                    "object": "Chicago Bulls",
                    "extractor": "toy",
                }
            ],
        )
        write_jsonl(
            pairs_path,
            [
                {
                    "sentence_id": "s1",
                    "sentence": "Michael Jordan played for Chicago Bulls.",
                    "subject": "Q41421",
                    "predicate": "P54",
                    "object": "Q128109",
                }
            ],
        )
        oies = read_oie_file(oie_path)
        pairs = read_pairs_file(pairs_path, jordan_store)
        result = align(oies, pairs, jordan_store)
        assert len(result) == 1
        assert result[0].oie.extractor == "toy"

    def test_pairs_unknown_id(self, tmp_path, jordan_store):
        pairs_path = tmp_path / "pairs.jsonl"
        write_jsonl(
            pairs_path,
            [
                {
                    "sentence_id": "s1",
                    "sentence": "...",
                    "subject": "Q404",
                    "predicate": "P54",
                    "object": "Q128109",
                }
            ],
        )
        with pytest.raises(UnknownIdError, match="line 1"):
            read_pairs_file(pairs_path, jordan_store)

    def test_alignment_file_round_trip(self, tmp_path):
        alignments = [
            make_alignment("A", "r", "B", KgFact("Q1", "P1", "Q2"), sentence="A r B."),
            make_alignment("A.", "r", "B", KgFact("Q1", "P1", "Q2"), augmented=True),
        ]
        path = tmp_path / "alignments.jsonl"
        write_alignments(path, alignments)
        assert read_alignments(path) == alignments

    def test_record_round_trip_preserves_fields(self):
        a = Alignment(
            oie=OieTriple("A", "r", "B", sentence="s", extractor="x"),
            fact=KgFact("Q1", "P1", "Q2"),
            augmented=True,
        )
        assert alignment_from_record(alignment_record(a)) == a


class TestUids:
    def test_uid_ignores_extractor(self):
        a = OieTriple("A", "r", "B", extractor="x")
        b = OieTriple("A", "r", "B", extractor="y")
        assert oie_uid(a) == oie_uid(b)

    def test_uid_depends_on_sentence(self):
        a = OieTriple("A", "r", "B", sentence="one")
        b = OieTriple("A", "r", "B", sentence="two")
        assert oie_uid(a) != oie_uid(b)
