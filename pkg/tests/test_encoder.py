from collections import Counter

import numpy as np
import pytest

from conftest import entity
from factlink.corpus import OieTriple
from factlink.encoder import (
    EncoderConfig,
    ReferenceEncoder,
    _hash_feature,
    _N_RESERVED,
    export_embeddings,
    featurize,
    import_embeddings,
    init_params,
    slot_key,
)
from factlink.errors import DimensionMismatchError, MissingContextError, MissingVectorError
from factlink.io import write_jsonl
from factlink.text import MARKER_TOKENS

CONFIG = EncoderConfig(dim=16, hidden=8, buckets=512)


@pytest.fixture(scope="module")
def encoder():
    return ReferenceEncoder(init_params(CONFIG, seed=5))


def triple(s="Michael Jordan", r="played for", o="Chicago Bulls", sentence=None):
    return OieTriple(subject=s, relation=r, object=o, sentence=sentence)


class TestFeaturize:
    def test_hand_enumerated_trigrams(self):
        # "Bulls" decomposes into one word feature and five boundary-marked
        # trigrams: ^bu bul ull lls ls$
        expected_features = ["w:bulls", "t:^bu", "t:bul", "t:ull", "t:lls", "t:ls$"]
        space = CONFIG.buckets - _N_RESERVED
        expected = Counter(
            _N_RESERVED + _hash_feature(f, space) for f in expected_features
        )
        assert featurize("Bulls", CONFIG.buckets) == expected

    def test_empty_string(self):
        assert featurize("", CONFIG.buckets) == Counter()

    def test_marker_maps_to_dedicated_bucket(self):
        for i, token in enumerate(MARKER_TOKENS):
            assert featurize(token, CONFIG.buckets) == Counter({i: 1})

    def test_lowercasing(self):
        assert featurize("BULLS", CONFIG.buckets) == featurize("bulls", CONFIG.buckets)

    def test_multiset_counts_repeats(self):
        once = featurize("Bulls", CONFIG.buckets)
        twice = featurize("Bulls Bulls", CONFIG.buckets)
        assert twice == Counter({k: 2 * v for k, v in once.items()})

    def test_short_words(self):
        # one-char word: one word feature plus one trigram ^a$
        assert sum(featurize("a", CONFIG.buckets).values()) == 2


class TestSlotEmbed:
    def test_three_unit_vectors(self, encoder):
        embeddings = encoder.slot_embed(triple())
        assert len(embeddings) == 3
        for e in embeddings:
            assert e.shape == (CONFIG.dim,)
            assert abs(np.linalg.norm(e) - 1.0) < 1e-6
            assert abs(float(e @ e) - 1.0) < 1e-6

    def test_context_sensitivity_of_shared_subject(self, encoder):
        a = encoder.slot_embed(triple("Michael Jordan", "played for", "Chicago Bulls"))
        b = encoder.slot_embed(triple("Michael Jordan", "wrote", "a textbook"))
        assert not np.allclose(a[0], b[0])

    def test_deterministic_bitwise(self):
        params = init_params(CONFIG, seed=9)
        a = ReferenceEncoder(params, cache=False).slot_embed(triple())
        b = ReferenceEncoder(params, cache=False).slot_embed(triple())
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_sentence_changes_embeddings_only_with_context(self, encoder):
        plain = triple()
        with_sentence = triple(sentence="Michael Jordan played for Chicago Bulls.")
        assert np.array_equal(
            encoder.slot_embed(plain)[0], encoder.slot_embed(with_sentence)[0]
        )
        contextual = encoder.slot_embed(with_sentence, with_context=True)
        assert not np.allclose(encoder.slot_embed(with_sentence)[0], contextual[0])

    def test_missing_context_propagates(self, encoder):
        with pytest.raises(MissingContextError):
            encoder.slot_embed(triple(), with_context=True)

    def test_relation_feeds_subject_only_through_triple_half(self):
        params = init_params(CONFIG, seed=5)
        a = triple("Michael Jordan", "played for", "Chicago Bulls")
        b = triple("Michael Jordan", "coached", "Chicago Bulls")
        full = ReferenceEncoder(params, cache=False)
        assert not np.allclose(full.slot_embed(a)[0], full.slot_embed(b)[0])
        # zero the triple half of the slot projection: the subject embedding
        # must become relation-invariant
        restricted_params = params.copy()
        restricted_params.slot_projection[CONFIG.hidden :, :] = 0.0
        restricted = ReferenceEncoder(restricted_params, cache=False)
        assert np.array_equal(restricted.slot_embed(a)[0], restricted.slot_embed(b)[0])


class TestEntryEmbed:
    def test_unit_norm(self, encoder):
        e = entity("Q41421", "Michael Jordan", "American basketball player")
        embedding = encoder.entry_embed(e)
        assert abs(np.linalg.norm(embedding) - 1.0) < 1e-6

    def test_masking_changes_embedding_when_description_present(self, encoder):
        e = entity("Q41421", "Michael Jordan", "American basketball player")
        assert not np.allclose(
            encoder.entry_embed(e, mask_description=False),
            encoder.entry_embed(e, mask_description=True),
        )

    def test_descriptionless_masking_is_identity(self, encoder):
        e = entity("Q9", "Bulls")
        assert np.array_equal(
            encoder.entry_embed(e, mask_description=False),
            encoder.entry_embed(e, mask_description=True),
        )


class TestImportExport:
    def test_round_trip(self, tmp_path, encoder):
        entries = [
            entity("Q1", "Alpha", "first letter"),
            entity("Q2", "Beta"),
        ]
        triples = [triple("Alpha", "precedes", "Beta")]
        path = tmp_path / "embeddings.jsonl"
        export_embeddings(encoder, path, entries=entries, triples=triples)
        imported = import_embeddings(path)
        assert imported.dim == CONFIG.dim
        for e in entries:
            np.testing.assert_allclose(
                imported.entry_embed(e), encoder.entry_embed(e), atol=1e-12
            )
        got = imported.slot_embed(triples[0])
        want = encoder.slot_embed(triples[0])
        for g, w in zip(got, want):
            np.testing.assert_allclose(g, w, atol=1e-12)

    def test_missing_vector(self, tmp_path):
        path = tmp_path / "embeddings.jsonl"
        write_jsonl(path, [{"key": "Q1", "vector": [1.0, 0.0]}])
        imported = import_embeddings(path)
        with pytest.raises(MissingVectorError, match="Q2"):
            imported.entry_embed(entity("Q2", "Beta"))
        with pytest.raises(MissingVectorError):
            imported.slot_embed(triple())

    def test_dimension_mismatch(self, tmp_path):
        path = tmp_path / "embeddings.jsonl"
        write_jsonl(
            path,
            [
                {"key": "Q1", "vector": [1.0, 0.0]},
                {"key": "Q2", "vector": [1.0, 0.0, 0.0]},
            ],
        )
        with pytest.raises(DimensionMismatchError, match="Q2"):
            import_embeddings(path)

    def test_vectors_renormalized(self, tmp_path):
        path = tmp_path / "embeddings.jsonl"
        write_jsonl(path, [{"key": "Q1", "vector": [3.0, 4.0]}])
        imported = import_embeddings(path)
        vec = imported.entry_embed(entity("Q1", "Alpha"))
        np.testing.assert_allclose(vec, [0.6, 0.8], atol=1e-12)

    def test_slot_key_format(self):
        t = triple()
        assert slot_key(t, "subject").endswith("#subject")
