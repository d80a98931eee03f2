"""OIE triples, distant-supervision alignment against KG facts, alias
augmentation, leakage removal and encoder input rendering."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import MalformedRecordError, MissingContextError, UnknownIdError
from .io import iter_jsonl, write_jsonl
from .kg import KgFact, KgStore
from .text import (
    OBJ_TOKEN,
    REL_TOKEN,
    SENT_TOKEN,
    SUBJ_TOKEN,
    check_no_markers,
    normalize_surface,
)


@dataclass(frozen=True)
class OieTriple:
    """Surface-form (subject; relation; object) extraction."""

    subject: str
    relation: str
    object: str
    sentence: str | None = None
    extractor: str | None = None

    def __post_init__(self):
        for name, value in (
            ("subject", self.subject),
            ("relation", self.relation),
            ("object", self.object),
        ):
            if not value.strip():
                raise ValueError(f"OIE {name} must be non-empty")
            check_no_markers(value, f"OIE {name}")

    @property
    def slots(self) -> tuple[str, str, str]:
        return (self.subject, self.relation, self.object)


@dataclass(frozen=True)
class SentenceFactPair:
    """One dataset instance: a sentence and a KG fact it entails.

    ``subject_surface``/``object_surface`` are gold mention strings when the
    dataset provides them; otherwise alignment falls back to entry labels.
    """

    sentence_id: str
    sentence: str
    fact: KgFact
    subject_surface: str | None = None
    object_surface: str | None = None


@dataclass(frozen=True)
class Alignment:
    """An OIE triple paired with the KG fact it expresses."""

    oie: OieTriple
    fact: KgFact
    augmented: bool = False


def oie_uid(triple: OieTriple) -> str:
    """Stable content-derived id for an OIE triple (used as an embedding
    import key; extractor tags do not affect the rendered text)."""
    payload = "\x1f".join(
        (triple.subject, triple.relation, triple.object, triple.sentence or "")
    )
    return hashlib.blake2b(payload.encode("utf-8"), digest_size=8).hexdigest()


def alignment_uid(alignment: Alignment) -> str:
    """Stable content-derived id for an alignment record."""
    payload = "\x1f".join(
        (
            oie_uid(alignment.oie),
            *alignment.fact.ids,
            "aug" if alignment.augmented else "orig",
        )
    )
    return hashlib.blake2b(payload.encode("utf-8"), digest_size=8).hexdigest()


def _match_target(
    store: KgStore, entity_id: str, gold_surface: str | None
) -> str:
    if gold_surface is not None:
        return gold_surface
    return store.entry(entity_id).label


def _normalized_slots(triple: OieTriple, case_fold: bool) -> tuple[str, str, str]:
    return (
        normalize_surface(triple.subject, case_fold),
        normalize_surface(triple.relation, case_fold),
        normalize_surface(triple.object, case_fold),
    )


def align(
    oies: Mapping[str, Sequence[OieTriple]],
    pairs: Sequence[SentenceFactPair],
    store: KgStore,
) -> list[Alignment]:
    """Distant-supervision alignment: pair an OIE with a fact whenever the
    OIE subject and object exactly match the fact's subject and object
    surfaces (gold mention when available, else the canonical label). The
    relation is assumed to express the predicate; unmatched OIEs are dropped.

    Exact-duplicate OIEs within a sentence are collapsed first; distinct
    OIEs matching the same fact all produce alignments.
    """
    case_fold = store.case_fold
    pairs_by_sentence: dict[str, list[SentenceFactPair]] = {}
    for pair in pairs:
        pairs_by_sentence.setdefault(pair.sentence_id, []).append(pair)

    out: list[Alignment] = []
    for sentence_id in sorted(pairs_by_sentence):
        sentence_pairs = pairs_by_sentence[sentence_id]
        triples = oies.get(sentence_id, ())
        unique: dict[tuple[str, str, str], OieTriple] = {}
        for triple in triples:
            unique.setdefault(_normalized_slots(triple, case_fold), triple)
        for pair in sentence_pairs:
            subject_target = normalize_surface(
                _match_target(store, pair.fact.subject_id, pair.subject_surface),
                case_fold,
            )
            object_target = normalize_surface(
                _match_target(store, pair.fact.object_id, pair.object_surface),
                case_fold,
            )
            for (subj, _rel, obj), triple in unique.items():
                if subj == subject_target and obj == object_target:
                    if triple.sentence is None:
                        triple = replace(triple, sentence=pair.sentence)
                    out.append(Alignment(oie=triple, fact=pair.fact))

    out.sort(
        key=lambda a: (
            a.oie.sentence or "",
            a.fact.ids,
            a.oie.slots,
        )
    )
    return out


def augment_aliases(alignments: Sequence[Alignment], store: KgStore) -> list[Alignment]:
    """Create alias-substituted variants of each alignment.

    For subject surface set S = {original} ∪ subject-entity aliases and
    object surface set O likewise, emits one augmented alignment per
    (s, o) in S×O except the original pair. Originals are preserved and
    come first; the relation string never changes.
    """
    out: list[Alignment] = []
    for alignment in alignments:
        if alignment.augmented:
            raise ValueError("augment_aliases expects unaugmented alignments")
        out.append(alignment)
        subject_entry = store.entry(alignment.fact.subject_id)
        object_entry = store.entry(alignment.fact.object_id)
        subject_forms = list(
            dict.fromkeys((alignment.oie.subject, *subject_entry.aliases))
        )
        object_forms = list(
            dict.fromkeys((alignment.oie.object, *object_entry.aliases))
        )
        for subject in subject_forms:
            for obj in object_forms:
                if subject == alignment.oie.subject and obj == alignment.oie.object:
                    continue
                out.append(
                    Alignment(
                        oie=replace(alignment.oie, subject=subject, object=obj),
                        fact=alignment.fact,
                        augmented=True,
                    )
                )
    return out


def _leakage_key(alignment: Alignment, case_fold: bool) -> tuple:
    return (_normalized_slots(alignment.oie, case_fold), alignment.fact.ids)


def remove_leakage(
    train: Sequence[Alignment],
    test: Sequence[Alignment],
    case_fold: bool = False,
) -> list[Alignment]:
    """Drop training alignments whose (normalized OIE, fact) pair occurs in
    the test portion."""
    test_keys = {_leakage_key(a, case_fold) for a in test}
    return [a for a in train if _leakage_key(a, case_fold) not in test_keys]


def oie_text(triple: OieTriple, with_context: bool = False) -> str:
    """Render an OIE triple for the encoder, optionally appending its
    provenance sentence."""
    rendered = (
        f"{SUBJ_TOKEN} {triple.subject} {REL_TOKEN} {triple.relation} "
        f"{OBJ_TOKEN} {triple.object}"
    )
    if with_context:
        if triple.sentence is None:
            raise MissingContextError(
                f"triple {triple.slots!r} has no provenance sentence"
            )
        rendered += f" {SENT_TOKEN} {triple.sentence}"
    return rendered


# ---------------------------------------------------------------------------
# File formats


def read_oie_file(path: str | Path) -> dict[str, list[OieTriple]]:
    """OIE records {sentence_id, subject, relation, object, extractor?}
    grouped by sentence id."""
    grouped: dict[str, list[OieTriple]] = {}
    for line_number, record in iter_jsonl(path):
        for required in ("sentence_id", "subject", "relation", "object"):
            if required not in record:
                raise MalformedRecordError(
                    f"OIE record missing field {required!r}", line_number
                )
        try:
            triple = OieTriple(
                subject=str(record["subject"]),
                relation=str(record["relation"]),
                object=str(record["object"]),
                sentence=record.get("sentence"),
                extractor=record.get("extractor"),
            )
        except ValueError as exc:
            raise MalformedRecordError(str(exc), line_number) from exc
        grouped.setdefault(str(record["sentence_id"]), []).append(triple)
    return grouped


def read_pairs_file(path: str | Path, store: KgStore) -> list[SentenceFactPair]:
    """Pair records {sentence_id, sentence, subject, predicate, object,
    subject_mention?, object_mention?}; facts must resolve in the store."""
    pairs: list[SentenceFactPair] = []
    for line_number, record in iter_jsonl(path):
        for required in ("sentence_id", "sentence", "subject", "predicate", "object"):
            if required not in record:
                raise MalformedRecordError(
                    f"pair record missing field {required!r}", line_number
                )
        fact = KgFact(
            subject_id=str(record["subject"]),
            predicate_id=str(record["predicate"]),
            object_id=str(record["object"]),
        )
        for entry_id in fact.ids:
            if entry_id not in store:
                raise UnknownIdError(
                    f"line {line_number}: pair references unknown id {entry_id!r}"
                )
        pairs.append(
            SentenceFactPair(
                sentence_id=str(record["sentence_id"]),
                sentence=str(record["sentence"]),
                fact=fact,
                subject_surface=record.get("subject_mention"),
                object_surface=record.get("object_mention"),
            )
        )
    return pairs


def alignment_record(alignment: Alignment) -> dict:
    record = {
        "subject": alignment.oie.subject,
        "relation": alignment.oie.relation,
        "object": alignment.oie.object,
        "subject_id": alignment.fact.subject_id,
        "predicate_id": alignment.fact.predicate_id,
        "object_id": alignment.fact.object_id,
        "augmented": alignment.augmented,
    }
    if alignment.oie.sentence is not None:
        record["sentence"] = alignment.oie.sentence
    if alignment.oie.extractor is not None:
        record["extractor"] = alignment.oie.extractor
    return record


def alignment_from_record(record: dict, line_number: int = 0) -> Alignment:
    for required in ("subject", "relation", "object", "subject_id", "predicate_id", "object_id"):
        if required not in record:
            raise MalformedRecordError(
                f"alignment record missing field {required!r}", line_number
            )
    return Alignment(
        oie=OieTriple(
            subject=str(record["subject"]),
            relation=str(record["relation"]),
            object=str(record["object"]),
            sentence=record.get("sentence"),
            extractor=record.get("extractor"),
        ),
        fact=KgFact(
            subject_id=str(record["subject_id"]),
            predicate_id=str(record["predicate_id"]),
            object_id=str(record["object_id"]),
        ),
        augmented=bool(record.get("augmented", False)),
    )


def write_alignments(
    path: str | Path, alignments: Iterable[Alignment], header: dict | None = None
) -> None:
    write_jsonl(path, (alignment_record(a) for a in alignments), header=header)


def read_alignments(path: str | Path) -> list[Alignment]:
    return [alignment_from_record(r, n) for n, r in iter_jsonl(path)]
