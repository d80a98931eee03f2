"""Reference knowledge graph: entries, facts, surface lookup and filtering.

The store is immutable after construction and safe to share across
concurrent readers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping

if TYPE_CHECKING:
    from .corpus import Alignment

from .errors import (
    DanglingFactError,
    DuplicateIdError,
    MalformedRecordError,
    UnknownIdError,
)
from .io import iter_jsonl
from .text import DESC_TOKEN, MASK_TOKEN, check_no_markers, normalize_surface


class EntryKind(enum.Enum):
    ENTITY = "entity"
    PREDICATE = "predicate"


@dataclass(frozen=True)
class KgEntry:
    """One canonical KG concept: an entity or a predicate."""

    id: str
    kind: EntryKind
    label: str
    description: str | None = None
    aliases: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.id:
            raise ValueError("entry id must be non-empty")
        if not self.label.strip():
            raise ValueError(f"entry {self.id}: label must be non-empty")
        check_no_markers(self.label, f"entry {self.id} label")
        if self.description is not None:
            check_no_markers(self.description, f"entry {self.id} description")
        seen = set()
        for alias in self.aliases:
            check_no_markers(alias, f"entry {self.id} alias")
            if alias == self.label:
                raise ValueError(f"entry {self.id}: label repeated in aliases")
            if alias in seen:
                raise ValueError(f"entry {self.id}: duplicate alias {alias!r}")
            seen.add(alias)
        object.__setattr__(self, "aliases", tuple(self.aliases))


@dataclass(frozen=True, order=True)
class KgFact:
    """Canonical (subject, predicate, object) triple over entry ids."""

    subject_id: str
    predicate_id: str
    object_id: str

    @property
    def ids(self) -> tuple[str, str, str]:
        return (self.subject_id, self.predicate_id, self.object_id)


@dataclass(frozen=True)
class KgStore:
    """Validated, immutable collection of entries and facts.

    ``surface_index`` maps every normalized entity label and alias to the
    set of entity ids carrying it.
    """

    entries: Mapping[str, KgEntry]
    facts: tuple[KgFact, ...]
    surface_index: Mapping[str, frozenset[str]]
    case_fold: bool = False
    fact_set: frozenset[KgFact] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "fact_set", frozenset(self.facts))

    def entry(self, entry_id: str) -> KgEntry:
        try:
            return self.entries[entry_id]
        except KeyError:
            raise UnknownIdError(f"unknown entry id {entry_id!r}") from None

    def entity_ids(self) -> list[str]:
        return [e.id for e in self.entries.values() if e.kind is EntryKind.ENTITY]

    def predicate_ids(self) -> list[str]:
        return [e.id for e in self.entries.values() if e.kind is EntryKind.PREDICATE]

    def __contains__(self, entry_id: str) -> bool:
        return entry_id in self.entries


def _validate_fact(fact: KgFact, entries: Mapping[str, KgEntry], where: str = "") -> None:
    for entry_id, want in (
        (fact.subject_id, EntryKind.ENTITY),
        (fact.predicate_id, EntryKind.PREDICATE),
        (fact.object_id, EntryKind.ENTITY),
    ):
        entry = entries.get(entry_id)
        if entry is None:
            raise DanglingFactError(f"{where}fact references unknown id {entry_id!r}")
        if entry.kind is not want:
            raise DanglingFactError(
                f"{where}fact uses {entry_id!r} as {want.value} but it is a {entry.kind.value}"
            )


def build_store(
    entries: Iterable[KgEntry],
    facts: Iterable[KgFact],
    case_fold: bool = False,
) -> KgStore:
    """Assemble and validate a store from already-parsed entries and facts."""
    entry_map: dict[str, KgEntry] = {}
    for entry in entries:
        if entry.id in entry_map:
            raise DuplicateIdError(f"duplicate entry id {entry.id!r}")
        entry_map[entry.id] = entry

    unique_facts = dict.fromkeys(facts)
    for fact in unique_facts:
        _validate_fact(fact, entry_map)

    surface: dict[str, set[str]] = {}
    for entry in entry_map.values():
        if entry.kind is not EntryKind.ENTITY:
            continue
        for form in (entry.label, *entry.aliases):
            key = normalize_surface(form, case_fold)
            surface.setdefault(key, set()).add(entry.id)

    return KgStore(
        entries=entry_map,
        facts=tuple(unique_facts),
        surface_index={k: frozenset(v) for k, v in surface.items()},
        case_fold=case_fold,
    )


def _parse_entry(record: dict, line_number: int) -> KgEntry:
    for required in ("id", "kind", "label"):
        if required not in record:
            raise MalformedRecordError(f"entry record missing field {required!r}", line_number)
    kind_raw = record["kind"]
    try:
        kind = EntryKind(kind_raw)
    except ValueError:
        raise MalformedRecordError(
            f"entry kind must be 'entity' or 'predicate', got {kind_raw!r}", line_number
        ) from None
    try:
        return KgEntry(
            id=str(record["id"]),
            kind=kind,
            label=str(record["label"]),
            description=record.get("description"),
            aliases=tuple(record.get("aliases") or ()),
        )
    except ValueError as exc:
        raise MalformedRecordError(str(exc), line_number) from exc


def _parse_fact(record: dict, line_number: int) -> KgFact:
    for required in ("subject", "predicate", "object"):
        if required not in record:
            raise MalformedRecordError(f"fact record missing field {required!r}", line_number)
    return KgFact(
        subject_id=str(record["subject"]),
        predicate_id=str(record["predicate"]),
        object_id=str(record["object"]),
    )


def load_kg(
    entries_path: str | Path,
    facts_path: str | Path,
    case_fold: bool = False,
) -> KgStore:
    """Load a store from line-delimited entry and fact files.

    Entry records: {id, kind: "entity"|"predicate", label, description?, aliases?}.
    Fact records: {subject, predicate, object}. Errors name the offending line.
    """
    entries: list[KgEntry] = []
    seen_ids: dict[str, int] = {}
    for line_number, record in iter_jsonl(entries_path):
        entry = _parse_entry(record, line_number)
        if entry.id in seen_ids:
            raise DuplicateIdError(
                f"line {line_number}: duplicate entry id {entry.id!r} "
                f"(first seen on line {seen_ids[entry.id]})"
            )
        seen_ids[entry.id] = line_number
        entries.append(entry)

    entry_map = {e.id: e for e in entries}
    facts: list[KgFact] = []
    for line_number, record in iter_jsonl(facts_path):
        fact = _parse_fact(record, line_number)
        _validate_fact(fact, entry_map, where=f"line {line_number}: ")
        facts.append(fact)

    return build_store(entries, facts, case_fold=case_fold)


def _fact_member_ids(fact: KgFact) -> set[str]:
    return {fact.subject_id, fact.predicate_id, fact.object_id}


def entry_frequencies(facts: Iterable[KgFact]) -> dict[str, int]:
    """Number of facts each entry participates in (one per fact at most)."""
    counts: dict[str, int] = {}
    for fact in facts:
        for entry_id in _fact_member_ids(fact):
            counts[entry_id] = counts.get(entry_id, 0) + 1
    return counts


def filter_by_frequency(store: KgStore, min_count: int) -> KgStore:
    """Drop entries participating in fewer than ``min_count`` facts.

    Removing an entry orphans its facts, which can push other entries below
    the threshold, so removal iterates to a fixpoint.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    entries = dict(store.entries)
    facts = list(store.facts)
    while True:
        counts = entry_frequencies(facts)
        keep = {eid for eid in entries if counts.get(eid, 0) >= min_count}
        if len(keep) == len(entries):
            break
        entries = {eid: e for eid, e in entries.items() if eid in keep}
        facts = [f for f in facts if _fact_member_ids(f) <= keep]
    return build_store(entries.values(), facts, case_fold=store.case_fold)


def restrict_to_benchmark(store: KgStore, alignments: "list[Alignment]") -> KgStore:
    """Benchmark-restricted store: entries referenced by at least one
    alignment's fact, plus all store facts over those entries."""
    referenced: set[str] = set()
    for alignment in alignments:
        for entry_id in alignment.fact.ids:
            if entry_id not in store.entries:
                raise UnknownIdError(f"alignment references unknown id {entry_id!r}")
            referenced.add(entry_id)
    entries = [store.entries[eid] for eid in store.entries if eid in referenced]
    facts = [f for f in store.facts if _fact_member_ids(f) <= referenced]
    return build_store(entries, facts, case_fold=store.case_fold)


def entry_text(entry: KgEntry, mask_description: bool = False) -> str:
    """Render an entry as its label followed by its (optionally masked)
    description; the bare label when there is no description."""
    if entry.description is None:
        return entry.label
    if mask_description:
        return f"{entry.label} {DESC_TOKEN} {MASK_TOKEN}"
    return f"{entry.label} {DESC_TOKEN} {entry.description}"


def lookup_surface(store: KgStore, surface: str) -> frozenset[str]:
    """Entity ids whose label or alias equals the normalized surface."""
    return store.surface_index.get(
        normalize_surface(surface, store.case_fold), frozenset()
    )
