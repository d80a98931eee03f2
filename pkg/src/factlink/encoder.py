"""Pluggable text encoder: OIE triples map to three per-slot unit vectors,
KG entries to one unit vector.

The built-in reference encoder replaces a pretrained transformer with
hashed word/character-trigram features, a trainable feature table and
linear projections; an external-embedding import serves frozen vectors
produced elsewhere.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
import hashlib
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .corpus import OieTriple, oie_text, oie_uid
from .errors import (
    DimensionMismatchError,
    MalformedRecordError,
    MissingVectorError,
    NumericError,
)
from .io import iter_jsonl, write_jsonl
from .kg import KgEntry
from .text import MARKER_TOKENS

SLOT_NAMES = ("subject", "relation", "object")

_MARKER_BUCKETS = {token: i for i, token in enumerate(MARKER_TOKENS)}
_N_RESERVED = len(MARKER_TOKENS)


def _hash_feature(feature: str, space: int) -> int:
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % space


def featurize(text: str, buckets: int) -> Counter:
    """Hashed feature multiset of a text: lowercased word tokens plus
    boundary-marked character trigrams. Reserved marker tokens map to
    their dedicated buckets and are never hashed."""
    if buckets <= _N_RESERVED:
        raise ValueError(f"bucket count must exceed {_N_RESERVED}")
    space = buckets - _N_RESERVED
    features: Counter = Counter()
    for token in text.split():
        if token in _MARKER_BUCKETS:
            features[_MARKER_BUCKETS[token]] += 1
            continue
        word = token.lower()
        features[_N_RESERVED + _hash_feature("w:" + word, space)] += 1
        padded = f"^{word}$"
        for i in range(len(padded) - 2):
            features[_N_RESERVED + _hash_feature("t:" + padded[i : i + 3], space)] += 1
    return features


class FeatureHasher:
    """Caches compiled (bucket ids, mean weights) per text for one bucket
    count."""

    def __init__(self, buckets: int):
        self.buckets = buckets
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def compile(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        hit = self._cache.get(text)
        if hit is not None:
            return hit
        counts = featurize(text, self.buckets)
        ids = np.fromiter(counts.keys(), dtype=np.int64, count=len(counts))
        weights = np.fromiter(counts.values(), dtype=np.float64, count=len(counts))
        total = weights.sum()
        if total > 0:
            weights = weights / total
        compiled = (ids, weights)
        self._cache[text] = compiled
        return compiled


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 200
    hidden: int = 64
    buckets: int = 2**18


@dataclass
class ReferenceEncoderParams:
    """Trainable state of the reference encoder."""

    feature_table: np.ndarray  # (buckets, hidden)
    slot_projection: np.ndarray  # (2*hidden, dim)
    entry_projection: np.ndarray  # (2*hidden, dim)
    rng_seed: int

    @property
    def dim(self) -> int:
        return self.slot_projection.shape[1]

    @property
    def hidden(self) -> int:
        return self.feature_table.shape[1]

    @property
    def buckets(self) -> int:
        return self.feature_table.shape[0]

    def copy(self) -> "ReferenceEncoderParams":
        return ReferenceEncoderParams(
            feature_table=self.feature_table.copy(),
            slot_projection=self.slot_projection.copy(),
            entry_projection=self.entry_projection.copy(),
            rng_seed=self.rng_seed,
        )


def init_params(config: EncoderConfig, seed: int) -> ReferenceEncoderParams:
    """Seeded uniform init: feature table in ±1/sqrt(hidden), projections
    in ±1/sqrt(2*hidden)."""
    rng = np.random.default_rng(seed)
    h = config.hidden
    table_bound = 1.0 / np.sqrt(h)
    proj_bound = 1.0 / np.sqrt(2 * h)
    return ReferenceEncoderParams(
        feature_table=rng.uniform(-table_bound, table_bound, size=(config.buckets, h)),
        slot_projection=rng.uniform(-proj_bound, proj_bound, size=(2 * h, config.dim)),
        entry_projection=rng.uniform(-proj_bound, proj_bound, size=(2 * h, config.dim)),
        rng_seed=seed,
    )


def normalize(vector: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vector))
    if norm == 0.0 or not np.isfinite(norm):
        raise NumericError("cannot normalize zero or non-finite vector")
    return vector / norm


def segment_vector(params: ReferenceEncoderParams, ids: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted mean of feature-table rows; zero vector for empty feature sets."""
    if len(ids) == 0:
        return np.zeros(params.hidden)
    return weights @ params.feature_table[ids]


class Encoder(Protocol):
    """Contract every encoder satisfies: unit-norm, deterministic outputs."""

    dim: int

    def slot_embed(
        self, triple: OieTriple, with_context: bool = False
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]: ...

    def entry_embed(self, entry: KgEntry, mask_description: bool = False) -> np.ndarray: ...


class ReferenceEncoder:
    """Inference wrapper over frozen reference-encoder params.

    Each slot embedding concatenates the slot's own segment vector with the
    whole-triple segment vector before projection, so every slot sees
    cross-slot context. Embedding caches assume the params never change.
    """

    def __init__(self, params: ReferenceEncoderParams, cache: bool = True):
        self.params = params
        self.dim = params.dim
        self.hasher = FeatureHasher(params.buckets)
        self._cache_enabled = cache
        self._slot_cache: dict[tuple[str, bool], tuple[np.ndarray, ...]] = {}
        self._entry_cache: dict[tuple[str, bool], np.ndarray] = {}

    def _segment(self, text: str) -> np.ndarray:
        ids, weights = self.hasher.compile(text)
        return segment_vector(self.params, ids, weights)

    def slot_embed(
        self, triple: OieTriple, with_context: bool = False
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        key = (oie_uid(triple), with_context)
        if self._cache_enabled and key in self._slot_cache:
            return self._slot_cache[key]
        triple_segment = self._segment(oie_text(triple, with_context))
        embeddings = tuple(
            normalize(
                np.concatenate([self._segment(slot_text), triple_segment])
                @ self.params.slot_projection
            )
            for slot_text in triple.slots
        )
        if self._cache_enabled:
            self._slot_cache[key] = embeddings
        return embeddings

    def entry_embed(self, entry: KgEntry, mask_description: bool = False) -> np.ndarray:
        masked = mask_description or entry.description is None
        key = (entry.id, masked)
        if self._cache_enabled and key in self._entry_cache:
            return self._entry_cache[key]
        label_segment = self._segment(entry.label)
        if masked:
            description_segment = np.zeros(self.params.hidden)
        else:
            description_segment = self._segment(entry.description)
        embedding = normalize(
            np.concatenate([label_segment, description_segment])
            @ self.params.entry_projection
        )
        if self._cache_enabled:
            self._entry_cache[key] = embedding
        return embedding


def slot_embed(
    params: ReferenceEncoderParams, triple: OieTriple, with_context: bool = False
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return ReferenceEncoder(params, cache=False).slot_embed(triple, with_context)


def entry_embed(
    params: ReferenceEncoderParams, entry: KgEntry, mask_description: bool = False
) -> np.ndarray:
    return ReferenceEncoder(params, cache=False).entry_embed(entry, mask_description)


# ---------------------------------------------------------------------------
# Params persistence: one JSON header line, then raw little-endian float64
# blocks for the feature table and the two projections.


def save_params(
    params: ReferenceEncoderParams,
    path: str | Path,
    tau: float | None = None,
    header_extra: dict | None = None,
) -> None:
    import json

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "reference-encoder",
        "dim": params.dim,
        "hidden": params.hidden,
        "buckets": params.buckets,
        "rng_seed": params.rng_seed,
        "tau": tau,
    }
    if header_extra:
        header.update(header_extra)
    with open(path, "wb") as fh:
        fh.write(
            (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")
        )
        for block in (params.feature_table, params.slot_projection, params.entry_projection):
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_params(path: str | Path) -> tuple[ReferenceEncoderParams, float | None]:
    import json

    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise MalformedRecordError(f"{path}: bad params header") from exc
        if header.get("format") != "reference-encoder":
            raise MalformedRecordError(f"{path}: not a reference-encoder params file")
        buckets, hidden, dim = header["buckets"], header["hidden"], header["dim"]
        payload = fh.read()
    sizes = (buckets * hidden, 2 * hidden * dim, 2 * hidden * dim)
    if len(payload) != sum(sizes) * 8:
        raise MalformedRecordError(f"{path}: truncated params payload")
    flat = np.frombuffer(payload, dtype="<f8")
    offsets = np.cumsum((0,) + sizes)
    params = ReferenceEncoderParams(
        feature_table=flat[offsets[0] : offsets[1]].reshape(buckets, hidden).copy(),
        slot_projection=flat[offsets[1] : offsets[2]].reshape(2 * hidden, dim).copy(),
        entry_projection=flat[offsets[2] : offsets[3]].reshape(2 * hidden, dim).copy(),
        rng_seed=int(header["rng_seed"]),
    )
    return params, header.get("tau")


# ---------------------------------------------------------------------------
# Frozen external-embedding import


def slot_key(triple: OieTriple, slot: str) -> str:
    return f"{oie_uid(triple)}#{slot}"


class ImportedEncoder:
    """Serves renormalized vectors from an embedding file.

    Entry vectors are keyed by entry id; slot vectors by the OIE triple's
    content uid plus slot name. Imports are frozen: the context and masking
    flags were the exporter's choice and do not change served vectors.
    """

    def __init__(self, vectors: dict[str, np.ndarray], dim: int):
        self.vectors = vectors
        self.dim = dim

    def _get(self, key: str) -> np.ndarray:
        vector = self.vectors.get(key)
        if vector is None:
            raise MissingVectorError(f"no imported vector for key {key!r}")
        return vector

    def slot_embed(
        self, triple: OieTriple, with_context: bool = False
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(self._get(slot_key(triple, slot)) for slot in SLOT_NAMES)

    def entry_embed(self, entry: KgEntry, mask_description: bool = False) -> np.ndarray:
        return self._get(entry.id)


def import_embeddings(path: str | Path) -> ImportedEncoder:
    """Load {key, vector} records into a frozen encoder; vectors are
    renormalized and must share one dimension."""
    vectors: dict[str, np.ndarray] = {}
    dim: int | None = None
    for line_number, record in iter_jsonl(path):
        if "key" not in record or "vector" not in record:
            raise MalformedRecordError("embedding record needs key and vector", line_number)
        vector = np.asarray(record["vector"], dtype=np.float64)
        if vector.ndim != 1:
            raise MalformedRecordError("vector must be a flat list", line_number)
        if dim is None:
            dim = int(vector.shape[0])
        elif vector.shape[0] != dim:
            raise DimensionMismatchError(
                f"line {line_number}: vector for {record['key']!r} has length "
                f"{vector.shape[0]}, expected {dim}"
            )
        vectors[str(record["key"])] = normalize(vector)
    if dim is None:
        raise MalformedRecordError(f"embedding file {path} is empty")
    return ImportedEncoder(vectors, dim)


def export_embeddings(
    encoder: Encoder,
    path: str | Path,
    entries: Iterable[KgEntry] = (),
    triples: Sequence[OieTriple] = (),
    with_context: bool = False,
    header: dict | None = None,
) -> None:
    """Write entry and per-slot OIE vectors in the import format."""

    def records():
        for entry in entries:
            yield {"key": entry.id, "vector": encoder.entry_embed(entry).tolist()}
        for triple in triples:
            embeddings = encoder.slot_embed(triple, with_context)
            for slot, vector in zip(SLOT_NAMES, embeddings):
                yield {"key": slot_key(triple, slot), "vector": vector.tolist()}

    write_jsonl(path, records(), header=header)
