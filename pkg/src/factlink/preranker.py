"""Per-slot retrieval against KG entry embeddings and contrastive training.

Retrieval is an exact full scan over a row-normalized matrix (dot product =
cosine); training minimizes temperature-scaled InfoNCE with in-batch
negatives plus global negatives sampled from the whole store.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Alignment, OieTriple, oie_text
from .encoder import (
    Encoder,
    EncoderConfig,
    FeatureHasher,
    ReferenceEncoderParams,
    init_params,
)
from .errors import (
    DataError,
    DuplicateIdError,
    EmptyTrainingSetError,
    MalformedRecordError,
    UnknownIdError,
)
from .kg import KgEntry, KgFact, KgStore

_FLIX_MAGIC = b"FLIX"
_FLIX_VERSION = 1
_SCAN_CHUNK = 8192


class IndexKind(enum.Enum):
    ENTITIES = 0
    PREDICATES = 1


@dataclass
class EmbeddingIndex:
    """Ordered ids plus a row-unit-norm float32 matrix."""

    ids: tuple[str, ...]
    matrix: np.ndarray
    kind: IndexKind
    _ids_array: np.ndarray = field(init=False, repr=False)
    _row_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._ids_array = np.array(self.ids, dtype=object)
        self._row_index = {entry_id: row for row, entry_id in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def row(self, entry_id: str) -> int:
        try:
            return self._row_index[entry_id]
        except KeyError:
            raise UnknownIdError(f"id {entry_id!r} not in index") from None


def build_index(
    embeddings: Sequence[tuple[str, np.ndarray]], kind: IndexKind
) -> EmbeddingIndex:
    """Stack (id, vector) pairs in input order; rows are renormalized and
    stored as float32."""
    ids = []
    seen = set()
    for entry_id, _ in embeddings:
        if entry_id in seen:
            raise DuplicateIdError(f"duplicate id {entry_id!r} in index")
        seen.add(entry_id)
        ids.append(entry_id)
    if not embeddings:
        dim = 0
        matrix = np.zeros((0, 0), dtype=np.float32)
    else:
        matrix = np.stack([np.asarray(v, dtype=np.float64) for _, v in embeddings])
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DataError("index rows must be non-zero vectors")
        matrix = (matrix / norms).astype(np.float32)
    return EmbeddingIndex(ids=tuple(ids), matrix=matrix, kind=kind)


def topk(index: EmbeddingIndex, query: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Exact top-k by dot product; ties broken by ascending id; returns
    min(k, len(index)) pairs."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(index)
    if n == 0:
        return []
    q = np.asarray(query, dtype=np.float32)
    scores = np.empty(n, dtype=np.float32)
    for start in range(0, n, _SCAN_CHUNK):
        block = index.matrix[start : start + _SCAN_CHUNK]
        scores[start : start + block.shape[0]] = block @ q
    order = np.lexsort((index._ids_array, -scores))[: min(k, n)]
    return [(index.ids[i], float(scores[i])) for i in order]


@dataclass(frozen=True)
class SlotLinkResult:
    """Ranked per-slot candidates; the linked fact is the top-1 of each slot."""

    subject: tuple[tuple[str, float], ...]
    relation: tuple[tuple[str, float], ...]
    object: tuple[tuple[str, float], ...]

    @property
    def linked_fact(self) -> KgFact:
        return KgFact(self.subject[0][0], self.relation[0][0], self.object[0][0])


def link(
    encoder: Encoder,
    entity_index: EmbeddingIndex,
    predicate_index: EmbeddingIndex,
    triple: OieTriple,
    k: int = 1,
    with_context: bool = False,
) -> SlotLinkResult:
    """Retrieve top-k entries per OIE slot: subject and object against the
    entity index, relation against the predicate index."""
    subject_emb, relation_emb, object_emb = encoder.slot_embed(triple, with_context)
    return SlotLinkResult(
        subject=tuple(topk(entity_index, subject_emb, k)),
        relation=tuple(topk(predicate_index, relation_emb, k)),
        object=tuple(topk(entity_index, object_emb, k)),
    )


def embed_entries(encoder: Encoder, entries: Iterable[KgEntry]) -> list[tuple[str, np.ndarray]]:
    return [(entry.id, encoder.entry_embed(entry)) for entry in entries]


def build_store_indices(
    encoder: Encoder, store: KgStore
) -> tuple[EmbeddingIndex, EmbeddingIndex]:
    """Entity and predicate indices over every entry of the store."""
    entities = embed_entries(encoder, (store.entry(i) for i in store.entity_ids()))
    predicates = embed_entries(encoder, (store.entry(i) for i in store.predicate_ids()))
    return (
        build_index(entities, IndexKind.ENTITIES),
        build_index(predicates, IndexKind.PREDICATES),
    )


# ---------------------------------------------------------------------------
# Binary index persistence


def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    """Header {magic, version u32, kind u8, count u64, dim u32}, then
    length-prefixed UTF-8 ids, then the row-major little-endian f32 matrix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_FLIX_MAGIC)
        fh.write(struct.pack("<IBQI", _FLIX_VERSION, index.kind.value, len(index), index.dim))
        for entry_id in index.ids:
            raw = entry_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(index.matrix, dtype="<f4").tobytes())


def load_index(path: str | Path) -> EmbeddingIndex:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FLIX_MAGIC:
            raise MalformedRecordError(f"{path}: not an index file (bad magic {magic!r})")
        version, kind_value, count, dim = struct.unpack("<IBQI", fh.read(17))
        if version != _FLIX_VERSION:
            raise MalformedRecordError(f"{path}: unsupported index version {version}")
        ids = []
        for _ in range(count):
            (length,) = struct.unpack("<I", fh.read(4))
            ids.append(fh.read(length).decode("utf-8"))
        payload = fh.read(count * dim * 4)
        if len(payload) != count * dim * 4:
            raise MalformedRecordError(f"{path}: truncated index payload")
        matrix = np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()
    return EmbeddingIndex(ids=tuple(ids), matrix=matrix, kind=IndexKind(kind_value))


# ---------------------------------------------------------------------------
# InfoNCE


def infonce_loss(pos_sim: float, neg_sims: Sequence[float], tau: float) -> float:
    """Temperature-scaled InfoNCE for one positive against its negatives,
    computed in log-sum-exp form."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    logits = np.concatenate(([pos_sim], np.asarray(neg_sims, dtype=np.float64))) / tau
    peak = logits.max()
    return float(peak + np.log(np.exp(logits - peak).sum()) - logits[0])


def infonce_grad(
    pos_sim: float, neg_sims: Sequence[float], tau: float
) -> tuple[float, np.ndarray, float]:
    """Analytic gradient of infonce_loss w.r.t. (pos_sim, neg_sims, tau)."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    sims = np.concatenate(([pos_sim], np.asarray(neg_sims, dtype=np.float64)))
    logits = sims / tau
    logits -= logits.max()
    weights = np.exp(logits)
    weights /= weights.sum()
    d_pos = (weights[0] - 1.0) / tau
    d_negs = weights[1:] / tau
    d_tau = (pos_sim - float(weights @ sims)) / (tau * tau)
    return float(d_pos), d_negs, float(d_tau)


def sample_negatives(
    ids: Sequence[str], exclude: str | None, count: int, rng: np.random.Generator
) -> list[str]:
    """Uniform sample (without replacement) of up to ``count`` ids,
    never returning ``exclude``."""
    pool = [i for i in ids if i != exclude]
    if count >= len(pool):
        return pool
    chosen = rng.choice(len(pool), size=count, replace=False)
    return [pool[i] for i in chosen]


# ---------------------------------------------------------------------------
# Training


@dataclass
class PrerankTrainConfig:
    epochs: int = 10
    learning_rate: float = 5e-5
    weight_decay: float = 1e-3
    batch_size: int = 32
    temperature_init: float = 0.07
    temperature_min: float = 0.01
    global_neg_entities: int = 128
    global_neg_predicates: int = 64
    with_context: bool = False
    seed: int = 0
    optimizer: str = "sgd"  # recorded for forward compatibility

    def __post_init__(self):
        if min(self.epochs, self.batch_size) < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0 or self.temperature_init <= 0:
            raise ValueError("learning_rate and temperature_init must be positive")
        if min(self.global_neg_entities, self.global_neg_predicates) < 0:
            raise ValueError("global negative counts must be >= 0")


class _SegmentBatch:
    """Compiled feature arrays for a list of texts, supporting one forward
    weighted-mean over feature-table rows and one scatter-add backward.

    Empty feature sets are encoded as a single zero-weight feature so that
    segment boundaries stay non-empty and no gradient leaks.
    """

    def __init__(self, hasher: FeatureHasher, texts: Sequence[str]):
        compiled = [hasher.compile(t) for t in texts]
        ids = []
        weights = []
        counts = np.empty(len(compiled), dtype=np.int64)
        for row, (i, w) in enumerate(compiled):
            if len(i) == 0:
                i = np.zeros(1, dtype=np.int64)
                w = np.zeros(1, dtype=np.float64)
            ids.append(i)
            weights.append(w)
            counts[row] = len(i)
        self.ids = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
        self.weights = np.concatenate(weights) if weights else np.zeros(0)
        self.starts = np.concatenate(([0], np.cumsum(counts)[:-1])).astype(np.int64)
        self.rows = np.repeat(np.arange(len(compiled)), counts)

    def forward(self, feature_table: np.ndarray) -> np.ndarray:
        gathered = feature_table[self.ids] * self.weights[:, None]
        return np.add.reduceat(gathered, self.starts, axis=0)

    def scatter_add(self, target: np.ndarray, d_segments: np.ndarray, scale: float = 1.0) -> None:
        # sort-based segment sum: much faster than np.add.at and still
        # deterministic (stable sort fixes the accumulation order)
        contributions = d_segments[self.rows] * (self.weights * scale)[:, None]
        order = np.argsort(self.ids, kind="stable")
        sorted_ids = self.ids[order]
        boundaries = np.flatnonzero(
            np.concatenate(([True], sorted_ids[1:] != sorted_ids[:-1]))
        )
        summed = np.add.reduceat(contributions[order], boundaries, axis=0)
        target[sorted_ids[boundaries]] += summed

    def touched(self) -> np.ndarray:
        return np.unique(self.ids)


def _normalize_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return z / norms, norms


def _d_normalize(normalized: np.ndarray, norms: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    inner = np.sum(normalized * d_out, axis=1, keepdims=True)
    return (d_out - normalized * inner) / norms


def train_preranker(
    alignments: Sequence[Alignment],
    store: KgStore,
    config: PrerankTrainConfig,
    encoder_config: EncoderConfig = EncoderConfig(),
    initial_params: ReferenceEncoderParams | None = None,
    initial_tau: float | None = None,
) -> tuple[ReferenceEncoderParams, list[dict]]:
    """Train the reference encoder with InfoNCE over per-slot positives.

    Per batch and slot occurrence, the positive is the aligned entry; the
    negatives are the other batch examples' entries for the same slot plus
    global entities or predicates sampled uniformly from the store
    (resampled each batch). The temperature is learned in log space and
    clamped from below. Returns trained params and a per-epoch
    {epoch, mean_loss, tau} trace.
    """
    if not alignments:
        raise EmptyTrainingSetError("no training alignments")
    for alignment in alignments:
        for entry_id in alignment.fact.ids:
            if entry_id not in store:
                raise UnknownIdError(
                    f"alignment fact references unknown id {entry_id!r}"
                )

    params = initial_params.copy() if initial_params is not None else init_params(
        encoder_config, config.seed
    )
    hasher = FeatureHasher(params.buckets)
    rng = np.random.default_rng(config.seed)
    log_tau = float(np.log(initial_tau if initial_tau is not None else config.temperature_init))
    log_tau_min = float(np.log(config.temperature_min))

    entity_ids = store.entity_ids()
    predicate_ids = store.predicate_ids()

    # per-alignment slot texts and per-entry (label, description) texts are
    # stable across epochs; the hasher memoizes their compiled features
    slot_texts = [
        (a.oie.subject, a.oie.relation, a.oie.object, oie_text(a.oie, config.with_context))
        for a in alignments
    ]
    entry_texts: dict[str, tuple[str, str]] = {}
    for entry_id in (*entity_ids, *predicate_ids):
        entry = store.entry(entry_id)
        entry_texts[entry_id] = (entry.label, entry.description or "")

    n = len(alignments)
    h = params.hidden
    lr = config.learning_rate
    wd = config.weight_decay
    trace: list[dict] = []

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_terms = 0
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            b = len(batch)
            tau = float(np.exp(log_tau))
            batch_facts = [alignments[i].fact for i in batch]

            # candidate pools per slot: in-batch entries of the same slot
            # plus one global sample per kind, deduplicated by id
            global_entities = sample_negatives(
                entity_ids, None, config.global_neg_entities, rng
            )
            global_predicates = sample_negatives(
                predicate_ids, None, config.global_neg_predicates, rng
            )
            subj_pool = list(
                dict.fromkeys([f.subject_id for f in batch_facts] + global_entities)
            )
            obj_pool = list(
                dict.fromkeys([f.object_id for f in batch_facts] + global_entities)
            )
            pred_pool = list(
                dict.fromkeys([f.predicate_id for f in batch_facts] + global_predicates)
            )
            all_ids = list(dict.fromkeys(subj_pool + obj_pool + pred_pool))
            row_of = {eid: j for j, eid in enumerate(all_ids)}
            m = len(all_ids)

            # --- forward: one segment batch covers slots, triples, entries
            texts = (
                [slot_texts[i][0] for i in batch]
                + [slot_texts[i][1] for i in batch]
                + [slot_texts[i][2] for i in batch]
                + [slot_texts[i][3] for i in batch]
                + [entry_texts[eid][0] for eid in all_ids]
                + [entry_texts[eid][1] for eid in all_ids]
            )
            seg_batch = _SegmentBatch(hasher, texts)
            segments = seg_batch.forward(params.feature_table)
            slot_segments = segments[: 3 * b]
            triple_segments = segments[3 * b : 4 * b]
            label_segments = segments[4 * b : 4 * b + m]
            desc_segments = segments[4 * b + m :]

            u = np.concatenate(
                [slot_segments, np.tile(triple_segments, (3, 1))], axis=1
            )  # (3b, 2h)
            z_slots = u @ params.slot_projection
            o_hat, o_norms = _normalize_rows(z_slots)

            v = np.concatenate([label_segments, desc_segments], axis=1)  # (m, 2h)
            z_entries = v @ params.entry_projection
            k_hat, k_norms = _normalize_rows(z_entries)

            d_o_hat = np.zeros_like(o_hat)
            d_k_hat = np.zeros_like(k_hat)
            d_tau_total = 0.0
            terms = 3 * b

            for slot_block, pool, positives in (
                (0, subj_pool, [f.subject_id for f in batch_facts]),
                (1, pred_pool, [f.predicate_id for f in batch_facts]),
                (2, obj_pool, [f.object_id for f in batch_facts]),
            ):
                rows = slot_block * b + np.arange(b)
                pool_rows = np.array([row_of[eid] for eid in pool])
                pool_index = {eid: j for j, eid in enumerate(pool)}
                pos_cols = np.array([pool_index[eid] for eid in positives])
                queries = o_hat[rows]
                keys = k_hat[pool_rows]
                sims = queries @ keys.T  # (b, |pool|)
                # positive sits inside the pool: per row,
                # loss = logsumexp(sims/tau) - sims[pos]/tau
                d_sims, loss, d_tau = _rowwise_infonce(sims, pos_cols, tau)
                epoch_loss += loss
                d_tau_total += d_tau
                d_o_hat[rows] += d_sims @ keys
                d_k_hat[pool_rows] += d_sims.T @ queries

            epoch_terms += terms
            scale = 1.0 / terms
            d_o_hat *= scale
            d_k_hat *= scale
            d_log_tau = d_tau_total * scale * tau

            # --- backward through normalization, projections, feature table
            d_z_slots = _d_normalize(o_hat, o_norms, d_o_hat)
            d_z_entries = _d_normalize(k_hat, k_norms, d_k_hat)

            d_slot_projection = u.T @ d_z_slots
            d_entry_projection = v.T @ d_z_entries
            d_u = d_z_slots @ params.slot_projection.T
            d_v = d_z_entries @ params.entry_projection.T

            d_segments = np.empty_like(segments)
            d_segments[: 3 * b] = d_u[:, :h]
            d_segments[3 * b : 4 * b] = d_u[:b, h:] + d_u[b : 2 * b, h:] + d_u[2 * b :, h:]
            d_segments[4 * b : 4 * b + m] = d_v[:, :h]
            d_segments[4 * b + m :] = d_v[:, h:]

            # --- SGD with decoupled weight decay; feature-table rows decay
            # only when touched (the table is updated sparsely)
            params.slot_projection -= lr * (d_slot_projection + wd * params.slot_projection)
            params.entry_projection -= lr * (d_entry_projection + wd * params.entry_projection)
            seg_batch.scatter_add(params.feature_table, d_segments, scale=-lr)
            touched = seg_batch.touched()
            params.feature_table[touched] *= 1.0 - lr * wd
            log_tau = max(log_tau - lr * d_log_tau, log_tau_min)

        trace.append(
            {
                "epoch": epoch,
                "mean_loss": epoch_loss / max(epoch_terms, 1),
                "tau": float(np.exp(log_tau)),
            }
        )
    return params, trace


def _rowwise_infonce(
    sims: np.ndarray, positives: np.ndarray, tau: float
) -> tuple[np.ndarray, float, float]:
    """Summed InfoNCE over rows whose positive is a pool column.

    Returns (d_loss/d_sims, total loss, d_loss/d_tau), all unscaled.
    """
    if sims.shape[0] == 0:
        return np.zeros_like(sims), 0.0, 0.0
    logits = sims / tau
    peak = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - peak)
    denom = exp.sum(axis=1, keepdims=True)
    rows = np.arange(sims.shape[0])
    log_denom = (peak + np.log(denom)).ravel()
    loss = float((log_denom - logits[rows, positives]).sum())
    weights = exp / denom
    d_sims = weights.copy()
    d_sims[rows, positives] -= 1.0
    d_sims /= tau
    pos_sims = sims[rows, positives]
    d_tau = float(((pos_sims - (weights * sims).sum(axis=1)) / (tau * tau)).sum())
    return d_sims, loss, d_tau
