"""Whole-fact re-ranking over pre-ranked per-slot candidates.

Candidates are the cartesian product of the slot lists; each (OIE, fact)
pair is scored by a logistic model over fixed cross-features of the frozen
pre-ranker embeddings, trained with hard negatives drawn from each gold
entry's nearest neighbors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Alignment, OieTriple
from .encoder import Encoder
from .errors import DataError, EmptyTrainingSetError, MalformedRecordError, UnknownIdError
from .io import iter_jsonl, write_jsonl
from .kg import KgFact, KgStore
from .preranker import EmbeddingIndex, SlotLinkResult, build_store_indices

N_SLOT_EXTRAS = 3  # cosine, squared cosine, bias per slot pair


@dataclass(frozen=True)
class CandidateFact:
    """A fact assembled from per-slot candidate lists, with the rank each
    id held in its list."""

    subject_id: str
    predicate_id: str
    object_id: str
    subject_rank: int
    predicate_rank: int
    object_rank: int

    @property
    def ids(self) -> tuple[str, str, str]:
        return (self.subject_id, self.predicate_id, self.object_id)

    def to_fact(self) -> KgFact:
        return KgFact(self.subject_id, self.predicate_id, self.object_id)


def enumerate_candidates(result: SlotLinkResult) -> list[CandidateFact]:
    """Full cartesian product of the three slot lists in rank-lexicographic
    order (subject rank major)."""
    return [
        CandidateFact(
            subject_id=s_id,
            predicate_id=p_id,
            object_id=o_id,
            subject_rank=s_rank,
            predicate_rank=p_rank,
            object_rank=o_rank,
        )
        for (s_rank, (s_id, _)), (p_rank, (p_id, _)), (o_rank, (o_id, _)) in product(
            enumerate(result.subject), enumerate(result.relation), enumerate(result.object)
        )
    ]


@dataclass
class CrossScorerParams:
    """Logistic weights over the cross-feature vector plus a bias."""

    weights: np.ndarray  # (6*dim + 9,)
    bias: float
    seed: int = 0

    @property
    def dim(self) -> int:
        return (len(self.weights) - 3 * N_SLOT_EXTRAS) // 6


def init_cross_params(dim: int, seed: int = 0) -> CrossScorerParams:
    """Zero init: the untrained scorer outputs exactly 0.5 everywhere."""
    return CrossScorerParams(weights=np.zeros(6 * dim + 3 * N_SLOT_EXTRAS), bias=0.0, seed=seed)


def cross_features(
    encoder: Encoder,
    store: KgStore,
    triple: OieTriple,
    fact: KgFact | CandidateFact,
    mask_description: bool = False,
    with_context: bool = False,
) -> np.ndarray:
    """Per slot pair: elementwise product and absolute difference of the
    slot and entry embeddings, their cosine, its square, and a constant 1."""
    slot_embeddings = encoder.slot_embed(triple, with_context)
    ids = (fact.subject_id, fact.predicate_id, fact.object_id)
    blocks = []
    for slot_embedding, entry_id in zip(slot_embeddings, ids):
        entry_embedding = encoder.entry_embed(store.entry(entry_id), mask_description)
        cosine = float(slot_embedding @ entry_embedding)
        blocks.append(slot_embedding * entry_embedding)
        blocks.append(np.abs(slot_embedding - entry_embedding))
        blocks.append(np.array([cosine, cosine * cosine, 1.0]))
    return np.concatenate(blocks)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


def score_fact(
    params: CrossScorerParams,
    encoder: Encoder,
    store: KgStore,
    triple: OieTriple,
    fact: KgFact | CandidateFact,
    mask_description: bool = False,
    with_context: bool = False,
) -> float:
    """Sigmoid-normalized similarity of a whole OIE/fact pair, in (0, 1)."""
    features = cross_features(encoder, store, triple, fact, mask_description, with_context)
    return _sigmoid(float(params.weights @ features) + params.bias)


def bce_loss(logit: float, label: float) -> float:
    """Binary cross-entropy of sigmoid(logit) against the label, computed
    without forming the sigmoid."""
    return float(max(logit, 0.0) - logit * label + np.log1p(np.exp(-abs(logit))))


def bce_grad(logit: float, label: float) -> float:
    """d bce_loss / d logit = sigmoid(logit) - label."""
    return _sigmoid(logit) - label


def rerank(
    params: CrossScorerParams,
    encoder: Encoder,
    store: KgStore,
    triple: OieTriple,
    candidates: Sequence[CandidateFact],
    with_context: bool = False,
) -> tuple[CandidateFact, list[float]]:
    """Highest-scoring candidate; ties keep the earliest (rank-lexicographic)
    candidate."""
    if not candidates:
        raise DataError("rerank needs at least one candidate")
    scores = [
        score_fact(params, encoder, store, triple, c, with_context=with_context)
        for c in candidates
    ]
    best = max(range(len(candidates)), key=lambda i: (scores[i], -i))
    return candidates[best], scores


# ---------------------------------------------------------------------------
# Hard negatives


def build_neighbor_lists(index: EmbeddingIndex, pool: int = 10) -> dict[str, tuple[str, ...]]:
    """Top-``pool`` most similar same-kind entries per entry, self excluded.

    Computed once from the frozen pre-ranker embeddings.
    """
    n = len(index)
    neighbors: dict[str, tuple[str, ...]] = {}
    if n == 0:
        return neighbors
    matrix = index.matrix
    ids = index.ids
    chunk = 512
    for start in range(0, n, chunk):
        block = matrix[start : start + chunk]
        sims = block @ matrix.T  # (chunk, n)
        for row in range(block.shape[0]):
            i = start + row
            order = np.lexsort((index._ids_array, -sims[row]))
            picked = [ids[j] for j in order if j != i][:pool]
            neighbors[ids[i]] = tuple(picked)
    return neighbors


def sample_hard_negative(
    fact: KgFact,
    neighbor_lists: dict[str, tuple[str, ...]],
    rng: np.random.Generator,
) -> KgFact:
    """Corrupt exactly one uniformly chosen slot of the fact, replacing its
    entry with a uniform draw from that entry's same-kind neighbor list."""
    slot = int(rng.integers(3))
    entry_id = fact.ids[slot]
    pool = neighbor_lists.get(entry_id, ())
    pool = tuple(candidate for candidate in pool if candidate != entry_id)
    if not pool:
        raise DataError(f"entry {entry_id!r} has no neighbors to corrupt with")
    replacement = pool[int(rng.integers(len(pool)))]
    ids = list(fact.ids)
    ids[slot] = replacement
    return KgFact(*ids)


# ---------------------------------------------------------------------------
# Training


@dataclass
class RerankTrainConfig:
    epochs: int = 10
    learning_rate: float = 5e-5
    weight_decay: float = 1e-3
    hard_negative_pool: int = 10
    description_mask_prob: float = 0.5
    negatives_per_positive: int = 3
    with_context: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.learning_rate <= 0:
            raise ValueError("epochs and learning_rate must be positive")
        if not 0.0 <= self.description_mask_prob <= 1.0:
            raise ValueError("description_mask_prob must be in [0, 1]")
        if self.negatives_per_positive < 0 or self.hard_negative_pool < 1:
            raise ValueError("invalid negative sampling configuration")


def train_reranker(
    alignments: Sequence[Alignment],
    encoder: Encoder,
    store: KgStore,
    config: RerankTrainConfig,
    initial_params: CrossScorerParams | None = None,
) -> tuple[CrossScorerParams, list[dict]]:
    """Binary cross-entropy training: gold pairs are positives, one-slot
    corruptions from top-k neighbor lists are negatives; each scored pair
    masks entry descriptions independently with the configured probability.
    Plain SGD with decoupled weight decay; returns params and a per-epoch
    {epoch, mean_loss} trace.
    """
    if not alignments:
        raise EmptyTrainingSetError("no training alignments")
    for alignment in alignments:
        for entry_id in alignment.fact.ids:
            if entry_id not in store:
                raise UnknownIdError(f"alignment fact references unknown id {entry_id!r}")

    entity_index, predicate_index = build_store_indices(encoder, store)
    neighbor_lists = build_neighbor_lists(entity_index, config.hard_negative_pool)
    neighbor_lists.update(build_neighbor_lists(predicate_index, config.hard_negative_pool))

    params = (
        CrossScorerParams(initial_params.weights.copy(), initial_params.bias, initial_params.seed)
        if initial_params is not None
        else init_cross_params(encoder.dim, config.seed)
    )
    rng = np.random.default_rng(config.seed)
    lr = config.learning_rate
    wd = config.weight_decay
    trace: list[dict] = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(alignments))
        epoch_loss = 0.0
        n_pairs = 0
        for i in order:
            alignment = alignments[i]
            pairs: list[tuple[KgFact, float]] = [(alignment.fact, 1.0)]
            for _ in range(config.negatives_per_positive):
                pairs.append(
                    (sample_hard_negative(alignment.fact, neighbor_lists, rng), 0.0)
                )
            for fact, label in pairs:
                masked = bool(rng.random() < config.description_mask_prob)
                features = cross_features(
                    encoder, store, alignment.oie, fact, masked, config.with_context
                )
                logit = float(params.weights @ features) + params.bias
                epoch_loss += bce_loss(logit, label)
                n_pairs += 1
                d_logit = bce_grad(logit, label)
                params.weights -= lr * (d_logit * features + wd * params.weights)
                params.bias -= lr * d_logit
        trace.append({"epoch": epoch, "mean_loss": epoch_loss / max(n_pairs, 1)})
    return params, trace


# ---------------------------------------------------------------------------
# Persistence: one JSON header line {dim, seed}, then little-endian float32
# weights followed by the bias.


def save_cross_params(params: CrossScorerParams, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"dim": params.dim, "seed": params.seed}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode())
        fh.write(np.ascontiguousarray(params.weights, dtype="<f4").tobytes())
        fh.write(struct.pack("<f", params.bias))


def load_cross_params(path: str | Path) -> CrossScorerParams:
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise MalformedRecordError(f"{path}: bad scorer header") from exc
        payload = fh.read()
    dim = int(header["dim"])
    n_weights = 6 * dim + 3 * N_SLOT_EXTRAS
    if len(payload) != (n_weights + 1) * 4:
        raise MalformedRecordError(f"{path}: truncated scorer payload")
    weights = np.frombuffer(payload[: n_weights * 4], dtype="<f4").astype(np.float64)
    (bias,) = struct.unpack("<f", payload[n_weights * 4 :])
    return CrossScorerParams(weights=weights, bias=float(bias), seed=int(header.get("seed", 0)))


def write_neighbor_lists(
    path: str | Path, neighbor_lists: dict[str, tuple[str, ...]], header: dict | None = None
) -> None:
    write_jsonl(
        path,
        ({"id": eid, "neighbors": list(ns)} for eid, ns in sorted(neighbor_lists.items())),
        header=header,
    )


def read_neighbor_lists(path: str | Path) -> dict[str, tuple[str, ...]]:
    out: dict[str, tuple[str, ...]] = {}
    for line_number, record in iter_jsonl(path):
        if "id" not in record or "neighbors" not in record:
            raise MalformedRecordError("neighbor record needs id and neighbors", line_number)
        out[str(record["id"])] = tuple(str(n) for n in record["neighbors"])
    return out
