"""Out-of-KG detection: decide per OIE slot whether its referent exists in
the store, via top-1 confidence, entropy, or a query-key-value
cross-attention head over frozen pre-ranker embeddings."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .corpus import Alignment, alignment_uid
from .encoder import Encoder
from .errors import DataError, EmptyKeySetError, EmptyTrainingSetError, UnknownIdError
from .kg import KgStore
from .preranker import EmbeddingIndex, IndexKind, build_index, embed_entries, topk

TOP_SUPPORT = 5  # fixed support for the confidence and entropy heuristics

DEFAULT_CONFIDENCE_THRESHOLDS = (0.235, 0.260, 0.235)
DEFAULT_ENTROPY_THRESHOLDS = (1.60, 1.58, 1.60)
DEFAULT_ATTENTION_THRESHOLD = 0.3


class Decision(enum.Enum):
    IN_KG = "in-kg"
    OUT_OF_KG = "out-of-kg"


@dataclass(frozen=True)
class OokgThresholds:
    """Per-slot decision thresholds: confidence and entropy are per-slot
    triples (subject, relation, object); attention is one shared value."""

    confidence: tuple[float, float, float] = DEFAULT_CONFIDENCE_THRESHOLDS
    entropy: tuple[float, float, float] = DEFAULT_ENTROPY_THRESHOLDS
    attention: float = DEFAULT_ATTENTION_THRESHOLD

    def __post_init__(self):
        if not all(0.0 < t < 1.0 for t in self.confidence):
            raise ValueError("confidence thresholds must lie in (0, 1)")
        max_entropy = float(np.log(TOP_SUPPORT))
        if not all(0.0 <= t <= max_entropy for t in self.entropy):
            raise ValueError(f"entropy thresholds must lie in [0, ln {TOP_SUPPORT}]")


def topk_softmax(sims: Sequence[float]) -> np.ndarray:
    """Plain softmax (no temperature) over the top similarities."""
    sims = np.asarray(sims, dtype=np.float64)
    if sims.size == 0:
        raise EmptyKeySetError("softmax needs at least one similarity")
    shifted = sims - sims.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def confidence_detect(
    probs: Sequence[float], slot_index: int, thresholds: OokgThresholds
) -> Decision:
    """Out-of-KG iff the top-1 confidence is strictly below the slot's
    threshold; a statistic exactly at the threshold counts as in-KG."""
    top1 = float(np.max(probs))
    return Decision.OUT_OF_KG if top1 < thresholds.confidence[slot_index] else Decision.IN_KG


def entropy(probs: Sequence[float]) -> float:
    """Shannon entropy in nats, with 0*log(0) = 0."""
    p = np.asarray(probs, dtype=np.float64)
    nonzero = p[p > 0]
    return float(-(nonzero * np.log(nonzero)).sum())


def entropy_detect(h: float, slot_index: int, thresholds: OokgThresholds) -> Decision:
    """Out-of-KG iff the entropy is strictly above the slot's threshold."""
    return Decision.OUT_OF_KG if h > thresholds.entropy[slot_index] else Decision.IN_KG


# ---------------------------------------------------------------------------
# Query-key-value cross-attention head


@dataclass
class QkvParams:
    """Identity-initialized attention head: at initialization the score is
    a deterministic function of the raw embedding cosines."""

    q_proj: np.ndarray
    k_proj: np.ndarray
    v_proj: np.ndarray
    scale: float = 1.0
    bias: float = 0.0

    @classmethod
    def identity(cls, dim: int) -> "QkvParams":
        return cls(q_proj=np.eye(dim), k_proj=np.eye(dim), v_proj=np.eye(dim))

    @property
    def dim(self) -> int:
        return int(self.q_proj.shape[0])

    def copy(self) -> "QkvParams":
        return QkvParams(
            self.q_proj.copy(), self.k_proj.copy(), self.v_proj.copy(), self.scale, self.bias
        )


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


def _qkv_forward(params: QkvParams, query: np.ndarray, keys: np.ndarray) -> dict:
    d = params.dim
    q_projected = params.q_proj @ query
    k_projected = keys @ params.k_proj.T
    logits = (k_projected @ q_projected) / np.sqrt(d)
    attention = topk_softmax(logits)
    mean_key = attention @ keys
    context = params.v_proj @ mean_key
    inner = float(query @ context)
    logit = params.scale * inner + params.bias
    return {
        "q_projected": q_projected,
        "k_projected": k_projected,
        "attention": attention,
        "mean_key": mean_key,
        "context": context,
        "inner": inner,
        "logit": logit,
    }


def qkv_score(params: QkvParams, query: np.ndarray, keys: Sequence[np.ndarray]) -> float:
    """Attention of the projected query over projected keys, pooled over
    value-projected keys; score = sigmoid(scale * (query . context) + bias)."""
    key_matrix = np.asarray(keys, dtype=np.float64)
    if key_matrix.size == 0:
        raise EmptyKeySetError("qkv_score needs at least one key")
    state = _qkv_forward(params, np.asarray(query, dtype=np.float64), key_matrix)
    return _sigmoid(state["logit"])


@dataclass
class QkvTrainConfig:
    epochs: int = 10
    learning_rate: float = 5e-5
    weight_decay: float = 0.0
    subset_size: int = 64
    gold_drop_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.learning_rate <= 0 or self.subset_size < 1:
            raise ValueError("epochs, learning_rate and subset_size must be positive")
        if not 0.0 <= self.gold_drop_prob <= 1.0:
            raise ValueError("gold_drop_prob must be in [0, 1]")


def train_qkv(
    alignments: Sequence[Alignment],
    encoder: Encoder,
    store: KgStore,
    config: QkvTrainConfig,
    initial_params: QkvParams | None = None,
) -> tuple[QkvParams, list[dict]]:
    """Train the attention head with binary cross-entropy.

    Per alignment and slot, a key subset of the matching kind is sampled
    from the store: the gold entry is dropped with the configured
    probability (label 0) or kept (label 1), the remainder filled with
    uniformly drawn non-matching entries.
    """
    if not alignments:
        raise EmptyTrainingSetError("no calibration alignments")
    for alignment in alignments:
        for entry_id in alignment.fact.ids:
            if entry_id not in store:
                raise UnknownIdError(f"alignment fact references unknown id {entry_id!r}")

    params = initial_params.copy() if initial_params is not None else QkvParams.identity(
        encoder.dim
    )
    rng = np.random.default_rng(config.seed)
    entity_ids = np.array(store.entity_ids(), dtype=object)
    predicate_ids = np.array(store.predicate_ids(), dtype=object)
    d = params.dim
    sqrt_d = np.sqrt(d)
    lr = config.learning_rate
    wd = config.weight_decay
    trace: list[dict] = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(alignments))
        epoch_loss = 0.0
        n_examples = 0
        for i in order:
            alignment = alignments[i]
            queries = encoder.slot_embed(alignment.oie)
            gold_ids = alignment.fact.ids
            for slot in range(3):
                inventory = predicate_ids if slot == 1 else entity_ids
                keep_gold = bool(rng.random() >= config.gold_drop_prob)
                others = inventory[inventory != gold_ids[slot]]
                fill = config.subset_size - (1 if keep_gold else 0)
                fill = min(fill, len(others))
                chosen = others[rng.choice(len(others), size=fill, replace=False)]
                subset = ([gold_ids[slot]] if keep_gold else []) + list(chosen)
                keys = np.stack(
                    [encoder.entry_embed(store.entry(eid)) for eid in subset]
                )
                label = 1.0 if keep_gold else 0.0

                query = queries[slot]
                state = _qkv_forward(params, query, keys)
                score = _sigmoid(state["logit"])
                logit = state["logit"]
                epoch_loss += float(
                    max(logit, 0.0) - logit * label + np.log1p(np.exp(-abs(logit)))
                )
                n_examples += 1

                # backward
                d_logit = score - label
                d_scale = d_logit * state["inner"]
                d_bias = d_logit
                d_context = (d_logit * params.scale) * query
                d_v = np.outer(d_context, state["mean_key"])
                d_mean_key = params.v_proj.T @ d_context
                d_attention = keys @ d_mean_key
                a = state["attention"]
                d_logits = a * (d_attention - float(a @ d_attention))
                d_q_projected = (state["k_projected"].T @ d_logits) / sqrt_d
                d_k_projected = np.outer(d_logits, state["q_projected"]) / sqrt_d
                d_q = np.outer(d_q_projected, query)
                d_k = d_k_projected.T @ keys

                params.q_proj -= lr * (d_q + wd * params.q_proj)
                params.k_proj -= lr * (d_k + wd * params.k_proj)
                params.v_proj -= lr * (d_v + wd * params.v_proj)
                params.scale -= lr * d_scale
                params.bias -= lr * d_bias
        trace.append({"epoch": epoch, "mean_loss": epoch_loss / max(n_examples, 1)})
    return params, trace


# ---------------------------------------------------------------------------
# Persistence


def save_qkv_params(params: QkvParams, path, header_extra: dict | None = None) -> None:
    """One JSON header line {dim, scale, bias}, then raw little-endian
    float64 Q, K, V blocks."""
    import json
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": "qkv-attention", "dim": params.dim,
              "scale": params.scale, "bias": params.bias}
    if header_extra:
        header.update(header_extra)
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode())
        for block in (params.q_proj, params.k_proj, params.v_proj):
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_qkv_params(path) -> QkvParams:
    import json

    from .errors import MalformedRecordError

    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "qkv-attention":
            raise MalformedRecordError(f"{path}: not a qkv params file")
        d = int(header["dim"])
        payload = fh.read()
    if len(payload) != 3 * d * d * 8:
        raise MalformedRecordError(f"{path}: truncated qkv payload")
    flat = np.frombuffer(payload, dtype="<f8")
    blocks = flat.reshape(3, d, d)
    return QkvParams(
        q_proj=blocks[0].copy(), k_proj=blocks[1].copy(), v_proj=blocks[2].copy(),
        scale=float(header["scale"]), bias=float(header["bias"]),
    )


def thresholds_record(thresholds: OokgThresholds, grid_metadata: dict | None = None) -> dict:
    """Nine threshold values (attention replicated per slot) plus grid
    metadata."""
    return {
        "confidence": list(thresholds.confidence),
        "entropy": list(thresholds.entropy),
        "attention": [thresholds.attention] * 3,
        "grid": grid_metadata or {},
    }


def thresholds_from_record(record: dict) -> OokgThresholds:
    return OokgThresholds(
        confidence=tuple(record["confidence"]),
        entropy=tuple(record["entropy"]),
        attention=float(record["attention"][0])
        if isinstance(record["attention"], list)
        else float(record["attention"]),
    )


# ---------------------------------------------------------------------------
# Threshold calibration


def detection_accuracy(
    statistics: Sequence[float],
    is_out: Sequence[bool],
    threshold: float,
    out_when: str,
) -> float:
    """Accuracy averaged over the two scenario classes; a statistic exactly
    at the threshold decides in-KG."""
    stats = np.asarray(statistics, dtype=np.float64)
    labels = np.asarray(is_out, dtype=bool)
    if out_when == "below":
        decided_out = stats < threshold
    elif out_when == "above":
        decided_out = stats > threshold
    else:
        raise ValueError("out_when must be 'below' or 'above'")
    accuracies = []
    for cls in (True, False):
        mask = labels == cls
        if not mask.any():
            raise DataError("calibration needs samples from both scenario classes")
        accuracies.append(float((decided_out[mask] == cls).mean()))
    return float(np.mean(accuracies))


def calibrate_threshold(
    statistics: Sequence[float],
    is_out: Sequence[bool],
    out_when: str,
    grid_size: int = 200,
) -> float:
    """Pick, from an evenly spaced grid between the observed statistic
    extremes, the threshold maximizing scenario-averaged accuracy; ties go
    to the smallest threshold."""
    stats = np.asarray(statistics, dtype=np.float64)
    if stats.size == 0:
        raise DataError("no calibration statistics")
    if grid_size < 1:
        raise ValueError("grid_size must be >= 1")
    grid = np.linspace(stats.min(), stats.max(), grid_size)
    best_threshold = float(grid[0])
    best_accuracy = -1.0
    for candidate in grid:
        accuracy = detection_accuracy(stats, is_out, float(candidate), out_when)
        if accuracy > best_accuracy:
            best_accuracy = accuracy
            best_threshold = float(candidate)
    return best_threshold


# ---------------------------------------------------------------------------
# Detectors and the add/remove evaluation protocol


class OokgDetector(Protocol):
    """Per-slot decision given the slot's query embedding and the index of
    the matching kind. ``gold_id`` identifies the slot's reference entry so
    oracle-style instrumentation is expressible; real detectors ignore it."""

    def decide(
        self, query: np.ndarray, index: EmbeddingIndex, slot: int, gold_id: str
    ) -> tuple[Decision, float]: ...


class ConfidenceDetector:
    def __init__(self, thresholds: OokgThresholds | None = None):
        self.thresholds = thresholds or OokgThresholds()

    def decide(self, query, index, slot, gold_id):
        sims = [score for _, score in topk(index, query, TOP_SUPPORT)]
        if not sims:  # an empty store variant cannot contain the referent
            return Decision.OUT_OF_KG, 0.0
        probs = topk_softmax(sims)
        top1 = float(probs.max())
        return confidence_detect(probs, slot, self.thresholds), top1


class EntropyDetector:
    def __init__(self, thresholds: OokgThresholds | None = None):
        self.thresholds = thresholds or OokgThresholds()

    def decide(self, query, index, slot, gold_id):
        sims = [score for _, score in topk(index, query, TOP_SUPPORT)]
        if not sims:  # an empty store variant cannot contain the referent
            return Decision.OUT_OF_KG, float(np.log(TOP_SUPPORT))
        h = entropy(topk_softmax(sims))
        return entropy_detect(h, slot, self.thresholds), h


class QkvDetector:
    """Attends over the top-``key_pool`` pre-ranked entries of the index."""

    def __init__(
        self,
        params: QkvParams,
        thresholds: OokgThresholds | None = None,
        key_pool: int = 64,
    ):
        self.params = params
        self.thresholds = thresholds or OokgThresholds()
        self.key_pool = key_pool

    def decide(self, query, index, slot, gold_id):
        top = topk(index, query, self.key_pool)
        if not top:  # an empty store variant cannot contain the referent
            return Decision.OUT_OF_KG, 0.0
        keys = index.matrix[[index.row(i) for i, _ in top]].astype(np.float64)
        score = qkv_score(self.params, query, keys)
        decision = Decision.OUT_OF_KG if score < self.thresholds.attention else Decision.IN_KG
        return decision, score


class RandomDetector:
    """Fair coin per slot decision."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def decide(self, query, index, slot, gold_id):
        out = bool(self.rng.integers(2))
        return (Decision.OUT_OF_KG if out else Decision.IN_KG), 0.5


class ConstantDetector:
    def __init__(self, decision: Decision):
        self.decision = decision

    def decide(self, query, index, slot, gold_id):
        return self.decision, 1.0 if self.decision is Decision.IN_KG else 0.0


@dataclass
class OokgReport:
    """Scenario-averaged detection accuracy per slot and for whole facts."""

    slot_accuracy: tuple[float, float, float]
    fact_accuracy: float
    trials_per_scenario: int
    records: list[dict] = field(default_factory=list, repr=False)


def _index_without(
    embeddings: list[tuple[str, np.ndarray]], excluded: set[str], kind: IndexKind
) -> EmbeddingIndex:
    return build_index([(i, v) for i, v in embeddings if i not in excluded], kind)


def ookg_evaluate(
    detector: OokgDetector,
    alignments: Sequence[Alignment],
    store: KgStore,
    encoder: Encoder,
    with_context: bool = False,
    collect_records: bool = False,
) -> OokgReport:
    """Run the paired imputed/removed protocol.

    Two index variants are built per evaluation batch: one with the batch's
    gold entries present (a hit is an in-KG decision) and one with all of
    them absent (a hit is an out-of-KG decision). Slot accuracy averages
    the two scenario trial sets; fact accuracy requires all three slot
    decisions correct within a trial.
    """
    if not alignments:
        raise DataError("no alignments to evaluate")
    entity_embeddings = embed_entries(encoder, (store.entry(i) for i in store.entity_ids()))
    predicate_embeddings = embed_entries(
        encoder, (store.entry(i) for i in store.predicate_ids())
    )
    gold_entities: set[str] = set()
    gold_predicates: set[str] = set()
    for alignment in alignments:
        fact = alignment.fact
        for entry_id in (fact.subject_id, fact.object_id):
            if entry_id not in store:
                raise UnknownIdError(f"gold entity {entry_id!r} missing from store")
            gold_entities.add(entry_id)
        if fact.predicate_id not in store:
            raise UnknownIdError(f"gold predicate {fact.predicate_id!r} missing from store")
        gold_predicates.add(fact.predicate_id)

    variants = {
        "imputed": (
            build_index(entity_embeddings, IndexKind.ENTITIES),
            build_index(predicate_embeddings, IndexKind.PREDICATES),
        ),
        "removed": (
            _index_without(entity_embeddings, gold_entities, IndexKind.ENTITIES),
            _index_without(predicate_embeddings, gold_predicates, IndexKind.PREDICATES),
        ),
    }

    slot_hits = np.zeros(3)
    fact_hits = 0.0
    records: list[dict] = []
    for scenario, (entity_index, predicate_index) in variants.items():
        expect_out = scenario == "removed"
        for alignment in alignments:
            queries = encoder.slot_embed(alignment.oie, with_context)
            gold_ids = alignment.fact.ids
            all_correct = True
            for slot in range(3):
                index = predicate_index if slot == 1 else entity_index
                decision, statistic = detector.decide(
                    queries[slot], index, slot, gold_ids[slot]
                )
                correct = (decision is Decision.OUT_OF_KG) == expect_out
                slot_hits[slot] += correct
                all_correct &= correct
                if collect_records:
                    records.append(
                        {
                            "alignment_id": alignment_uid(alignment),
                            "slot": ("subject", "relation", "object")[slot],
                            "scenario": scenario,
                            "decision": decision.value,
                            "statistic": statistic,
                        }
                    )
            fact_hits += all_correct

    n_trials = 2 * len(alignments)
    return OokgReport(
        slot_accuracy=tuple(slot_hits / n_trials),
        fact_accuracy=fact_hits / n_trials,
        trials_per_scenario=len(alignments),
        records=records,
    )


def collect_statistics(
    alignments: Sequence[Alignment],
    store: KgStore,
    encoder: Encoder,
    with_context: bool = False,
) -> dict:
    """Per-slot (statistic, is_out) calibration samples from the paired
    imputed/removed protocol, for both the confidence and entropy
    statistics."""
    samples = {
        "confidence": [([], []) for _ in range(3)],
        "entropy": [([], []) for _ in range(3)],
    }

    class _Collector:
        def decide(self, query, index, slot, gold_id):
            sims = [score for _, score in topk(index, query, TOP_SUPPORT)]
            if sims:
                probs = topk_softmax(sims)
                top1, h = float(probs.max()), entropy(probs)
            else:
                top1, h = 0.0, float(np.log(TOP_SUPPORT))
            samples["confidence"][slot][0].append(top1)
            samples["entropy"][slot][0].append(h)
            return Decision.IN_KG, top1

    # run the protocol once; scenario labels arrive through the records
    report = ookg_evaluate(
        _Collector(), alignments, store, encoder, with_context, collect_records=True
    )
    for record in report.records:
        slot = ("subject", "relation", "object").index(record["slot"])
        is_out = record["scenario"] == "removed"
        samples["confidence"][slot][1].append(is_out)
        samples["entropy"][slot][1].append(is_out)
    return samples


def calibrate_all_thresholds(
    alignments: Sequence[Alignment],
    store: KgStore,
    encoder: Encoder,
    attention: float = DEFAULT_ATTENTION_THRESHOLD,
    grid_size: int = 200,
    with_context: bool = False,
) -> tuple[OokgThresholds, dict]:
    """Grid-calibrate per-slot confidence and entropy thresholds on a
    hold-out set; returns thresholds plus grid metadata."""
    samples = collect_statistics(alignments, store, encoder, with_context)
    confidence = []
    entropy_thresholds = []
    ranges: dict = {"grid_size": grid_size, "statistic_ranges": {}}
    for slot in range(3):
        stats_c, labels_c = samples["confidence"][slot]
        stats_e, labels_e = samples["entropy"][slot]
        confidence.append(calibrate_threshold(stats_c, labels_c, "below", grid_size))
        entropy_thresholds.append(
            min(calibrate_threshold(stats_e, labels_e, "above", grid_size),
                float(np.log(TOP_SUPPORT)))
        )
        ranges["statistic_ranges"][f"confidence[{slot}]"] = [
            float(np.min(stats_c)), float(np.max(stats_c))
        ]
        ranges["statistic_ranges"][f"entropy[{slot}]"] = [
            float(np.min(stats_e)), float(np.max(stats_e))
        ]
    thresholds = OokgThresholds(
        confidence=tuple(np.clip(confidence, 1e-9, 1 - 1e-9)),
        entropy=tuple(entropy_thresholds),
        attention=attention,
    )
    return thresholds, ranges
