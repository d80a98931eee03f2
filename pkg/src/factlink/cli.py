"""Command-line pipeline: benchmark construction, training, indexing,
linking, evaluation and out-of-KG detection.

Configuration lives in one JSON document (``--config`` or the
FACTLINK_CONFIG environment variable); any key is overridable with
``--set section.key=value``, flags win over the file. Every artifact file
carries a {tool_version, config_hash, seed} header; re-running a stage
with an identical resolved config reproduces identical bytes.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .corpus import align, augment_aliases, read_alignments, read_oie_file, read_pairs_file, remove_leakage, write_alignments
from .encoder import EncoderConfig, ReferenceEncoder, load_params, save_params
from .errors import DataError, FactLinkError, NumericError
from .evalkit import (
    emit_report,
    evaluate_linker,
    frequency_baseline,
    random_baseline,
    report_records,
)
from .io import canonical_json, write_jsonl
from .kg import filter_by_frequency, load_kg, restrict_to_benchmark
from .ookg import (
    ConfidenceDetector,
    ConstantDetector,
    Decision,
    EntropyDetector,
    OokgThresholds,
    QkvDetector,
    QkvTrainConfig,
    RandomDetector,
    calibrate_all_thresholds,
    load_qkv_params,
    ookg_evaluate,
    save_qkv_params,
    thresholds_from_record,
    thresholds_record,
    train_qkv,
)
from .preranker import (
    PrerankTrainConfig,
    build_store_indices,
    link,
    load_index,
    save_index,
    train_preranker,
)
from .reranker import (
    RerankTrainConfig,
    build_neighbor_lists,
    enumerate_candidates,
    load_cross_params,
    rerank,
    save_cross_params,
    train_reranker,
    write_neighbor_lists,
)
from .rng import stream_seed
from .splits import InductiveMode, SplitKind, SplitSpec, build_split

log = logging.getLogger("factlink")

FACETS = {
    "transductive": SplitKind.TRANSDUCTIVE,
    "inductive": SplitKind.INDUCTIVE,
    "polysemous": SplitKind.POLYSEMOUS,
    "out-of-kg": SplitKind.OUT_OF_KG,
}

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "out",
    "case_fold": False,
    "kg_min_count": 0,
    "augment": True,
    "inductive_mode": "any-entity-unseen",
    "store_variant": "brkg",
    "encoder": {"dim": 200, "hidden": 64, "buckets": 2**18},
    "preranker": {},
    "reranker": {},
    "ookg": {},
    "rerank_k": 3,
    "with_context": False,
    "detector": "entropy",
    "link_k": 1,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _deep_update(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def load_config(path: str | None, overrides: list[str]) -> dict:
    config = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    path = path or os.environ.get("FACTLINK_CONFIG")
    if path:
        if not Path(path).exists():
            raise DataError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            _deep_update(config, json.load(fh))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target = config
        *parents, leaf = dotted.split(".")
        for parent in parents:
            target = target.setdefault(parent, {})
        target[leaf] = value
    return config


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:16]


def artifact_header(config: dict) -> dict:
    return {
        "tool_version": __version__,
        "config_hash": config_hash(config),
        "seed": config["seed"],
    }


def _require(config: dict, *keys: str) -> list:
    values = []
    for key in keys:
        if key not in config or config[key] is None:
            raise DataError(f"config key {key!r} is required for this command")
        values.append(config[key])
    return values


def _require_paths(config: dict, *keys: str) -> list[Path]:
    paths = []
    for key, value in zip(keys, _require(config, *keys)):
        path = Path(value)
        if not path.exists():
            raise DataError(f"input path for {key!r} does not exist: {path}")
        paths.append(path)
    return paths


def _out_dir(config: dict) -> Path:
    out = Path(config["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_store(config: dict):
    entries_path, facts_path = _require_paths(config, "kg_entries", "kg_facts")
    store = load_kg(entries_path, facts_path, case_fold=config["case_fold"])
    if config.get("kg_min_count", 0) and config["kg_min_count"] > 1:
        store = filter_by_frequency(store, int(config["kg_min_count"]))
    return store


def _store_variant(config: dict, store, alignments):
    if config["store_variant"] == "large":
        return store, "Large"
    return restrict_to_benchmark(store, alignments), "BRKG"


def _write_binary_meta(path: Path, config: dict) -> None:
    meta = artifact_header(config)
    with open(path.with_suffix(path.suffix + ".meta.json"), "w", encoding="utf-8") as fh:
        fh.write(canonical_json(meta) + "\n")


def _benchmark_alignments(config: dict, store, portion: str):
    oie_path, pairs_path = _require_paths(config, f"{portion}_oie", f"{portion}_pairs")
    oies = read_oie_file(oie_path)
    pairs = read_pairs_file(pairs_path, store)
    alignments = align(oies, pairs, store)
    if config["augment"]:
        alignments = augment_aliases(alignments, store)
    return alignments


def _encoder_config(config: dict) -> EncoderConfig:
    section = config["encoder"]
    return EncoderConfig(
        dim=int(section.get("dim", 200)),
        hidden=int(section.get("hidden", 64)),
        buckets=int(section.get("buckets", 2**18)),
    )


def _load_encoder(config: dict, params_path: str | None = None) -> ReferenceEncoder:
    path = Path(params_path or Path(config["out_dir"]) / "preranker.params")
    if not path.exists():
        raise DataError(f"encoder params not found: {path} (run train-preranker first)")
    params, _tau = load_params(path)
    return ReferenceEncoder(params)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_build_benchmark(config: dict, args) -> int:
    store = _load_store(config)
    header = artifact_header(config)
    out = _out_dir(config)

    train = _benchmark_alignments(config, store, "train")
    test = _benchmark_alignments(config, store, "test")
    train = remove_leakage(train, test, case_fold=config["case_fold"])
    write_alignments(out / "alignments.jsonl", train, header=header)

    polysemy_store, _tag = _store_variant(config, store, train + test)
    mode = InductiveMode(config["inductive_mode"])
    stats_records = []
    for name, kind in FACETS.items():
        result = build_split(SplitSpec(kind, mode), test, train, polysemy_store)
        write_alignments(out / f"split-{name}.jsonl", result.alignments, header=header)
        stats_records.append({"split": name, **result.stats.to_record()})
    write_jsonl(out / "stats.jsonl", stats_records, header=header)
    log.info("benchmark written to %s (train=%d, test=%d)", out, len(train), len(test))
    print(f"alignments: {len(train)} train, {len(test)} test; splits: "
          + ", ".join(f"{r['split']}={r['# Total Samples']}" for r in stats_records))
    return 0


def cmd_split(config: dict, args) -> int:
    store = _load_store(config)
    header = artifact_header(config)
    out = _out_dir(config)
    train_path, test_path = _require_paths(config, "train_alignments", "test_alignments")
    train = read_alignments(train_path)
    test = read_alignments(test_path)
    polysemy_store, _tag = _store_variant(config, store, train + test)
    kind = FACETS[args.facet]
    result = build_split(
        SplitSpec(kind, InductiveMode(config["inductive_mode"])), test, train, polysemy_store
    )
    write_alignments(out / f"split-{args.facet}.jsonl", result.alignments, header=header)
    write_jsonl(
        out / f"split-{args.facet}.stats.jsonl",
        [{"split": args.facet, **result.stats.to_record()}],
        header=header,
    )
    print(f"{args.facet}: {result.stats.samples} alignments")
    return 0


def _train_alignments(config: dict):
    path = config.get("train_alignments") or str(Path(config["out_dir"]) / "alignments.jsonl")
    if not Path(path).exists():
        raise DataError(f"training alignments not found: {path}")
    return read_alignments(path)


def cmd_train_preranker(config: dict, args) -> int:
    store = _load_store(config)
    alignments = _train_alignments(config)
    section = dict(config["preranker"])
    section.setdefault("seed", stream_seed(config["seed"], "negatives"))
    section.setdefault("with_context", config["with_context"])
    train_config = PrerankTrainConfig(**section)
    out = _out_dir(config)
    params_path = out / "preranker.params"

    initial_params = initial_tau = None
    if args.resume:
        if not params_path.exists():
            raise DataError(f"cannot resume: {params_path} does not exist")
        initial_params, initial_tau = load_params(params_path)

    params, trace = train_preranker(
        alignments, store, train_config, _encoder_config(config),
        initial_params=initial_params, initial_tau=initial_tau,
    )
    save_params(params, params_path, tau=trace[-1]["tau"], header_extra=artifact_header(config))
    write_jsonl(out / "preranker.trace.jsonl", trace, header=artifact_header(config))
    print(f"final loss {trace[-1]['mean_loss']:.6f} tau {trace[-1]['tau']:.4f}")
    return 0


def cmd_train_reranker(config: dict, args) -> int:
    store = _load_store(config)
    alignments = _train_alignments(config)
    encoder = _load_encoder(config, config.get("preranker_params"))
    section = dict(config["reranker"])
    section.setdefault("seed", stream_seed(config["seed"], "corruption"))
    section.setdefault("with_context", config["with_context"])
    train_config = RerankTrainConfig(**section)
    out = _out_dir(config)

    params, trace = train_reranker(alignments, encoder, store, train_config)
    save_cross_params(params, out / "reranker.params")
    _write_binary_meta(out / "reranker.params", config)
    write_jsonl(out / "reranker.trace.jsonl", trace, header=artifact_header(config))
    entity_index, predicate_index = build_store_indices(encoder, store)
    neighbors = build_neighbor_lists(entity_index, train_config.hard_negative_pool)
    neighbors.update(build_neighbor_lists(predicate_index, train_config.hard_negative_pool))
    write_neighbor_lists(out / "neighbors.jsonl", neighbors, header=artifact_header(config))
    print(f"final loss {trace[-1]['mean_loss']:.6f}")
    return 0


def cmd_train_ookg(config: dict, args) -> int:
    store = _load_store(config)
    path = config.get("calibration_alignments") or str(
        Path(config["out_dir"]) / "alignments.jsonl"
    )
    if not Path(path).exists():
        raise DataError(f"calibration alignments not found: {path}")
    alignments = read_alignments(path)
    encoder = _load_encoder(config, config.get("preranker_params"))
    section = dict(config["ookg"])
    grid_size = int(section.pop("grid_size", 200))
    calibrate = bool(section.pop("calibrate_thresholds", False))
    attention_threshold = float(section.pop("attention_threshold", OokgThresholds().attention))
    section.setdefault("seed", stream_seed(config["seed"], "calibration"))
    train_config = QkvTrainConfig(**section)
    out = _out_dir(config)

    params, trace = train_qkv(alignments, encoder, store, train_config)
    save_qkv_params(params, out / "qkv.params", header_extra=artifact_header(config))
    write_jsonl(out / "qkv.trace.jsonl", trace, header=artifact_header(config))

    if calibrate:
        thresholds, grid_meta = calibrate_all_thresholds(
            alignments, store, encoder, attention=attention_threshold,
            grid_size=grid_size, with_context=config["with_context"],
        )
    else:
        thresholds, grid_meta = OokgThresholds(), {"grid_size": grid_size, "calibrated": False}
    write_jsonl(
        out / "thresholds.jsonl",
        [thresholds_record(thresholds, grid_meta)],
        header=artifact_header(config),
    )
    print(f"final loss {trace[-1]['mean_loss']:.6f}")
    return 0


def cmd_index(config: dict, args) -> int:
    store = _load_store(config)
    encoder = _load_encoder(config, config.get("preranker_params"))
    if config["store_variant"] == "brkg":
        referenced = _train_alignments(config)
        for facet in FACETS:  # the benchmark covers the test facets too
            split_path = Path(config["out_dir"]) / f"split-{facet}.jsonl"
            if split_path.exists():
                referenced = referenced + read_alignments(split_path)
        store, _tag = _store_variant(config, store, referenced)
    out = _out_dir(config)
    entity_index, predicate_index = build_store_indices(encoder, store)
    for index, name in ((entity_index, "entities"), (predicate_index, "predicates")):
        path = out / f"{name}.flix"
        save_index(index, path)
        _write_binary_meta(path, config)
    print(f"indexed {len(entity_index)} entities, {len(predicate_index)} predicates")
    return 0


def cmd_link(config: dict, args) -> int:
    store = _load_store(config)
    encoder = _load_encoder(config, config.get("preranker_params"))
    (oie_path,) = _require_paths(config, "link_oie")
    oies = read_oie_file(oie_path)
    out = _out_dir(config)
    entities_path = out / "entities.flix"
    if entities_path.exists():
        entity_index = load_index(entities_path)
        predicate_index = load_index(out / "predicates.flix")
    else:
        entity_index, predicate_index = build_store_indices(encoder, store)
    k = int(args.k if args.k is not None else config["link_k"])
    with_context = bool(config["with_context"] or args.with_context)

    def records():
        for sentence_id in sorted(oies):
            for triple in oies[sentence_id]:
                result = link(encoder, entity_index, predicate_index, triple, k, with_context)
                yield {
                    "sentence_id": sentence_id,
                    "subject": triple.subject,
                    "relation": triple.relation,
                    "object": triple.object,
                    "subject_candidates": [[i, s] for i, s in result.subject],
                    "relation_candidates": [[i, s] for i, s in result.relation],
                    "object_candidates": [[i, s] for i, s in result.object],
                }

    write_jsonl(out / "links.jsonl", records(), header=artifact_header(config))
    print(f"linked {sum(len(v) for v in oies.values())} OIE triples at k={k}")
    return 0


def _facet_alignments(config: dict, facet: str):
    path = config.get("facet_alignments") or str(
        Path(config["out_dir"]) / f"split-{facet}.jsonl"
    )
    if not Path(path).exists():
        raise DataError(f"split file not found: {path} (run build-benchmark or split)")
    return read_alignments(path)


def cmd_evaluate(config: dict, args) -> int:
    store = _load_store(config)
    test = _facet_alignments(config, args.facet)
    if not test:
        raise DataError(f"facet {args.facet!r} is empty")
    train = _train_alignments(config)
    eval_store, store_tag = _store_variant(config, store, train + test)
    with_context = bool(config["with_context"] or args.with_context)
    rerank_k = args.rerank_k if args.rerank_k is not None else config.get("rerank_k")

    if args.linker == "frequency":
        linker = frequency_baseline(train)
    elif args.linker == "random":
        linker = random_baseline(eval_store, seed=stream_seed(config["seed"], "baseline"))
    else:
        encoder = _load_encoder(config, config.get("preranker_params"))
        entity_index, predicate_index = build_store_indices(encoder, eval_store)
        if args.use_reranker:
            scorer_path = Path(config.get("reranker_params") or Path(config["out_dir"]) / "reranker.params")
            if not scorer_path.exists():
                raise DataError(f"reranker params not found: {scorer_path}")
            scorer = load_cross_params(scorer_path)
            k = int(rerank_k)
            log.info("reranking %d candidates per OIE", k**3)

            def linker(triple):
                result = link(encoder, entity_index, predicate_index, triple, k, with_context)
                best, _scores = rerank(
                    scorer, encoder, eval_store, triple,
                    enumerate_candidates(result), with_context,
                )
                return best.to_fact()

        else:

            def linker(triple):
                return link(
                    encoder, entity_index, predicate_index, triple, 1, with_context
                ).linked_fact

    report = evaluate_linker(linker, test, split=args.facet, store=store_tag)
    out = _out_dir(config)
    suffix = f"{args.facet}-{store_tag.lower()}"
    write_jsonl(out / f"report-{suffix}.jsonl", report_records(report), header=artifact_header(config))
    sys.stdout.write(emit_report(report, "table").decode("utf-8"))
    return 0


def cmd_detect(config: dict, args) -> int:
    store = _load_store(config)
    facet = args.facet or "out-of-kg"
    test = _facet_alignments(config, facet)
    if not test:
        raise DataError(f"facet {facet!r} is empty")
    encoder = _load_encoder(config, config.get("preranker_params"))
    out = _out_dir(config)

    thresholds = OokgThresholds()
    thresholds_path = Path(config.get("thresholds") or out / "thresholds.jsonl")
    if thresholds_path.exists():
        from .io import read_jsonl

        records = read_jsonl(thresholds_path)
        if records:
            thresholds = thresholds_from_record(records[0])

    name = args.detector or config["detector"]
    if name == "confidence":
        detector = ConfidenceDetector(thresholds)
    elif name == "entropy":
        detector = EntropyDetector(thresholds)
    elif name == "qkv":
        qkv_path = Path(config.get("qkv_params") or out / "qkv.params")
        if not qkv_path.exists():
            raise DataError(f"qkv params not found: {qkv_path} (run train-ookg first)")
        detector = QkvDetector(load_qkv_params(qkv_path), thresholds,
                               key_pool=int(config.get("qkv_key_pool", 64)))
    elif name == "random":
        detector = RandomDetector(seed=stream_seed(config["seed"], "detector"))
    elif name == "always-in":
        detector = ConstantDetector(Decision.IN_KG)
    else:
        raise UsageError(f"unknown detector {name!r}")

    report = ookg_evaluate(
        detector, test, store, encoder,
        with_context=bool(config["with_context"] or args.with_context),
        collect_records=True,
    )
    write_jsonl(out / f"detection-{name}.jsonl", report.records, header=artifact_header(config))
    slots = " ".join(
        f"{label}={value:.3f}"
        for label, value in zip(("subject", "relation", "object"), report.slot_accuracy)
    )
    print(f"{name}: {slots} fact={report.fact_accuracy:.3f} "
          f"(n={report.trials_per_scenario} per scenario)")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="factlink", description=__doc__)
    parser.add_argument("--config", help="path to the JSON config (or set FACTLINK_CONFIG)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (dotted paths allowed)")
    parser.add_argument("--out-dir", help="override the output directory")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("build-benchmark", help="align, augment, deduplicate and split")

    split = sub.add_parser("split", help="build one facet from alignment files")
    split.add_argument("--facet", choices=sorted(FACETS), required=True)

    train_pre = sub.add_parser("train-preranker", help="contrastive encoder training")
    train_pre.add_argument("--resume", action="store_true",
                           help="continue from existing params")

    sub.add_parser("train-reranker", help="cross-scorer training")
    sub.add_parser("train-ookg", help="qkv detector training and threshold calibration")
    sub.add_parser("index", help="build and persist entry embedding indices")

    link_cmd = sub.add_parser("link", help="per-slot retrieval for an OIE file")
    link_cmd.add_argument("--k", type=int, default=None)
    link_cmd.add_argument("--with-context", action="store_true")

    evaluate = sub.add_parser("evaluate", help="score a facet and emit a report")
    evaluate.add_argument("--facet", choices=sorted(FACETS), required=True)
    evaluate.add_argument("--linker", choices=("preranker", "frequency", "random"),
                          default="preranker")
    evaluate.add_argument("--use-reranker", action="store_true")
    evaluate.add_argument("--rerank-k", type=int, default=None)
    evaluate.add_argument("--with-context", action="store_true")

    detect = sub.add_parser("detect", help="out-of-KG detection over a facet")
    detect.add_argument("--facet", choices=sorted(FACETS), default=None)
    detect.add_argument("--detector",
                        choices=("confidence", "entropy", "qkv", "random", "always-in"),
                        default=None)
    detect.add_argument("--with-context", action="store_true")
    return parser


COMMANDS = {
    "build-benchmark": cmd_build_benchmark,
    "split": cmd_split,
    "train-preranker": cmd_train_preranker,
    "train-reranker": cmd_train_reranker,
    "train-ookg": cmd_train_ookg,
    "index": cmd_index,
    "link": cmd_link,
    "evaluate": cmd_evaluate,
    "detect": cmd_detect,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
        )
        config = load_config(args.config, args.set)
        if args.out_dir:
            config["out_dir"] = args.out_dir
        if args.seed is not None:
            config["seed"] = args.seed
        return COMMANDS[args.command](config, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except FactLinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
