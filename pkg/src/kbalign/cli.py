"""Batch pipeline driver: ingestion, extraction, dataset build, indexing,
candidate generation, pair export, training, reranking, evaluation, batch
alignment of the unaligned pool, and the curation service.

Exit codes: 0 success, 1 usage error, 2 data error.  Logs go to stderr,
data only to files.  Every run is reproducible: all randomness flows from
--seed (default 13) and outputs are byte-deterministic for fixed inputs.
"""

from __future__ import annotations

import argparse
import bz2
import gzip
import json
import logging
import sys

from . import candgen, corpus, evaluation, rerank
from .corpus import DataError

logger = logging.getLogger("kbalign")

DEFAULT_SEED = 13


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors instead of argparse's 2
        raise _UsageError(message)


def _open_maybe_compressed(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rt", encoding="utf-8")
    if str(path).endswith(".bz2"):
        return bz2.open(path, "rt", encoding="utf-8")
    return open(path, encoding="utf-8")


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise DataError(f"expected three comma-separated ratios, got {text!r}")
    return (parts[0], parts[1], parts[2])


def _parse_langs(text: str) -> frozenset[str]:
    langs = frozenset(p.strip() for p in text.split(",") if p.strip())
    unknown = langs - corpus.SUPPORTED_LANGUAGES - {corpus.UNDETERMINED}
    if unknown:
        raise DataError(f"unsupported languages: {sorted(unknown)}")
    return langs


def _queries_from_args(args) -> list[corpus.Concept]:
    if getattr(args, "concepts", None):
        return corpus.read_concepts(args.concepts)
    records = corpus.read_alignments(args.alignments)
    return [corpus.concept_from_alignment(r) for r in records]


def _gold_from_alignments(path) -> dict[str, str]:
    return {r.cui: r.qid for r in corpus.read_alignments(path)}


# --- subcommand handlers -----------------------------------------------------

def _cmd_ingest(args) -> int:
    concepts = corpus.read_concepts(args.concepts)
    entities = corpus.read_entities(args.entities)
    logger.info("ingested %d concepts, %d entities", len(concepts), len(entities))
    if args.out_concepts:
        corpus.write_concepts(concepts, args.out_concepts)
    if args.out_entities:
        corpus.write_entities(entities, args.out_entities)
    return 0


def _cmd_extract_wikidata(args) -> int:
    stats = corpus.ExtractionStats()
    languages = _parse_langs(args.languages)
    with _open_maybe_compressed(args.dump) as dump, open(
        args.out, "w", encoding="utf-8", newline="\n"
    ) as out:
        for entity in corpus.extract_wikidata_entities(
            dump, languages=languages, cui_property=args.cui_property, stats=stats
        ):
            out.write(
                json.dumps(
                    corpus.entity_to_obj(entity), ensure_ascii=False,
                    separators=(",", ":"),
                )
                + "\n"
            )
    logger.info(
        "extracted %d entities from %d records "
        "(%d unparseable, %d non-item, %d without en sitelink)",
        stats.emitted, stats.read, stats.unparseable, stats.non_item,
        stats.no_sitelink,
    )
    return 0


def _cmd_build_dataset(args) -> int:
    import os

    concepts = corpus.read_concepts(args.concepts)
    if args.vocabulary_allowlist:
        with open(args.vocabulary_allowlist, encoding="utf-8") as fh:
            allowed = {line.strip() for line in fh if line.strip()}
        concepts = [c for c in concepts if c.cui in allowed]
        logger.info("vocabulary allowlist keeps %d concepts", len(concepts))
    entities = corpus.read_entities(args.entities)
    splits = corpus.build_alignment_dataset(
        concepts, entities, ratios=_parse_ratios(args.ratios), seed=args.seed
    )
    os.makedirs(args.out_dir, exist_ok=True)
    all_records = []
    for split in splits:
        corpus.write_alignments(split.records, os.path.join(args.out_dir, f"{split.name}.jsonl"))
        all_records.extend(split.records)
        logger.info("split %s: %d records", split.name, len(split.records))
    corpus.write_alignments(
        sorted(all_records, key=lambda r: r.cui),
        os.path.join(args.out_dir, "alignments.jsonl"),
    )
    pool = corpus.unaligned_concepts(concepts, all_records)
    corpus.write_concepts(pool, os.path.join(args.out_dir, "unaligned.jsonl"))
    logger.info("%d concepts remain unaligned", len(pool))
    return 0


def _cmd_build_index(args) -> int:
    entities = corpus.read_entities(args.entities)
    fields = tuple(f.strip() for f in args.fields.split(",") if f.strip())
    index = candgen.build_index(entities, fields)
    candgen.save_index(index, args.out)
    logger.info(
        "indexed %d entities over fields %s", index.N, ",".join(index.fields)
    )
    return 0


def _generate_candidates(args, queries) -> list[candgen.CandidateList]:
    if args.method == "bm25":
        if not args.index:
            raise _UsageError("--index is required for method bm25")
        index = candgen.load_index(args.index)
        return [
            candgen.bm25_search(index, q, args.k, k1=args.bm25_k1, b=args.bm25_b)
            for q in queries
        ]
    if not args.entities:
        raise _UsageError("--entities is required for method char_tfidf")
    entities = corpus.read_entities(args.entities)
    char_index = candgen.CharNgramIndex(entities, args.ngram_min, args.ngram_max)
    return [char_index.search(q, args.k) for q in queries]


def _cmd_candidates(args) -> int:
    queries = _queries_from_args(args)
    lists = _generate_candidates(args, queries)
    candgen.write_candidates(lists, args.method, args.out)
    logger.info("wrote candidates for %d queries (method %s)", len(lists), args.method)
    return 0


def _cmd_pairs(args) -> int:
    queries = {c.cui: c for c in _queries_from_args(args)}
    entities = {e.qid: e for e in corpus.read_entities(args.entities)}
    gold: dict[str, str] = {}
    if args.gold:
        gold = _gold_from_alignments(args.gold)
    elif getattr(args, "alignments", None):
        gold = _gold_from_alignments(args.alignments)
    all_pairs = []
    for _method, cl in candgen.read_candidates(args.candidates):
        concept = queries.get(cl.cui)
        if concept is None:
            raise DataError(f"candidates refer to unknown cui {cl.cui}")
        all_pairs.extend(
            rerank.build_pairs(concept, cl, entities, gold_qid=gold.get(cl.cui))
        )
    rerank.export_pairs(all_pairs, args.out)
    logger.info("wrote %d pairs", len(all_pairs))
    return 0


def _cmd_train(args) -> int:
    pairs = rerank.load_pairs(args.pairs)
    groups = rerank.training_groups(
        pairs, negatives_per_group=args.negatives, seed=args.seed
    )
    if not groups:
        raise DataError("no trainable groups (no group has exactly one positive)")
    model = rerank.train_scorer(
        groups, epochs=args.epochs, learning_rate=args.learning_rate, seed=args.seed
    )
    rerank.save_model(model, args.out)
    logger.info(
        "trained on %d groups, final mean loss %.6f",
        len(groups), model.training_meta["final_loss"],
    )
    return 0


def _cmd_rerank(args) -> int:
    rows = candgen.read_candidates(args.candidates)
    pairs_by_cui = rerank.group_pairs(rerank.load_pairs(args.pairs))
    scorer: rerank.ScorerModel | dict[str, float]
    if args.model:
        scorer = rerank.load_model(args.model)
    elif args.scores:
        scorer = rerank.import_scores(args.scores)
    else:
        raise _UsageError("one of --model or --scores is required")
    reranked = []
    for _method, cl in rows:
        group = pairs_by_cui.get(cl.cui)
        if group is None:
            raise DataError(f"no pairs for cui {cl.cui}")
        reranked.append(rerank.score_and_rerank(scorer, cl, group))
    candgen.write_candidates(reranked, args.method_label, args.out)
    logger.info("reranked %d candidate lists", len(reranked))
    return 0


def _cmd_eval(args) -> int:
    gold = _gold_from_alignments(args.gold)
    rows = []
    for path in args.candidates:
        rows.extend(candgen.read_candidates(path))
    runs = evaluation.runs_from_candidates(rows, gold)
    ks = tuple(int(k) for k in args.ks.split(","))
    metrics = evaluation.evaluate_run(
        runs, ks, metrics_path=args.out_metrics, curve_path=args.out_curve
    )
    for m in metrics:
        logger.info(
            "%s: R@1=%.4f R@%d=%.4f (n=%d, gold retrieved for %d)",
            m.method, m.recall_at[ks[0]], ks[-1], m.recall_at[ks[-1]],
            m.n_queries, m.n_gold_retrieved,
        )
    return 0


def _cmd_align_all(args) -> int:
    queries = _queries_from_args(args)
    lists = _generate_candidates(args, queries)
    method_label = args.method
    if args.model:
        if not args.entities:
            raise _UsageError("--entities is required when reranking with --model")
        model = rerank.load_model(args.model)
        entities = {e.qid: e for e in corpus.read_entities(args.entities)}
        by_cui = {q.cui: q for q in queries}
        lists = [
            rerank.score_and_rerank(
                model, cl, rerank.build_pairs(by_cui[cl.cui], cl, entities)
            )
            if cl.candidates
            else cl
            for cl in lists
        ]
        method_label = f"{args.method}+rerank"
    candgen.write_candidates(lists, method_label, args.out)
    logger.info(
        "aligned %d concepts (top %d each, method %s)",
        len(lists), args.k, method_label,
    )
    return 0


def _cmd_serve(args) -> int:
    from . import service

    rows = candgen.read_candidates(args.candidates)
    concepts = {c.cui: c for c in corpus.read_concepts(args.concepts)}
    entities = {e.qid: e for e in corpus.read_entities(args.entities)}
    items = service.build_queue(rows, concepts, entities)
    log = service.DecisionLog(args.log)
    state = service.restore_state(items, log)
    metrics = None
    if args.metrics:
        with open(args.metrics, encoding="utf-8") as fh:
            metrics = json.load(fh)
    logger.info(
        "serving %d queue items on %s:%d (log: %s)",
        len(items), args.host, args.port, args.log,
    )
    service.serve(
        state, log, metrics=metrics, static_dir=args.static,
        host=args.host, port=args.port,
    )
    return 0


# --- parser -------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="kbalign", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    def add(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        p.add_argument("--config", help="JSON config file; explicit flags win")
        return p

    p = add("ingest", _cmd_ingest, "validate and normalize input files")
    p.add_argument("--concepts", required=True)
    p.add_argument("--entities", required=True)
    p.add_argument("--out-concepts")
    p.add_argument("--out-entities")

    p = add("extract-wikidata", _cmd_extract_wikidata,
            "stream entities out of a raw knowledge-base dump")
    p.add_argument("--dump", required=True, help="dump file (.json, .gz, or .bz2)")
    p.add_argument("--out", required=True)
    p.add_argument("--languages", default=",".join(sorted(corpus.SUPPORTED_LANGUAGES)))
    p.add_argument("--cui-property", default="P2892",
                   help="claim id carrying the CUI cross-link")

    p = add("build-dataset", _cmd_build_dataset,
            "pair cross-linked entities with concepts and split")
    p.add_argument("--concepts", required=True)
    p.add_argument("--entities", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ratios", default="0.562,0.112,0.326")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--vocabulary-allowlist",
                   help="file of CUIs; concepts outside it are dropped")

    p = add("build-index", _cmd_build_index, "build and persist the inverted index")
    p.add_argument("--entities", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fields", default="title,text,aliases")

    def add_retrieval_args(p):
        p.add_argument("--method", choices=["bm25", "char_tfidf"], default="bm25")
        p.add_argument("--k", type=int, default=candgen.DEFAULT_K)
        p.add_argument("--index", help="binary index (bm25)")
        p.add_argument("--entities", help="entities file (char_tfidf)")
        p.add_argument("--bm25-k1", type=float, default=candgen.DEFAULT_K1)
        p.add_argument("--bm25-b", type=float, default=candgen.DEFAULT_B)
        p.add_argument("--ngram-min", type=int, default=1)
        p.add_argument("--ngram-max", type=int, default=5)
        group = p.add_mutually_exclusive_group(required=True)
        group.add_argument("--concepts", help="queries as a concepts file")
        group.add_argument("--alignments", help="queries from an alignments file")

    p = add("candidates", _cmd_candidates, "generate top-k candidates per concept")
    add_retrieval_args(p)
    p.add_argument("--out", required=True)

    p = add("pairs", _cmd_pairs, "build (query, candidate) passage pairs")
    p.add_argument("--candidates", required=True)
    p.add_argument("--entities", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--concepts")
    group.add_argument("--alignments")
    p.add_argument("--gold", help="alignments file providing labels")
    p.add_argument("--out", required=True)

    p = add("train", _cmd_train, "train the built-in feature scorer")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--learning-rate", type=float, default=0.5)
    p.add_argument("--negatives", type=int,
                   help="downsample to this many negatives per group")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)

    p = add("rerank", _cmd_rerank, "reorder candidates with a model or a scores file")
    p.add_argument("--candidates", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--model", help="built-in scorer model.json")
    p.add_argument("--scores", help="external scores.jsonl")
    p.add_argument("--method-label", default="reranked")
    p.add_argument("--out", required=True)

    p = add("eval", _cmd_eval, "recall@k / normalized recall@k reports")
    p.add_argument("--candidates", action="append", required=True,
                   help="candidates file (repeatable)")
    p.add_argument("--gold", required=True, help="alignments file with gold qids")
    p.add_argument("--ks", default=",".join(str(k) for k in evaluation.DEFAULT_KS))
    p.add_argument("--out-metrics", required=True)
    p.add_argument("--out-curve", required=True)

    p = add("align-all", _cmd_align_all,
            "rank the unaligned pool and export top-k per concept")
    add_retrieval_args(p)
    p.add_argument("--model", help="rerank with this built-in model")
    p.add_argument("--out", required=True)

    p = add("serve", _cmd_serve, "run the curation service")
    p.add_argument("--candidates", required=True)
    p.add_argument("--concepts", required=True)
    p.add_argument("--entities", required=True)
    p.add_argument("--log", required=True, help="append-only decision log")
    p.add_argument("--metrics", help="metrics.json to expose at /api/metrics")
    p.add_argument("--static", help="directory of UI assets for GET /")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7860)

    return parser


def _apply_config_defaults(parser: _Parser, argv: list[str]) -> None:
    """Load --config JSON (if present) as subcommand defaults; flags win."""
    if "--config" not in argv:
        return
    at = argv.index("--config")
    if at + 1 >= len(argv):
        raise _UsageError("--config requires a path")
    with open(argv[at + 1], encoding="utf-8") as fh:
        config = json.load(fh)
    if not isinstance(config, dict):
        raise DataError("config file must hold a JSON object")
    if not argv or argv[0].startswith("-"):
        raise _UsageError("--config requires a subcommand")
    sub_actions = [
        a for a in parser._subparsers._group_actions
        if isinstance(a, argparse._SubParsersAction)
    ]
    subparser = sub_actions[0].choices.get(argv[0])
    if subparser is None:
        return
    valid = {a.dest for a in subparser._actions}
    defaults = {}
    for key, value in config.items():
        dest = key.replace("-", "_")
        if dest not in valid:
            raise DataError(f"unknown config key {key!r} for subcommand {argv[0]}")
        defaults[dest] = value
    subparser.set_defaults(**defaults)


def run_subcommand(argv: list[str]) -> int:
    parser = build_parser()
    try:
        _apply_config_defaults(parser, argv)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        if not getattr(args, "handler", None):
            parser.print_usage(sys.stderr)
            return 1
        return args.handler(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    sys.exit(run_subcommand(sys.argv[1:]))


if __name__ == "__main__":
    main()
