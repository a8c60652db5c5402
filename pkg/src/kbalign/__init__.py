"""kbalign: align an aliased medical vocabulary to a multilingual wiki-style
knowledge base.

Two-stage retrieval (lexical candidate generation, then trainable
reranking), a recall@k evaluation harness, a batch CLI, and a curation
service for human confirmation of alignments.
"""

from .corpus import (
    AliasTerm,
    AlignmentRecord,
    Concept,
    DataError,
    DatasetSplit,
    SUPPORTED_LANGUAGES,
    WikiEntity,
    build_alignment_dataset,
    extract_wikidata_entities,
    parse_concepts,
    parse_entities,
)
from .candgen import (
    CandidateList,
    CharNgramIndex,
    InvertedIndex,
    bm25_search,
    build_index,
    char_ngrams,
    char_tfidf_search,
    load_index,
    save_index,
    tokenize,
)
from .rerank import (
    FEATURE_NAMES,
    Passage,
    ScorerModel,
    TrainingPair,
    build_pairs,
    build_passage,
    extract_features,
    export_pairs,
    import_scores,
    loss,
    score_and_rerank,
    train_scorer,
)
from .evaluation import (
    Metrics,
    QueryRun,
    RunResult,
    evaluate_run,
    normalized_recall_at_k,
    recall_at_k,
)

__version__ = "0.1.0"

__all__ = [
    "AliasTerm", "AlignmentRecord", "Concept", "DataError", "DatasetSplit",
    "SUPPORTED_LANGUAGES", "WikiEntity", "build_alignment_dataset",
    "extract_wikidata_entities", "parse_concepts", "parse_entities",
    "CandidateList", "CharNgramIndex", "InvertedIndex", "bm25_search",
    "build_index", "char_ngrams", "char_tfidf_search", "load_index",
    "save_index", "tokenize",
    "FEATURE_NAMES", "Passage", "ScorerModel", "TrainingPair", "build_pairs",
    "build_passage", "extract_features", "export_pairs", "import_scores",
    "loss", "score_and_rerank", "train_scorer",
    "Metrics", "QueryRun", "RunResult", "evaluate_run",
    "normalized_recall_at_k", "recall_at_k",
]
