"""Recall@k and normalized recall@k over retrieval runs, with report files.

Recall@k is the fraction of queries whose gold entity appears in the top k.
Normalized recall@k restricts both numerator and denominator to queries
whose gold was retrieved at all, isolating reranker quality from candidate
generation.  Gold is unique per query, so recall equals accuracy here; the
reports keep the name "recall".
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .candgen import CandidateList
from .corpus import DataError

DEFAULT_KS = (1, 2, 4, 8, 16, 32, 64)


@dataclass
class QueryRun:
    """One evaluated query: its gold entity and the ranked qids returned for it."""

    cui: str
    gold_qid: str
    ranked_qids: list[str]


@dataclass
class RunResult:
    method: str
    queries: list[QueryRun]


@dataclass
class Metrics:
    method: str
    n_queries: int
    n_gold_retrieved: int
    recall_at: dict[int, float] = field(default_factory=dict)
    normalized_recall_at: dict[int, float] = field(default_factory=dict)


def _check_ks(ks: Sequence[int]) -> None:
    if not ks:
        raise ValueError("ks must be non-empty")
    if any(k < 1 for k in ks):
        raise ValueError(f"ks must be positive: {list(ks)}")
    if any(a >= b for a, b in zip(ks, ks[1:])):
        raise ValueError(f"ks must be sorted strictly ascending: {list(ks)}")


def _gold_ranks(run: RunResult) -> list[int | None]:
    """1-based rank of the gold qid per query, None when absent from the list."""
    if not run.queries:
        raise DataError(f"run {run.method!r} has no queries")
    seen: set[str] = set()
    ranks: list[int | None] = []
    for query in run.queries:
        if query.cui in seen:
            raise DataError(f"duplicate query {query.cui} in run {run.method!r}")
        seen.add(query.cui)
        try:
            ranks.append(query.ranked_qids.index(query.gold_qid) + 1)
        except ValueError:
            ranks.append(None)
    return ranks


def recall_at_k(run: RunResult, ks: Sequence[int] = DEFAULT_KS) -> dict[int, float]:
    """recall@k = (#queries with gold in top k) / n_queries, per k."""
    _check_ks(ks)
    ranks = _gold_ranks(run)
    n = len(ranks)
    return {k: sum(1 for r in ranks if r is not None and r <= k) / n for k in ks}


def normalized_recall_at_k(
    run: RunResult, ks: Sequence[int] = DEFAULT_KS
) -> dict[int, float]:
    """recall@k over only the queries whose gold appears anywhere in their list."""
    _check_ks(ks)
    ranks = [r for r in _gold_ranks(run) if r is not None]
    if not ranks:
        raise DataError(f"no retrievable gold in run {run.method!r}")
    n = len(ranks)
    return {k: sum(1 for r in ranks if r <= k) / n for k in ks}


def compute_metrics(run: RunResult, ks: Sequence[int] = DEFAULT_KS) -> Metrics:
    ranks = _gold_ranks(run)
    return Metrics(
        method=run.method,
        n_queries=len(ranks),
        n_gold_retrieved=sum(1 for r in ranks if r is not None),
        recall_at=recall_at_k(run, ks),
        normalized_recall_at=normalized_recall_at_k(run, ks),
    )


def metrics_to_obj(m: Metrics) -> dict:
    return {
        "method": m.method,
        "n_queries": m.n_queries,
        "n_gold_retrieved": m.n_gold_retrieved,
        "recall_at": {str(k): v for k, v in m.recall_at.items()},
        "normalized_recall_at": {str(k): v for k, v in m.normalized_recall_at.items()},
    }


def write_metrics(metrics: Sequence[Metrics], path) -> None:
    payload = metrics_to_obj(metrics[0]) if len(metrics) == 1 else [
        metrics_to_obj(m) for m in metrics
    ]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=2)
        fh.write("\n")


def write_recall_curve(metrics: Sequence[Metrics], path) -> None:
    """CSV with one series per method: header method,k,recall,normalized_recall."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "k", "recall", "normalized_recall"])
        for m in metrics:
            for k in sorted(m.recall_at):
                writer.writerow(
                    [m.method, k, repr(m.recall_at[k]), repr(m.normalized_recall_at[k])]
                )


def evaluate_run(
    runs: RunResult | Sequence[RunResult],
    ks: Sequence[int] = DEFAULT_KS,
    metrics_path=None,
    curve_path=None,
) -> list[Metrics]:
    """Compute metrics for one or more runs and write the report files.

    metrics.json holds a single object for one run and an array for several;
    the curve CSV always carries every series.  Output is deterministic.
    """
    if isinstance(runs, RunResult):
        runs = [runs]
    if not runs:
        raise DataError("no runs to evaluate")
    metrics = [compute_metrics(run, ks) for run in runs]
    if metrics_path is not None:
        write_metrics(metrics, metrics_path)
    if curve_path is not None:
        write_recall_curve(metrics, curve_path)
    return metrics


def runs_from_candidates(
    rows: Iterable[tuple[str, CandidateList]], gold: Mapping[str, str]
) -> list[RunResult]:
    """Group candidate rows by method into runs, attaching gold qids.

    Raises DataError for a cui with no gold mapping; row order within each
    method is preserved.
    """
    runs: dict[str, RunResult] = {}
    for method, cl in rows:
        if cl.cui not in gold:
            raise DataError(f"no gold alignment for {cl.cui}")
        run = runs.setdefault(method, RunResult(method=method, queries=[]))
        run.queries.append(
            QueryRun(cui=cl.cui, gold_qid=gold[cl.cui], ranked_qids=cl.qids)
        )
    return list(runs.values())
