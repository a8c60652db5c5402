"""Curation service: ranked candidates in front of a human reviewer, with an
append-only decision log.

The queue state is a pure function of the loaded run plus the decision log,
so a restart replays the log and lands in exactly the pre-crash state.  All
appends go through a single lock and are fsynced before the caller gets an
acknowledgment.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Iterable, Mapping

from .candgen import CandidateList
from .corpus import AliasTerm, AlignmentRecord, Concept, DataError, WikiEntity

logger = logging.getLogger(__name__)

VERDICTS = ("accept", "reject", "skip", "none_of_these")
DEFAULT_PORT = 7860
DEFAULT_PAGE_SIZE = 20


@dataclass
class Decision:
    """One reviewer verdict; accept/reject refer to a specific candidate."""

    cui: str
    verdict: str
    qid: str | None = None
    annotator: str = "anonymous"
    timestamp: float | None = None

    def to_obj(self) -> dict:
        return {
            "cui": self.cui,
            "qid": self.qid,
            "verdict": self.verdict,
            "annotator": self.annotator,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "Decision":
        return cls(
            cui=obj["cui"],
            verdict=obj["verdict"],
            qid=obj.get("qid"),
            annotator=obj.get("annotator", "anonymous"),
            timestamp=obj.get("timestamp"),
        )


@dataclass
class CandidateView:
    qid: str
    title: str
    aliases: list[AliasTerm]
    score: float
    rank: int


@dataclass
class QueueItem:
    cui: str
    aliases: list[AliasTerm]
    candidates: list[CandidateView]


def build_queue(
    rows: Iterable[tuple[str, CandidateList]],
    concepts: Mapping[str, Concept],
    entities: Mapping[str, WikiEntity],
) -> list[QueueItem]:
    """Join a candidates file with concept and entity detail, ordered by cui."""
    items = []
    for _method, cl in rows:
        concept = concepts.get(cl.cui)
        if concept is None:
            raise DataError(f"candidates refer to unknown cui {cl.cui}")
        views = []
        for rank, (qid, score) in enumerate(cl.candidates, start=1):
            entity = entities.get(qid)
            if entity is None:
                raise DataError(f"candidates refer to unknown qid {qid}")
            views.append(
                CandidateView(
                    qid=qid, title=entity.title, aliases=entity.aliases,
                    score=score, rank=rank,
                )
            )
        items.append(QueueItem(cui=cl.cui, aliases=concept.aliases, candidates=views))
    items.sort(key=lambda it: it.cui)
    return items


class CurationState:
    """Queue plus decision history; status and export derive from the latest
    decision per cui (later decisions supersede, history is retained)."""

    def __init__(self, items: list[QueueItem]):
        self.items: dict[str, QueueItem] = {}
        for item in items:
            if item.cui in self.items:
                raise DataError(f"duplicate cui {item.cui} in loaded run")
            self.items[item.cui] = item
        self.history: list[Decision] = []
        self._latest: dict[str, Decision] = {}

    def validate(self, decision: Decision) -> None:
        if decision.verdict not in VERDICTS:
            raise DataError(f"invalid verdict {decision.verdict!r}")
        item = self.items.get(decision.cui)
        if item is None:
            raise DataError(f"unknown cui {decision.cui}")
        if decision.verdict in ("accept", "reject"):
            if not decision.qid:
                raise DataError(f"verdict {decision.verdict} requires a qid")
            if all(c.qid != decision.qid for c in item.candidates):
                raise DataError(
                    f"qid {decision.qid} is not a candidate for {decision.cui}"
                )
        if not isinstance(decision.annotator, str) or not decision.annotator.strip():
            raise DataError("annotator must be a non-empty string")
        if decision.timestamp is not None and decision.timestamp < 0:
            raise DataError("timestamp must be non-negative")

    def apply(self, decision: Decision) -> None:
        self.validate(decision)
        self.history.append(decision)
        self._latest[decision.cui] = decision

    def status(self, cui: str) -> str:
        latest = self._latest.get(cui)
        return "done" if latest is not None and latest.verdict == "accept" else "pending"

    def counts(self) -> dict[str, int]:
        done = sum(1 for cui in self.items if self.status(cui) == "done")
        return {"total": len(self.items), "n_done": done, "n_pending": len(self.items) - done}

    def list_items(
        self,
        status: str | None = None,
        page: int = 0,
        page_size: int = DEFAULT_PAGE_SIZE,
    ) -> dict:
        """Summaries ordered by cui; `page` is zero-based."""
        if status not in (None, "", "pending", "done"):
            raise DataError(f"invalid status filter {status!r}")
        if page < 0 or page_size < 1:
            raise DataError("page must be >= 0 and page_size >= 1")
        cuis = sorted(self.items)
        if status:
            cuis = [c for c in cuis if self.status(c) == status]
        start = page * page_size
        chunk = cuis[start:start + page_size]
        summaries = [
            {
                "cui": cui,
                "status": self.status(cui),
                "preview": self.items[cui].aliases[0].text,
                "n_candidates": len(self.items[cui].candidates),
            }
            for cui in chunk
        ]
        return {
            **self.counts(),
            "n_matching": len(cuis),
            "page": page,
            "page_size": page_size,
            "items": summaries,
        }

    def get(self, cui: str) -> QueueItem:
        item = self.items.get(cui)
        if item is None:
            raise KeyError(cui)
        return item

    def item_to_obj(self, item: QueueItem) -> dict:
        allowed = list(VERDICTS) if item.candidates else ["skip", "none_of_these"]
        return {
            "cui": item.cui,
            "status": self.status(item.cui),
            "aliases": [{"text": a.text, "lang": a.lang} for a in item.aliases],
            "candidates": [
                {
                    "qid": c.qid,
                    "title": c.title,
                    "aliases": [{"text": a.text, "lang": a.lang} for a in c.aliases],
                    "score": c.score,
                    "rank": c.rank,
                }
                for c in item.candidates
            ],
            "allowed_verdicts": allowed,
        }

    def export(self) -> list[AlignmentRecord]:
        """One record per cui whose latest decision is accept, ordered by cui."""
        records = []
        for cui in sorted(self._latest):
            decision = self._latest[cui]
            if decision.verdict != "accept":
                continue
            item = self.items[cui]
            cand = next(c for c in item.candidates if c.qid == decision.qid)
            records.append(
                AlignmentRecord(
                    cui=cui,
                    concept_aliases=item.aliases,
                    wiki_title=cand.title,
                    qid=cand.qid,
                    wiki_aliases=cand.aliases,
                )
            )
        return records


class DecisionLog:
    """Append-only line-delimited decision log, fsynced per append."""

    def __init__(self, path):
        self.path = path

    def append(self, decision: Decision) -> None:
        line = json.dumps(decision.to_obj(), ensure_ascii=False, separators=(",", ":"))
        with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def load(self) -> list[Decision]:
        if not os.path.exists(self.path):
            return []
        decisions = []
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    decisions.append(Decision.from_obj(json.loads(line)))
                except (KeyError, TypeError, ValueError) as exc:
                    raise DataError(
                        f"malformed decision at line {lineno} of {self.path}: {exc}"
                    ) from exc
        return decisions


def restore_state(items: list[QueueItem], log: DecisionLog) -> CurationState:
    """Rebuild the queue implied by the log; stale decisions are skipped loudly."""
    state = CurationState(items)
    for decision in log.load():
        try:
            state.apply(decision)
        except DataError as exc:
            logger.warning("skipping stale decision during replay: %s", exc)
    return state


def create_app(
    state: CurationState,
    log: DecisionLog,
    metrics: dict | None = None,
    static_dir: str | None = None,
):
    """FastAPI wiring over a CurationState; appends are serialized and fsynced."""
    from fastapi import FastAPI, HTTPException, Response
    from fastapi.responses import StreamingResponse
    from pydantic import BaseModel

    from .corpus import alignment_to_obj

    class DecisionIn(BaseModel):
        cui: str
        verdict: str
        qid: str | None = None
        annotator: str = "anonymous"
        timestamp: float | None = None

    app = FastAPI(title="kbalign curation service")
    write_lock = threading.Lock()

    @app.get("/api/queue")
    def queue(status: str = "", page: int = 0, page_size: int = DEFAULT_PAGE_SIZE):
        try:
            return state.list_items(status or None, page, page_size)
        except DataError as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.get("/api/concepts/{cui}")
    def concept(cui: str):
        try:
            item = state.get(cui)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown cui {cui}")
        return state.item_to_obj(item)

    @app.post("/api/decisions", status_code=201)
    def decide(body: DecisionIn):
        decision = Decision(
            cui=body.cui,
            verdict=body.verdict,
            qid=body.qid,
            annotator=body.annotator,
            timestamp=body.timestamp if body.timestamp is not None else time.time(),
        )
        with write_lock:
            try:
                state.validate(decision)
            except DataError as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            log.append(decision)
            state.apply(decision)
        return {"ok": True, "cui": decision.cui, "status": state.status(decision.cui)}

    @app.get("/api/export")
    def export():
        def stream():
            for rec in state.export():
                yield json.dumps(
                    alignment_to_obj(rec), ensure_ascii=False, separators=(",", ":")
                ) + "\n"

        return StreamingResponse(stream(), media_type="application/x-ndjson")

    @app.get("/api/metrics")
    def get_metrics():
        if metrics is None:
            raise HTTPException(status_code=404, detail="no metrics loaded")
        return metrics

    if static_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="static")
    else:
        @app.get("/")
        def root():
            return Response(
                content="<html><body><h1>kbalign curation service</h1>"
                "<p>No UI bundle configured; the API lives under /api/.</p>"
                "</body></html>",
                media_type="text/html",
            )

    return app


def serve(
    state: CurationState,
    log: DecisionLog,
    metrics: dict | None = None,
    static_dir: str | None = None,
    host: str = "127.0.0.1",
    port: int = DEFAULT_PORT,
) -> None:
    import uvicorn

    app = create_app(state, log, metrics=metrics, static_dir=static_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")
