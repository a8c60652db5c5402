"""Data model and ingestion for concept/entity collections.

Concepts come from an aliased medical vocabulary (CUI-keyed), entities from
a wiki-style knowledge base (QID-keyed) whose records carry multilingual
aliases and an optional CUI cross-link.  This module parses and writes the
line-delimited interchange files, streams entities out of a raw knowledge-base
dump, and builds the gold alignment dataset with deterministic splits.
"""

from __future__ import annotations

import json
import logging
import random
import re
import unicodedata
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

logger = logging.getLogger(__name__)

# Languages supported by the source vocabulary, plus the "und" sentinel for
# alias terms whose language is undetermined.
SUPPORTED_LANGUAGES = frozenset({
    "en", "es", "it", "nl", "fr", "pt", "de", "cs", "ru", "zh", "ja", "hu",
    "tr", "ko", "no", "et", "sv", "pl", "fi", "el", "lv", "da", "eu", "he",
})
UNDETERMINED = "und"

CUI_PATTERN = re.compile(r"^C\d{7}$")
QID_PATTERN = re.compile(r"^Q\d+$")

DEFAULT_SPLIT_RATIOS = (0.562, 0.112, 0.326)


class DataError(ValueError):
    """Invalid input data (malformed records, broken invariants)."""


def normalize_text(text: str) -> str:
    """NFKC-normalize text; stabilizes char n-grams across width/compat variants."""
    return unicodedata.normalize("NFKC", text)


def qid_number(qid: str) -> int:
    return int(qid[1:])


@dataclass(frozen=True)
class AliasTerm:
    """One surface name with its language tag. Text is NFKC-normalized on construction."""

    text: str
    lang: str = UNDETERMINED

    def __post_init__(self) -> None:
        normalized = normalize_text(self.text)
        if not normalized.strip():
            raise DataError(f"alias text is empty after normalization: {self.text!r}")
        if self.lang != UNDETERMINED and self.lang not in SUPPORTED_LANGUAGES:
            raise DataError(f"unsupported language tag {self.lang!r}")
        object.__setattr__(self, "text", normalized)


@dataclass
class Concept:
    """A vocabulary concept: one CUI with its multilingual alias set (the query side)."""

    cui: str
    aliases: list[AliasTerm]
    definition: str | None = None

    def __post_init__(self) -> None:
        if not CUI_PATTERN.match(self.cui):
            raise DataError(f"invalid cui {self.cui!r}")
        if not self.aliases:
            raise DataError(f"concept {self.cui} has no aliases")
        seen = set()
        for alias in self.aliases:
            key = (alias.text, alias.lang)
            if key in seen:
                raise DataError(f"duplicate alias {key!r} for cui {self.cui}")
            seen.add(key)


@dataclass
class WikiEntity:
    """A knowledge-base entity: QID, title, multilingual aliases, optional page
    text and optional CUI cross-link (the document side).

    The title is guaranteed to appear in the alias list (appended with lang
    "en" if absent).
    """

    qid: str
    title: str
    aliases: list[AliasTerm] = field(default_factory=list)
    text: str | None = None
    umls_cui: str | None = None

    def __post_init__(self) -> None:
        if not QID_PATTERN.match(self.qid):
            raise DataError(f"invalid qid {self.qid!r}")
        self.title = normalize_text(self.title)
        if not self.title.strip():
            raise DataError(f"entity {self.qid} has an empty title")
        if self.umls_cui is not None and not CUI_PATTERN.match(self.umls_cui):
            raise DataError(f"invalid umls_cui {self.umls_cui!r} on {self.qid}")
        if not any(
            a.text == self.title and a.lang in ("en", UNDETERMINED) for a in self.aliases
        ):
            self.aliases = list(self.aliases) + [AliasTerm(self.title, "en")]


@dataclass
class AlignmentRecord:
    """One confirmed concept-to-entity link, carrying both alias sets."""

    cui: str
    concept_aliases: list[AliasTerm]
    wiki_title: str
    qid: str
    wiki_aliases: list[AliasTerm]

    def __post_init__(self) -> None:
        if not CUI_PATTERN.match(self.cui):
            raise DataError(f"invalid cui {self.cui!r}")
        if not QID_PATTERN.match(self.qid):
            raise DataError(f"invalid qid {self.qid!r}")


@dataclass
class DatasetSplit:
    name: str
    records: list[AlignmentRecord]
    seed: int

    def __post_init__(self) -> None:
        if self.name not in ("train", "valid", "test"):
            raise DataError(f"invalid split name {self.name!r}")


# --- JSON (de)serialization -------------------------------------------------

def _alias_to_obj(alias: AliasTerm) -> dict:
    return {"text": alias.text, "lang": alias.lang}


def _aliases_from_obj(raw, where: str) -> list[AliasTerm]:
    if not isinstance(raw, list):
        raise DataError(f"aliases must be a list {where}")
    out = []
    for item in raw:
        if not isinstance(item, dict) or "text" not in item or "lang" not in item:
            raise DataError(f"malformed alias entry {where}")
        out.append(AliasTerm(text=item["text"], lang=item["lang"]))
    return out


def concept_to_obj(concept: Concept) -> dict:
    obj = {"cui": concept.cui, "aliases": [_alias_to_obj(a) for a in concept.aliases]}
    if concept.definition is not None:
        obj["definition"] = concept.definition
    return obj


def concept_from_obj(obj: dict, where: str = "") -> Concept:
    try:
        return Concept(
            cui=obj["cui"],
            aliases=_aliases_from_obj(obj["aliases"], where),
            definition=obj.get("definition"),
        )
    except KeyError as exc:
        raise DataError(f"missing field {exc} {where}") from exc


def entity_to_obj(entity: WikiEntity) -> dict:
    obj = {
        "qid": entity.qid,
        "title": entity.title,
        "aliases": [_alias_to_obj(a) for a in entity.aliases],
    }
    if entity.text is not None:
        obj["text"] = entity.text
    if entity.umls_cui is not None:
        obj["umls_cui"] = entity.umls_cui
    return obj


def entity_from_obj(obj: dict, where: str = "") -> WikiEntity:
    try:
        qid = obj["qid"]
        title = obj["title"]
    except KeyError as exc:
        raise DataError(f"missing field {exc} {where}") from exc
    aliases = _aliases_from_obj(obj["aliases"], where) if "aliases" in obj else []
    return WikiEntity(
        qid=qid,
        title=title,
        aliases=aliases,
        text=obj.get("text"),
        umls_cui=obj.get("umls_cui"),
    )


def alignment_to_obj(rec: AlignmentRecord) -> dict:
    return {
        "cui": rec.cui,
        "qid": rec.qid,
        "concept_aliases": [_alias_to_obj(a) for a in rec.concept_aliases],
        "wiki_title": rec.wiki_title,
        "wiki_aliases": [_alias_to_obj(a) for a in rec.wiki_aliases],
    }


def alignment_from_obj(obj: dict, where: str = "") -> AlignmentRecord:
    try:
        return AlignmentRecord(
            cui=obj["cui"],
            concept_aliases=_aliases_from_obj(obj["concept_aliases"], where),
            wiki_title=obj["wiki_title"],
            qid=obj["qid"],
            wiki_aliases=_aliases_from_obj(obj["wiki_aliases"], where),
        )
    except KeyError as exc:
        raise DataError(f"missing field {exc} {where}") from exc


def _dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


# --- line-delimited parsers ---------------------------------------------------

def _iter_records(stream: Iterable[str]) -> Iterator[tuple[int, dict]]:
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed record at line {lineno}: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise DataError(f"malformed record at line {lineno}: not an object")
        yield lineno, obj


def parse_concepts(stream: Iterable[str]) -> list[Concept]:
    """Parse a line-delimited concepts stream, preserving input order.

    Raises DataError with the offending line number on malformed records,
    and on duplicate CUIs.
    """
    concepts = []
    seen: dict[str, int] = {}
    for lineno, obj in _iter_records(stream):
        try:
            concept = concept_from_obj(obj, where=f"at line {lineno}")
        except DataError as exc:
            raise DataError(f"{exc} (line {lineno})") from exc
        if concept.cui in seen:
            raise DataError(
                f"duplicate cui {concept.cui} at line {lineno} (first at line {seen[concept.cui]})"
            )
        seen[concept.cui] = lineno
        concepts.append(concept)
    return concepts


def parse_entities(stream: Iterable[str]) -> list[WikiEntity]:
    """Parse a line-delimited entities stream; duplicate QIDs are an error."""
    entities = []
    seen: dict[str, int] = {}
    for lineno, obj in _iter_records(stream):
        try:
            entity = entity_from_obj(obj, where=f"at line {lineno}")
        except DataError as exc:
            raise DataError(f"{exc} (line {lineno})") from exc
        if entity.qid in seen:
            raise DataError(
                f"duplicate qid {entity.qid} at line {lineno} (first at line {seen[entity.qid]})"
            )
        seen[entity.qid] = lineno
        entities.append(entity)
    return entities


def parse_alignments(stream: Iterable[str]) -> list[AlignmentRecord]:
    records = []
    seen: dict[tuple[str, str], int] = {}
    for lineno, obj in _iter_records(stream):
        try:
            rec = alignment_from_obj(obj, where=f"at line {lineno}")
        except DataError as exc:
            raise DataError(f"{exc} (line {lineno})") from exc
        key = (rec.cui, rec.qid)
        if key in seen:
            raise DataError(f"duplicate alignment {key} at line {lineno}")
        seen[key] = lineno
        records.append(rec)
    return records


def read_concepts(path) -> list[Concept]:
    with open(path, encoding="utf-8") as fh:
        return parse_concepts(fh)


def read_entities(path) -> list[WikiEntity]:
    with open(path, encoding="utf-8") as fh:
        return parse_entities(fh)


def read_alignments(path) -> list[AlignmentRecord]:
    with open(path, encoding="utf-8") as fh:
        return parse_alignments(fh)


def write_concepts(concepts: Iterable[Concept], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c in concepts:
            fh.write(_dumps(concept_to_obj(c)) + "\n")


def write_entities(entities: Iterable[WikiEntity], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entities:
            fh.write(_dumps(entity_to_obj(e)) + "\n")


def write_alignments(records: Iterable[AlignmentRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(_dumps(alignment_to_obj(r)) + "\n")


# --- knowledge-base dump extraction -------------------------------------------

@dataclass
class ExtractionStats:
    read: int = 0
    emitted: int = 0
    unparseable: int = 0
    non_item: int = 0
    no_sitelink: int = 0


def extract_wikidata_entities(
    dump_stream: Iterable[str] | IO[str],
    languages: frozenset[str] | set[str] = SUPPORTED_LANGUAGES,
    cui_property: str = "P2892",
    stats: ExtractionStats | None = None,
) -> Iterator[WikiEntity]:
    """Stream entities out of a raw knowledge-base JSON dump.

    The dump has one JSON record per line, optionally wrapped in array
    brackets with trailing commas (the standard full-dump layout).  Emits one
    entity per item record that has an English-site page link; aliases are
    restricted to `languages`; the CUI cross-link is read from the
    `cui_property` claim when present.  Unparseable records are counted and
    skipped, never fatal.  Memory stays bounded by one record.
    """
    if stats is None:
        stats = ExtractionStats()
    for raw in dump_stream:
        line = raw.strip()
        if not line or line in ("[", "]"):
            continue
        line = line.rstrip(",")
        stats.read += 1
        try:
            record = json.loads(line)
            if not isinstance(record, dict):
                raise ValueError("not an object")
        except ValueError:
            stats.unparseable += 1
            continue
        entity_id = record.get("id", "")
        if record.get("type", "item") != "item" or not QID_PATTERN.match(entity_id):
            stats.non_item += 1
            continue
        sitelinks = record.get("sitelinks") or {}
        enwiki = sitelinks.get("enwiki")
        if not isinstance(enwiki, dict) or not enwiki.get("title"):
            stats.no_sitelink += 1
            continue
        try:
            entity = _entity_from_dump_record(record, enwiki["title"], languages, cui_property)
        except DataError:
            stats.unparseable += 1
            continue
        stats.emitted += 1
        yield entity


def _entity_from_dump_record(
    record: dict, title: str, languages, cui_property: str
) -> WikiEntity:
    aliases: list[AliasTerm] = []
    seen: set[tuple[str, str]] = set()

    def add(value, lang):
        if lang not in languages or not isinstance(value, str) or not value.strip():
            return
        term = AliasTerm(value, lang)
        key = (term.text, term.lang)
        if key not in seen:
            seen.add(key)
            aliases.append(term)

    labels = record.get("labels") or {}
    for lang, label in labels.items():
        if isinstance(label, dict):
            add(label.get("value"), lang)
    alias_map = record.get("aliases") or {}
    for lang, items in alias_map.items():
        if isinstance(items, list):
            for item in items:
                if isinstance(item, dict):
                    add(item.get("value"), lang)

    umls_cui = None
    claims = record.get("claims") or {}
    for claim in claims.get(cui_property, []) or []:
        try:
            value = claim["mainsnak"]["datavalue"]["value"]
        except (KeyError, TypeError):
            continue
        if isinstance(value, str) and CUI_PATTERN.match(value):
            umls_cui = value
            break

    return WikiEntity(
        qid=record["id"], title=title, aliases=aliases, umls_cui=umls_cui
    )


# --- alignment dataset construction -------------------------------------------

def build_alignment_dataset(
    concepts: Iterable[Concept],
    entities: Iterable[WikiEntity],
    ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS,
    seed: int = 13,
) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    """Pair CUI-cross-linked entities with known concepts and split them.

    Every entity whose cross-link matches a known concept yields one record.
    When several entities claim the same CUI the one with the smallest
    numeric QID wins (a warning is logged).  Records are shuffled by an RNG
    seeded with `seed` and partitioned by `ratios`; splits are disjoint by
    both CUI and QID and their union is the full aligned set.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"split ratios must be non-negative and sum to 1.0: {ratios}")
    if seed < 0:
        raise ValueError("seed must be >= 0")

    by_cui = {c.cui: c for c in concepts}
    chosen: dict[str, WikiEntity] = {}
    for entity in entities:
        cui = entity.umls_cui
        if cui is None or cui not in by_cui:
            continue
        incumbent = chosen.get(cui)
        if incumbent is None:
            chosen[cui] = entity
        else:
            keep, drop = sorted((incumbent, entity), key=lambda e: qid_number(e.qid))
            logger.warning(
                "multiple entities link cui %s: keeping %s, dropping %s",
                cui, keep.qid, drop.qid,
            )
            chosen[cui] = keep

    if not chosen:
        raise DataError("empty alignment")

    records = [
        AlignmentRecord(
            cui=cui,
            concept_aliases=by_cui[cui].aliases,
            wiki_title=entity.title,
            qid=entity.qid,
            wiki_aliases=entity.aliases,
        )
        for cui, entity in sorted(chosen.items())
    ]
    random.Random(seed).shuffle(records)

    n = len(records)
    b1 = min(n, max(0, round(n * ratios[0])))
    b2 = min(n, max(b1, round(n * (ratios[0] + ratios[1]))))
    return (
        DatasetSplit("train", records[:b1], seed),
        DatasetSplit("valid", records[b1:b2], seed),
        DatasetSplit("test", records[b2:], seed),
    )


def unaligned_concepts(
    concepts: Iterable[Concept], records: Iterable[AlignmentRecord]
) -> list[Concept]:
    """Concepts with no alignment record, in input order (the pool left for batch ranking)."""
    aligned = {r.cui for r in records}
    return [c for c in concepts if c.cui not in aligned]


def concept_from_alignment(rec: AlignmentRecord) -> Concept:
    """View an alignment record's query side as a Concept."""
    return Concept(cui=rec.cui, aliases=rec.concept_aliases)
