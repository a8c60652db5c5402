"""Candidate generation: tokenizer, fielded inverted index with BM25
disjunctive search, and character n-gram TF-IDF cosine retrieval.

Both retrieval paths take a whole concept (all alias terms, every language)
as the query and return a deterministic top-k list of entity ids with
scores.  Ties always break toward the smaller numeric QID so repeated runs
produce identical files.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

from .corpus import Concept, DataError, WikiEntity, normalize_text, qid_number

logger = logging.getLogger(__name__)

FIELDS = ("title", "text", "aliases")

DEFAULT_K = 64
DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
MAX_QUERY_TOKENS = 1024

# Scripts whose runs are split into single-character tokens (no whitespace
# segmentation exists for them).
_CJK_RANGES = (
    (0x1100, 0x11FF),    # Hangul jamo
    (0x3040, 0x309F),    # Hiragana
    (0x30A0, 0x30FF),    # Katakana
    (0x3130, 0x318F),    # Hangul compatibility jamo
    (0x31F0, 0x31FF),    # Katakana phonetic extensions
    (0x3400, 0x4DBF),    # CJK extension A
    (0x4E00, 0x9FFF),    # CJK unified ideographs
    (0xA960, 0xA97F),    # Hangul jamo extended A
    (0xAC00, 0xD7A3),    # Hangul syllables
    (0xD7B0, 0xD7FF),    # Hangul jamo extended B
    (0xF900, 0xFAFF),    # CJK compatibility ideographs
    (0x20000, 0x2A6DF),  # CJK extension B
    (0x2A700, 0x2EBEF),  # CJK extensions C-F
)


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    if cp < 0x1100:
        return False
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


def tokenize(text: str) -> list[str]:
    """NFKC-normalize, casefold, and segment into terms.

    Segmentation is at Unicode word boundaries; runs of Han, Hiragana,
    Katakana, or Hangul are further split into single-character tokens.
    Punctuation-only segments never survive.
    """
    tokens: list[str] = []
    folded = normalize_text(text).casefold()
    word: list[str] = []
    for ch in folded:
        if ch.isalnum() or ch == "_":
            if _is_cjk(ch):
                if word:
                    tokens.append("".join(word))
                    word = []
                tokens.append(ch)
            else:
                word.append(ch)
        else:
            if word:
                tokens.append("".join(word))
                word = []
    if word:
        tokens.append("".join(word))
    return tokens


@dataclass
class CandidateList:
    """Top-k scored entities for one concept; scores non-increasing, qids unique."""

    cui: str
    candidates: list[tuple[str, float]]
    k: int

    def __post_init__(self) -> None:
        if len(self.candidates) > self.k:
            raise DataError(f"candidate list for {self.cui} longer than k={self.k}")
        qids = [qid for qid, _ in self.candidates]
        if len(set(qids)) != len(qids):
            raise DataError(f"duplicate qids in candidate list for {self.cui}")
        scores = [s for _, s in self.candidates]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise DataError(f"candidate scores not non-increasing for {self.cui}")

    @property
    def qids(self) -> list[str]:
        return [qid for qid, _ in self.candidates]


class InvertedIndex:
    """Fielded inverted index over an entity collection.

    postings[field][token] is a list of (doc ordinal, term frequency) sorted
    by ordinal; doc_lengths[field] maps ordinal to token count for documents
    that possess the field; avg_lengths[field] is the mean over those.
    """

    def __init__(
        self,
        doc_table: list[str],
        postings: dict[str, dict[str, list[tuple[int, int]]]],
        doc_lengths: dict[str, dict[int, int]],
        avg_lengths: dict[str, float],
    ):
        self.doc_table = doc_table
        self.postings = postings
        self.doc_lengths = doc_lengths
        self.avg_lengths = avg_lengths

    @property
    def N(self) -> int:
        return len(self.doc_table)

    @property
    def fields(self) -> tuple[str, ...]:
        return tuple(sorted(self.postings))


def _field_tokens(entity: WikiEntity, fname: str) -> list[str] | None:
    """Tokens for one field, or None when the entity does not possess it."""
    if fname == "title":
        return tokenize(entity.title)
    if fname == "text":
        return None if entity.text is None else tokenize(entity.text)
    if fname == "aliases":
        tokens: list[str] = []
        for alias in entity.aliases:
            tokens.extend(tokenize(alias.text))
        return tokens
    raise ValueError(f"unknown field {fname!r}")


def build_index(
    entities: Sequence[WikiEntity], fields: Iterable[str] = FIELDS
) -> InvertedIndex:
    """Index the requested fields of an entity collection.

    The aliases field concatenates every alias text in every language.
    Raises DataError on an empty collection or an unknown field name.
    """
    entities = list(entities)
    if not entities:
        raise DataError("empty collection")
    fields = tuple(sorted(set(fields)))
    for fname in fields:
        if fname not in FIELDS:
            raise DataError(f"unknown field {fname!r}; expected subset of {FIELDS}")

    doc_table = [e.qid for e in entities]
    postings: dict[str, dict[str, list[tuple[int, int]]]] = {f: {} for f in fields}
    doc_lengths: dict[str, dict[int, int]] = {f: {} for f in fields}

    for ordinal, entity in enumerate(entities):
        for fname in fields:
            tokens = _field_tokens(entity, fname)
            if tokens is None:
                continue
            doc_lengths[fname][ordinal] = len(tokens)
            for token, tf in sorted(Counter(tokens).items()):
                postings[fname].setdefault(token, []).append((ordinal, tf))

    avg_lengths = {
        fname: (sum(lengths.values()) / len(lengths)) if lengths else 0.0
        for fname, lengths in doc_lengths.items()
    }
    return InvertedIndex(doc_table, postings, doc_lengths, avg_lengths)


def _query_tokens(query: Concept) -> list[str]:
    """Deduplicated union of the concept's alias tokens, capped for latency."""
    seen: set[str] = set()
    tokens: list[str] = []
    for alias in query.aliases:
        for token in tokenize(alias.text):
            if token not in seen:
                seen.add(token)
                tokens.append(token)
    if len(tokens) > MAX_QUERY_TOKENS:
        logger.warning(
            "query %s has %d tokens; keeping the first %d",
            query.cui, len(tokens), MAX_QUERY_TOKENS,
        )
        tokens = tokens[:MAX_QUERY_TOKENS]
    return tokens


def bm25_idf(n_docs: int, df: int) -> float:
    return math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))


def bm25_search(
    index: InvertedIndex,
    query: Concept,
    k: int = DEFAULT_K,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> CandidateList:
    """Disjunctive BM25 over all (token, field) clauses of the concept's aliases.

    A document's score sums the clause scores
    idf * tf*(k1+1) / (tf + k1*(1 - b + b*len/avglen)) over every clause it
    matches; documents matching no clause are never scored.  Top-k by score
    descending, ties toward the smaller numeric QID.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    tokens = _query_tokens(query)
    if not tokens:
        logger.warning("query %s tokenizes to nothing; empty candidate list", query.cui)
        return CandidateList(query.cui, [], k)

    scores: dict[int, float] = defaultdict(float)
    n_docs = index.N
    for token in tokens:
        for fname, field_postings in index.postings.items():
            plist = field_postings.get(token)
            if not plist:
                continue
            idf = bm25_idf(n_docs, len(plist))
            avglen = index.avg_lengths[fname]
            lengths = index.doc_lengths[fname]
            for ordinal, tf in plist:
                denom = tf + k1 * (1.0 - b + b * lengths[ordinal] / avglen)
                scores[ordinal] += idf * tf * (k1 + 1.0) / denom

    ranked = sorted(
        scores.items(), key=lambda kv: (-kv[1], qid_number(index.doc_table[kv[0]]))
    )[:k]
    return CandidateList(
        query.cui, [(index.doc_table[o], s) for o, s in ranked], k
    )


# --- character n-gram TF-IDF ---------------------------------------------------

def char_ngrams(term: str, n_min: int, n_max: int) -> Counter:
    """Multiset of contiguous substrings of `term` with length in [n_min, n_max].

    No boundary sentinels are added; n-grams never cross term boundaries
    because the input is a single term.
    """
    if not (1 <= n_min <= n_max):
        raise ValueError(f"need 1 <= n_min <= n_max, got ({n_min}, {n_max})")
    grams: Counter = Counter()
    length = len(term)
    for n in range(n_min, n_max + 1):
        for start in range(length - n + 1):
            grams[term[start:start + n]] += 1
    return grams


@dataclass
class SparseVector:
    """Non-negative sparse weights keyed by char n-gram, with cached Euclidean norm."""

    entries: dict[str, float]
    norm: float = field(init=False)

    def __post_init__(self) -> None:
        self.entries = {g: w for g, w in self.entries.items() if w != 0.0}
        self.norm = math.sqrt(sum(w * w for w in self.entries.values()))

    def cosine(self, other: "SparseVector") -> float:
        if self.norm == 0.0 or other.norm == 0.0:
            return 0.0
        small, big = self.entries, other.entries
        if len(small) > len(big):
            small, big = big, small
        dot = sum(w * big[g] for g, w in small.items() if g in big)
        # guard against float drift above 1 for near-identical vectors
        return min(1.0, dot / (self.norm * other.norm))


def _gram_counts(texts: Iterable[str], n_min: int, n_max: int) -> Counter:
    grams: Counter = Counter()
    for text in texts:
        for token in tokenize(text):
            grams.update(char_ngrams(token, n_min, n_max))
    return grams


class CharNgramIndex:
    """TF-IDF weighted char n-gram vectors for a collection, reusable across queries.

    Entity vectors are built from alias texts only (the title is part of the
    alias list; page text is excluded).  idf = ln(N / (1 + df)) + 1 keeps all
    weights strictly positive.
    """

    def __init__(
        self, entities: Sequence[WikiEntity], n_min: int = 1, n_max: int = 5
    ):
        entities = list(entities)
        if not entities:
            raise DataError("empty collection")
        self.n_min, self.n_max = n_min, n_max
        self.qids = [e.qid for e in entities]

        raw = [
            _gram_counts((a.text for a in e.aliases), n_min, n_max) for e in entities
        ]
        df: Counter = Counter()
        for counts in raw:
            df.update(counts.keys())
        n_docs = len(entities)
        self._n_docs = n_docs
        self._df = df

        self.vectors = [
            SparseVector({g: tf * self.idf(g) for g, tf in counts.items()})
            for counts in raw
        ]
        # gram -> [(doc index, weight)] for sparse dot products
        self._postings: dict[str, list[tuple[int, float]]] = defaultdict(list)
        for i, vec in enumerate(self.vectors):
            for gram, w in vec.entries.items():
                self._postings[gram].append((i, w))

    def idf(self, gram: str) -> float:
        return math.log(self._n_docs / (1.0 + self._df.get(gram, 0))) + 1.0

    def query_vector(self, query: Concept) -> SparseVector:
        counts = _gram_counts(
            (a.text for a in query.aliases), self.n_min, self.n_max
        )
        return SparseVector({g: tf * self.idf(g) for g, tf in counts.items()})

    def search(self, query: Concept, k: int = DEFAULT_K) -> CandidateList:
        if k < 1:
            raise ValueError("k must be >= 1")
        qvec = self.query_vector(query)
        if not qvec.entries:
            logger.warning(
                "query %s tokenizes to nothing; empty candidate list", query.cui
            )
            return CandidateList(query.cui, [], k)
        dots: dict[int, float] = defaultdict(float)
        for gram, qw in qvec.entries.items():
            for i, dw in self._postings.get(gram, ()):
                dots[i] += qw * dw
        scored = [
            (i, min(1.0, dot / (qvec.norm * self.vectors[i].norm)))
            for i, dot in dots.items()
            if dot > 0.0
        ]
        scored.sort(key=lambda kv: (-kv[1], qid_number(self.qids[kv[0]])))
        return CandidateList(
            query.cui, [(self.qids[i], s) for i, s in scored[:k]], k
        )


def char_tfidf_search(
    entities: Sequence[WikiEntity],
    query: Concept,
    k: int = DEFAULT_K,
    n_min: int = 1,
    n_max: int = 5,
) -> CandidateList:
    """One-off char n-gram TF-IDF cosine retrieval (builds the vectors each call)."""
    return CharNgramIndex(entities, n_min, n_max).search(query, k)


# --- binary index persistence ---------------------------------------------------

INDEX_MAGIC = b"KBIDX\x00\x01\x00"
INDEX_VERSION = 1


def _pack_str(out: bytearray, s: str) -> None:
    data = s.encode("utf-8")
    out += struct.pack("<I", len(data))
    out += data


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def read_str(self) -> str:
        (length,) = self.unpack("<I")
        raw = self.data[self.pos:self.pos + length]
        self.pos += length
        return raw.decode("utf-8")


def save_index(index: InvertedIndex, path) -> None:
    """Persist to the binary index format: magic, version byte, then
    length-prefixed sections (doc table, per-field stats, postings), all
    integers little-endian."""
    fields = sorted(index.postings)

    doc_section = bytearray(struct.pack("<I", index.N))
    for qid in index.doc_table:
        _pack_str(doc_section, qid)

    stats_section = bytearray(struct.pack("<B", len(fields)))
    for fname in fields:
        _pack_str(stats_section, fname)
        lengths = index.doc_lengths[fname]
        stats_section += struct.pack("<dI", index.avg_lengths[fname], len(lengths))
        for ordinal in sorted(lengths):
            stats_section += struct.pack("<II", ordinal, lengths[ordinal])

    post_section = bytearray(struct.pack("<B", len(fields)))
    for fname in fields:
        _pack_str(post_section, fname)
        tokens = index.postings[fname]
        post_section += struct.pack("<I", len(tokens))
        for token in sorted(tokens):
            _pack_str(post_section, token)
            plist = tokens[token]
            post_section += struct.pack("<I", len(plist))
            for ordinal, tf in plist:
                post_section += struct.pack("<II", ordinal, tf)

    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<B", INDEX_VERSION))
        for section in (doc_section, stats_section, post_section):
            fh.write(struct.pack("<Q", len(section)))
            fh.write(section)


def load_index(path) -> InvertedIndex:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != INDEX_MAGIC:
        raise DataError(f"not an index file: {path}")
    version = data[8]
    if version != INDEX_VERSION:
        raise DataError(f"unsupported index version {version}")

    pos = 9
    sections = []
    for _ in range(3):
        (length,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        sections.append(data[pos:pos + length])
        pos += length

    reader = _Reader(sections[0])
    (n_docs,) = reader.unpack("<I")
    doc_table = [reader.read_str() for _ in range(n_docs)]

    reader = _Reader(sections[1])
    (n_fields,) = reader.unpack("<B")
    doc_lengths: dict[str, dict[int, int]] = {}
    avg_lengths: dict[str, float] = {}
    for _ in range(n_fields):
        fname = reader.read_str()
        avg, n_entries = reader.unpack("<dI")
        lengths = {}
        for _ in range(n_entries):
            ordinal, length = reader.unpack("<II")
            lengths[ordinal] = length
        doc_lengths[fname] = lengths
        avg_lengths[fname] = avg

    reader = _Reader(sections[2])
    (n_fields,) = reader.unpack("<B")
    postings: dict[str, dict[str, list[tuple[int, int]]]] = {}
    for _ in range(n_fields):
        fname = reader.read_str()
        (n_tokens,) = reader.unpack("<I")
        field_postings: dict[str, list[tuple[int, int]]] = {}
        for _ in range(n_tokens):
            token = reader.read_str()
            (plist_len,) = reader.unpack("<I")
            plist = []
            for _ in range(plist_len):
                ordinal, tf = reader.unpack("<II")
                plist.append((ordinal, tf))
            field_postings[token] = plist
        postings[fname] = field_postings

    return InvertedIndex(doc_table, postings, doc_lengths, avg_lengths)


# --- candidates file -------------------------------------------------------------

def write_candidates(
    cand_lists: Iterable[CandidateList], method: str, fh_or_path
) -> None:
    """Write candidate rows: {cui, method, candidates: [{qid, score, rank}]}."""

    def _write(fh: IO[str]) -> None:
        for cl in cand_lists:
            row = {
                "cui": cl.cui,
                "method": method,
                "candidates": [
                    {"qid": qid, "score": score, "rank": rank}
                    for rank, (qid, score) in enumerate(cl.candidates, start=1)
                ],
            }
            fh.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")) + "\n")

    if hasattr(fh_or_path, "write"):
        _write(fh_or_path)
    else:
        with open(fh_or_path, "w", encoding="utf-8", newline="\n") as fh:
            _write(fh)


def read_candidates(path) -> list[tuple[str, CandidateList]]:
    """Read candidate rows back as (method, CandidateList) pairs in file order."""
    out: list[tuple[str, CandidateList]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                cands = [(c["qid"], float(c["score"])) for c in row["candidates"]]
                cl = CandidateList(row["cui"], cands, max(len(cands), 1))
                out.append((row["method"], cl))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"malformed candidates row at line {lineno}: {exc}") from exc
    return out
