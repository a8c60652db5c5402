"""Second-stage reranking: passage pairs, a trainable feature scorer under a
pairwise binary-classification objective, and the file protocol for scoring
by an external model.

For each concept, its candidate list becomes one query group of (query
passage, candidate passage) pairs: the gold candidate is the positive, all
other retrieved candidates are negatives.  The group loss is

    L = -log f(positive) - sum over negatives of log(1 - f(negative))

and the built-in scorer realizes f as a logistic model over lexical and
multilingual overlap features.  An external scorer plugs in through
pairs.jsonl / scores.jsonl instead.
"""

from __future__ import annotations

import json
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .candgen import CandidateList, SparseVector, char_ngrams, tokenize
from .corpus import AliasTerm, Concept, DataError, WikiEntity

logger = logging.getLogger(__name__)

FEATURE_NAMES = (
    "token_jaccard",
    "char_ngram_cosine",
    "bm25_score_normalized",
    "reciprocal_bm25_rank",
    "shared_language_count_normalized",
    "exact_alias_match_flag",
    "length_ratio",
)
N_FEATURES = len(FEATURE_NAMES)

# Probability clamp keeping the loss finite.
PROB_CLAMP = 1e-7

# Denominator for the shared-language feature: number of supported languages.
_LANG_NORM = 24


@dataclass
class Passage:
    """Alias texts joined with ", " in source order (case-insensitive dedup),
    plus the distinct language tags represented."""

    text: str
    langs: list[str]


def build_passage(aliases: Sequence[AliasTerm]) -> Passage:
    if not aliases:
        raise DataError("cannot build a passage from an empty alias list")
    texts: list[str] = []
    seen: set[str] = set()
    langs: list[str] = []
    for alias in aliases:
        folded = alias.text.casefold()
        if folded not in seen:
            seen.add(folded)
            texts.append(alias.text)
        if alias.lang not in langs:
            langs.append(alias.lang)
    return Passage(text=", ".join(texts), langs=langs)


@dataclass
class TrainingPair:
    """One (query passage, candidate passage) unit of the reranking objective."""

    pair_id: str
    cui: str
    qid: str
    query_passage: Passage
    cand_passage: Passage
    label: int | None
    bm25_score: float
    bm25_rank: int


def build_pairs(
    concept: Concept,
    cands: CandidateList,
    entities: Mapping[str, WikiEntity] | Iterable[WikiEntity],
    gold_qid: str | None = None,
) -> list[TrainingPair]:
    """One pair per candidate; candidate passages use title+aliases only.

    Labels are 1 for the gold candidate and 0 otherwise, or absent when the
    gold is unknown (inference mode).  Raises DataError when a candidate qid
    cannot be resolved against the entity collection.
    """
    if not isinstance(entities, Mapping):
        entities = {e.qid: e for e in entities}
    query_passage = build_passage(concept.aliases)
    pairs = []
    for rank, (qid, score) in enumerate(cands.candidates, start=1):
        entity = entities.get(qid)
        if entity is None:
            raise DataError(f"unknown qid {qid} among candidates for {concept.cui}")
        pairs.append(
            TrainingPair(
                pair_id=f"{concept.cui}:{qid}",
                cui=concept.cui,
                qid=qid,
                query_passage=query_passage,
                cand_passage=build_passage(entity.aliases),
                label=None if gold_qid is None else int(qid == gold_qid),
                bm25_score=score,
                bm25_rank=rank,
            )
        )
    return pairs


# --- features -----------------------------------------------------------------

def _passage_grams(passage: Passage) -> Counter:
    grams: Counter = Counter()
    for token in tokenize(passage.text):
        grams.update(char_ngrams(token, 1, 5))
    return grams


def _passage_segments(passage: Passage) -> set[str]:
    return {seg.casefold() for seg in passage.text.split(", ")}


def extract_features(pair: TrainingPair, group_max_score: float | None = None) -> np.ndarray:
    """Fixed-order feature vector for one pair.

    bm25_score_normalized divides by the best score in the pair's candidate
    list; pass it as group_max_score (defaults to the pair's own score, which
    is only correct for the top-ranked pair).
    """
    q, c = pair.query_passage, pair.cand_passage

    q_tokens = set(tokenize(q.text))
    c_tokens = set(tokenize(c.text))
    union = q_tokens | c_tokens
    jaccard = len(q_tokens & c_tokens) / len(union) if union else 0.0

    cosine = SparseVector(dict(_passage_grams(q))).cosine(
        SparseVector(dict(_passage_grams(c)))
    )

    max_score = pair.bm25_score if group_max_score is None else group_max_score
    score_norm = pair.bm25_score / max_score if max_score > 0 else 0.0
    score_norm = min(1.0, max(0.0, score_norm))

    shared_langs = len(set(q.langs) & set(c.langs))

    flag = 1.0 if _passage_segments(q) & _passage_segments(c) else 0.0

    len_q, len_c = len(q.text), len(c.text)
    length_ratio = min(len_q, len_c) / max(len_q, len_c)

    return np.array(
        [
            jaccard,
            cosine,
            score_norm,
            1.0 / pair.bm25_rank,
            min(1.0, shared_langs / _LANG_NORM),
            flag,
            length_ratio,
        ],
        dtype=np.float64,
    )


def extract_group_features(pairs: Sequence[TrainingPair]) -> np.ndarray:
    """Feature matrix for one candidate group, sharing the group's max score."""
    group_max = max((p.bm25_score for p in pairs), default=0.0)
    return np.stack([extract_features(p, group_max) for p in pairs])


# --- model and objective --------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class ScorerModel:
    """Logistic scorer f(x) = sigmoid(w.x + b) over the fixed feature order."""

    weights: np.ndarray
    bias: float
    training_meta: dict

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (N_FEATURES,):
            raise DataError(
                f"weight dimension {self.weights.shape} does not match "
                f"{N_FEATURES} features"
            )

    def linear(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights + self.bias

    def score(self, features: np.ndarray) -> np.ndarray:
        return _sigmoid(np.atleast_1d(self.linear(features)))


def _check_single_positive(labels: Sequence[int | None]) -> int:
    if any(lab is None for lab in labels):
        raise DataError("group contains unlabeled pairs")
    positives = [i for i, lab in enumerate(labels) if lab == 1]
    if not positives:
        raise DataError("group lacks positive")
    if len(positives) > 1:
        raise DataError("group has more than one positive")
    return positives[0]


def group_loss_from_probs(probs: Sequence[float], labels: Sequence[int | None]) -> float:
    """The group objective from raw probabilities (clamped away from 0 and 1)."""
    _check_single_positive(labels)
    total = 0.0
    for p, lab in zip(probs, labels):
        p = min(1.0 - PROB_CLAMP, max(PROB_CLAMP, float(p)))
        total += -math.log(p) if lab == 1 else -math.log(1.0 - p)
    return total


def loss(model: ScorerModel, query_group: Sequence[TrainingPair]) -> float:
    """Group loss of the built-in scorer on one candidate group."""
    features = extract_group_features(query_group)
    probs = model.score(features)
    return group_loss_from_probs(probs.tolist(), [p.label for p in query_group])


def mean_loss_and_gradient(
    weights: np.ndarray,
    bias: float,
    features: np.ndarray,
    labels: np.ndarray,
    n_groups: int,
) -> tuple[float, np.ndarray, float]:
    """Mean group loss plus its analytic gradient.

    `features` stacks all pairs of all groups; the loss sums within groups
    and averages across groups, so the gradient is sum((p - y) * x) / G.
    """
    z = features @ weights + bias
    p = _sigmoid(z)
    clamped = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_pair = np.where(labels == 1, -np.log(clamped), -np.log(1.0 - clamped))
    mean_loss = float(per_pair.sum() / n_groups)
    dz = (p - labels) / n_groups
    return mean_loss, features.T @ dz, float(dz.sum())


def train_on_features(
    feature_groups: Sequence[np.ndarray],
    label_groups: Sequence[Sequence[int]],
    epochs: int,
    learning_rate: float,
    seed: int,
) -> ScorerModel:
    """Full-batch gradient descent on the mean group loss, zero-initialized."""
    if not feature_groups:
        raise DataError("no training groups")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if learning_rate <= 0:
        raise ValueError("learning_rate must be > 0")
    for labels in label_groups:
        _check_single_positive(list(labels))

    features = np.vstack([np.asarray(g, dtype=np.float64) for g in feature_groups])
    labels = np.concatenate([np.asarray(g, dtype=np.float64) for g in label_groups])
    n_groups = len(feature_groups)

    weights = np.zeros(features.shape[1], dtype=np.float64)
    bias = 0.0
    for _ in range(epochs):
        _, grad_w, grad_b = mean_loss_and_gradient(
            weights, bias, features, labels, n_groups
        )
        weights -= learning_rate * grad_w
        bias -= learning_rate * grad_b

    final_loss, _, _ = mean_loss_and_gradient(weights, bias, features, labels, n_groups)
    return ScorerModel(
        weights=weights,
        bias=bias,
        training_meta={
            "epochs": epochs,
            "learning_rate": learning_rate,
            "seed": seed,
            "final_loss": final_loss,
        },
    )


def train_scorer(
    groups: Sequence[Sequence[TrainingPair]],
    epochs: int = 500,
    learning_rate: float = 0.5,
    seed: int = 13,
) -> ScorerModel:
    """Train the built-in scorer on labeled candidate groups (one positive each)."""
    if not groups:
        raise DataError("no training groups")
    feature_groups = [extract_group_features(g) for g in groups]
    label_groups = [[p.label for p in g] for g in groups]
    return train_on_features(feature_groups, label_groups, epochs, learning_rate, seed)


def group_pairs(pairs: Iterable[TrainingPair]) -> dict[str, list[TrainingPair]]:
    """Group pairs by cui, preserving first-seen order."""
    groups: dict[str, list[TrainingPair]] = {}
    for pair in pairs:
        groups.setdefault(pair.cui, []).append(pair)
    return groups


def training_groups(
    pairs: Iterable[TrainingPair],
    negatives_per_group: int | None = None,
    seed: int = 13,
) -> list[list[TrainingPair]]:
    """Select trainable groups: exactly one positive, fully labeled.

    Groups whose gold was not retrieved (no positive) are dropped, matching
    the normalized-recall convention.  With negatives_per_group set, each
    group keeps its positive and a seeded sample of that many negatives.
    """
    rng = random.Random(seed)
    out: list[list[TrainingPair]] = []
    dropped = 0
    for cui, group in group_pairs(pairs).items():
        labels = [p.label for p in group]
        if any(lab is None for lab in labels) or sum(lab == 1 for lab in labels) != 1:
            dropped += 1
            continue
        if negatives_per_group is not None:
            positive = next(p for p in group if p.label == 1)
            negatives = [p for p in group if p.label != 1]
            if len(negatives) > negatives_per_group:
                negatives = rng.sample(negatives, negatives_per_group)
            keep = {id(positive)} | {id(n) for n in negatives}
            out.append([p for p in group if id(p) in keep])
        else:
            out.append(group)
    if dropped:
        logger.info("excluded %d groups without a usable positive", dropped)
    return out


# --- reranking --------------------------------------------------------------------

def score_and_rerank(
    model_or_scores: ScorerModel | Mapping[str, float],
    cands: CandidateList,
    pairs: Sequence[TrainingPair],
) -> CandidateList:
    """Reorder a candidate list by scorer output (descending).

    Ties keep the original candidate order.  The output is a permutation of
    the input: same qids, same length.  Raises DataError when the pairs do
    not cover the candidates exactly or a score is missing.
    """
    by_qid = {p.qid: p for p in pairs}
    if set(by_qid) != set(cands.qids) or len(pairs) != len(cands.candidates):
        raise DataError(
            f"pairs do not cover the candidate list for {cands.cui} exactly"
        )

    if isinstance(model_or_scores, ScorerModel):
        ordered = [by_qid[qid] for qid in cands.qids]
        probs = model_or_scores.score(extract_group_features(ordered))
        scores = {p.qid: float(s) for p, s in zip(ordered, probs)}
    else:
        scores = {}
        for pair in pairs:
            if pair.pair_id not in model_or_scores:
                raise DataError(
                    f"missing score for pair {pair.pair_id} (qid {pair.qid})"
                )
            scores[pair.qid] = float(model_or_scores[pair.pair_id])

    reordered = sorted(
        enumerate(cands.qids), key=lambda iq: (-scores[iq[1]], iq[0])
    )
    return CandidateList(
        cands.cui, [(qid, scores[qid]) for _, qid in reordered], cands.k
    )


# --- file protocol ------------------------------------------------------------------

def _passage_to_obj(p: Passage) -> dict:
    return {"text": p.text, "langs": p.langs}


def _passage_from_obj(obj) -> Passage:
    if isinstance(obj, str):
        return Passage(text=obj, langs=[])
    return Passage(text=obj["text"], langs=list(obj.get("langs", [])))


def export_pairs(pairs: Iterable[TrainingPair], path) -> None:
    """Write pairs.jsonl, the exchange format consumed by external scorers."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pair in pairs:
            row = {
                "pair_id": pair.pair_id,
                "cui": pair.cui,
                "qid": pair.qid,
                "query_passage": _passage_to_obj(pair.query_passage),
                "cand_passage": _passage_to_obj(pair.cand_passage),
            }
            if pair.label is not None:
                row["label"] = pair.label
            row["bm25_score"] = pair.bm25_score
            row["bm25_rank"] = pair.bm25_rank
            fh.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")) + "\n")


def load_pairs(path) -> list[TrainingPair]:
    pairs = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                pair = TrainingPair(
                    pair_id=row["pair_id"],
                    cui=row["cui"],
                    qid=row["qid"],
                    query_passage=_passage_from_obj(row["query_passage"]),
                    cand_passage=_passage_from_obj(row["cand_passage"]),
                    label=row.get("label"),
                    bm25_score=float(row["bm25_score"]),
                    bm25_rank=int(row["bm25_rank"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"malformed pair at line {lineno}: {exc}") from exc
            if pair.pair_id in seen:
                raise DataError(f"duplicate pair_id {pair.pair_id} at line {lineno}")
            if pair.label not in (None, 0, 1):
                raise DataError(f"invalid label {pair.label!r} at line {lineno}")
            seen.add(pair.pair_id)
            pairs.append(pair)
    return pairs


def import_scores(path) -> dict[str, float]:
    """Read scores.jsonl; every score must be in [0, 1], pair_ids unique."""
    scores: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                pair_id = row["pair_id"]
                score = float(row["score"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"malformed score at line {lineno}: {exc}") from exc
            if pair_id in scores:
                raise DataError(f"duplicate pair_id {pair_id} at line {lineno}")
            if not (0.0 <= score <= 1.0):
                raise DataError(
                    f"score out of range for {pair_id} at line {lineno}: {score}"
                )
            scores[pair_id] = score
    return scores


def save_model(model: ScorerModel, path) -> None:
    obj = {
        "feature_names": list(FEATURE_NAMES),
        "weights": [float(w) for w in model.weights],
        "bias": float(model.bias),
        "training_meta": model.training_meta,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, ensure_ascii=False, indent=2)
        fh.write("\n")


def load_model(path) -> ScorerModel:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if tuple(obj.get("feature_names", ())) != FEATURE_NAMES:
        raise DataError(f"model feature names do not match this build: {path}")
    return ScorerModel(
        weights=np.array(obj["weights"], dtype=np.float64),
        bias=float(obj["bias"]),
        training_meta=dict(obj.get("training_meta", {})),
    )
