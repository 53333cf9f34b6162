"""Serving: top-K normalization and pairwise entity matching.

Normalization re-embeds the query with the restored encoder, scores it
against the dictionary embeddings, and returns the ranked candidates;
the top-1 candidate is the predicted synonym.  Pair matching scores two
surfaces directly (cosine by default, raw inner product optionally)
and compares against a threshold calibrated on labeled pairs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import ConceptDictionary, PairRecord
from .encoder import Encoder, write_embedding_matrix, read_embedding_matrix
from .errors import CalibrationError, IntegrityError
from .graph import similarity_row, top_k

LOGGER = logging.getLogger(__name__)

SCORER_COSINE = "cosine"
SCORER_INNER = "inner"
SCORERS = (SCORER_COSINE, SCORER_INNER)

_DICT_EMB_FILE = "dict_embeddings.bin"
_DICT_EMB_META = "dict_embeddings.json"


@dataclass(frozen=True)
class RankedEntry:
    dict_index: int
    surface: str
    concept_ids: frozenset[str]
    weight: float


@dataclass(frozen=True)
class Normalization:
    """Ranked dictionary candidates for one query, best first."""

    query: str
    ranked: tuple[RankedEntry, ...]

    @property
    def top1(self) -> RankedEntry:
        return self.ranked[0]


@dataclass(frozen=True)
class PairDecision:
    """Match verdict for a pair: matched exactly when score >= threshold."""

    entity_a: str
    entity_b: str
    score: float
    threshold: float
    matched: bool


def dictionary_matrix(
    dictionary: ConceptDictionary,
    handle: Encoder,
    *,
    cache_dir: str | Path | None = None,
) -> np.ndarray:
    """Dictionary embeddings, optionally persisted beside a checkpoint.

    The cache stores the dictionary fingerprint and the encoder weight
    fingerprint; if either changed the embeddings are recomputed, so a
    stale cache can never leak into scoring.
    """
    if cache_dir is None:
        return handle.encode_batch(dictionary.surfaces())
    cache_dir = Path(cache_dir)
    emb_path = cache_dir / _DICT_EMB_FILE
    meta_path = cache_dir / _DICT_EMB_META
    wanted = {
        "dictionary_fingerprint": dictionary.fingerprint(),
        "weights_fingerprint": handle.weights_fingerprint(),
        "dim": handle.dim,
    }
    if emb_path.is_file() and meta_path.is_file():
        try:
            stored = json.loads(meta_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            stored = None
        if stored == wanted:
            vectors = read_embedding_matrix(emb_path)
            if vectors.shape == (len(dictionary), handle.dim):
                return vectors
            raise IntegrityError(f"{emb_path}: shape {vectors.shape} does not match dictionary")
        LOGGER.info("dictionary embedding cache is stale, re-embedding")
    vectors = handle.encode_batch(dictionary.surfaces())
    cache_dir.mkdir(parents=True, exist_ok=True)
    write_embedding_matrix(emb_path, vectors)
    meta_path.write_text(json.dumps(wanted, indent=2) + "\n", encoding="utf-8")
    return vectors


def normalize(
    query: str,
    dictionary: ConceptDictionary,
    handle: Encoder,
    k: int,
    *,
    dict_matrix: np.ndarray | None = None,
) -> Normalization:
    """Rank the dictionary against one query surface."""
    if not query:
        raise ValueError("cannot normalize an empty query")
    if dict_matrix is None:
        dict_matrix = dictionary_matrix(dictionary, handle)
    q_vec = handle.encode_batch([query])[0]
    cand = top_k(similarity_row(q_vec, dict_matrix), k)
    ranked = tuple(
        RankedEntry(
            dict_index=d,
            surface=dictionary[d].surface,
            concept_ids=dictionary[d].concept_ids,
            weight=w,
        )
        for d, w in zip(cand.dict_indices, cand.weights)
    )
    return Normalization(query=query, ranked=ranked)


def batch_normalize(
    queries: Sequence[str],
    dictionary: ConceptDictionary,
    handle: Encoder,
    k: int,
    *,
    dict_matrix: np.ndarray | None = None,
) -> list[Normalization]:
    """Normalize many queries against one dictionary embedding pass."""
    if dict_matrix is None:
        dict_matrix = dictionary_matrix(dictionary, handle)
    return [normalize(q, dictionary, handle, k, dict_matrix=dict_matrix) for q in queries]


def pair_score(a: str, b: str, handle: Encoder, *, scorer: str = SCORER_COSINE) -> float:
    """Similarity score of two surfaces under the given scorer.

    Cosine keeps scores in [-1, 1] and is exactly symmetric; ``inner``
    returns the raw inner product for callers that want unnormalized
    magnitudes.  Zero vectors score 0 against anything except an
    identical zero vector, which scores 1 under cosine.
    """
    if scorer not in SCORERS:
        raise ValueError(f"scorer must be one of {SCORERS}, got {scorer!r}")
    if not a or not b:
        raise ValueError("cannot score an empty surface")
    vecs = handle.encode_batch([a, b]).astype(np.float64)
    va, vb = vecs[0], vecs[1]
    inner = float(va @ vb)
    if scorer == SCORER_INNER:
        return inner
    na, nb = float(va @ va), float(vb @ vb)
    if na == 0.0 or nb == 0.0:
        return 1.0 if np.array_equal(va, vb) else 0.0
    return inner / float(np.sqrt(na * nb))


def classify_pair(
    a: str,
    b: str,
    handle: Encoder,
    threshold: float,
    *,
    scorer: str = SCORER_COSINE,
) -> PairDecision:
    """Decide whether two names refer to the same entity."""
    score = pair_score(a, b, handle, scorer=scorer)
    return PairDecision(
        entity_a=a, entity_b=b, score=score, threshold=threshold, matched=score >= threshold
    )


def _best_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Exhaustive scan over observed scores maximizing F1 of `>= t`."""
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    cum_tp = np.cumsum(sorted_labels)
    total_pos = int(labels.sum())

    best_f1 = -1.0
    best_t = float(sorted_scores[0])
    n = len(sorted_scores)
    for i in range(n):
        if i + 1 < n and sorted_scores[i + 1] == sorted_scores[i]:
            continue  # classify all pairs with an equal score together
        tp = int(cum_tp[i])
        fp = (i + 1) - tp
        fn = total_pos - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        if f1 >= best_f1:  # later candidates have smaller thresholds
            if f1 > best_f1 or sorted_scores[i] < best_t:
                best_f1 = f1
                best_t = float(sorted_scores[i])
    return best_t


def calibrate_threshold(
    pairs: Sequence[PairRecord],
    handle: Encoder,
    *,
    scorer: str = SCORER_COSINE,
) -> float:
    """Pick the F1-maximizing decision threshold on labeled pairs.

    Every observed score is tried as a threshold; among F1 ties the
    smallest threshold wins so recall is never given up for free.
    Needs both labels present, otherwise :class:`CalibrationError`.
    """
    if not pairs:
        raise CalibrationError("no pairs to calibrate on")
    labels = np.array([1.0 if p.label else 0.0 for p in pairs])
    if labels.min() == labels.max():
        raise CalibrationError("calibration needs both positive and negative pairs")
    scores = np.array([pair_score(p.entity_a, p.entity_b, handle, scorer=scorer) for p in pairs])
    if np.unique(scores).size == 1:
        LOGGER.warning(
            "all %d calibration scores are identical (%.6f); threshold is degenerate",
            len(scores),
            float(scores[0]),
        )
        return float(scores[0])
    return _best_threshold(scores, labels)


def write_normalizations(path: str | Path, normalizations: Sequence[Normalization]) -> None:
    """One row per (query, rank): query, rank, surface, ids, weight."""
    lines = []
    for norm in normalizations:
        for rank, entry in enumerate(norm.ranked, start=1):
            ids = "|".join(sorted(entry.concept_ids))
            lines.append(
                f"{norm.query}\t{rank}\t{entry.surface}\t{ids}\t{entry.weight:.6f}\n"
            )
    Path(path).write_text("".join(lines), encoding="utf-8")


def write_pair_decisions(path: str | Path, decisions: Sequence[PairDecision]) -> None:
    lines = [
        f"{d.entity_a}\t{d.entity_b}\t{d.score:.6f}\t{int(d.matched)}\n" for d in decisions
    ]
    Path(path).write_text("".join(lines), encoding="utf-8")
