"""Ground-truth and similarity entity graphs.

Both graphs connect query mentions to dictionary entities.  The ground
truth graph is binary: an edge exists exactly when the query and the
dictionary entry share at least one concept id, and every edge has
weight 1.  The similarity graph is weighted: a query row holds inner
products against all dictionary embeddings, scaled by the row maximum
so the best candidate sits at weight 1; only the top K candidates per
query are kept as edges.

Rows are plain numpy, ground truth is stored sparsely (sorted index
tuples per query), and everything is deterministic for fixed inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import ConceptDictionary, EntityRecord
from .encoder import EmbeddingMatrix, Encoder, encode
from .errors import DataError

LOGGER = logging.getLogger(__name__)


class GroundTruthGraph:
    """Binary query-to-dictionary links from shared concept ids."""

    def __init__(self, queries: Sequence[EntityRecord], dictionary: ConceptDictionary):
        by_concept: dict[str, list[int]] = {}
        for entry in dictionary:
            for cid in entry.concept_ids:
                by_concept.setdefault(cid, []).append(entry.index)
        edges: list[tuple[int, ...]] = []
        for rec in queries:
            if not rec.concept_ids:
                raise DataError(f"query {rec.surface!r} has no concept ids")
            linked: set[int] = set()
            for cid in rec.concept_ids:
                linked.update(by_concept.get(cid, ()))
            edges.append(tuple(sorted(linked)))
        self.queries = tuple(queries)
        self.dictionary = dictionary
        self._edges = tuple(edges)
        self._edge_sets = tuple(frozenset(e) for e in edges)

    @property
    def query_ids(self) -> range:
        return range(len(self.queries))

    def edges_for(self, query_id: int) -> tuple[int, ...]:
        return self._edges[query_id]

    def has_edge(self, query_id: int, dict_index: int) -> bool:
        return dict_index in self._edge_sets[query_id]

    def __len__(self) -> int:
        return len(self.queries)


@dataclass(frozen=True)
class SimilarityRow:
    """One query's similarities against the whole dictionary.

    ``weights`` are ``sims / max_sim`` when the row maximum is positive.
    A non-positive maximum would flip the ordering under division, so in
    that degenerate case the raw similarities are kept (``normalized``
    False) and a warning is logged.
    """

    sims: np.ndarray
    max_sim: float
    weights: np.ndarray
    normalized: bool
    query_id: int | None = None


@dataclass(frozen=True)
class CandidateSet:
    """Top-K dictionary indices for one query, best first.

    Sorted by descending weight; equal weights fall back to ascending
    dictionary index so selection is reproducible.
    """

    query_id: int | None
    k: int
    dict_indices: tuple[int, ...]
    weights: tuple[float, ...]


class SimilarityGraph:
    """Candidate sets for a batch of queries against one dictionary."""

    def __init__(
        self,
        queries: Sequence[EntityRecord],
        candidate_sets: Sequence[CandidateSet],
        dictionary_fingerprint: str,
        k: int,
    ):
        if len(queries) != len(candidate_sets):
            raise ValueError("one candidate set per query required")
        self.queries = tuple(queries)
        self.candidate_sets = tuple(candidate_sets)
        self.dictionary_fingerprint = dictionary_fingerprint
        self.k = k

    @property
    def rows(self) -> Mapping[int, CandidateSet]:
        return {i: cs for i, cs in enumerate(self.candidate_sets)}

    def __len__(self) -> int:
        return len(self.candidate_sets)


def _dict_vectors(dict_embeddings: EmbeddingMatrix | np.ndarray) -> np.ndarray:
    if isinstance(dict_embeddings, EmbeddingMatrix):
        return dict_embeddings.vectors
    return np.asarray(dict_embeddings)


def build_ground_truth(
    queries: Sequence[EntityRecord], dictionary: ConceptDictionary
) -> GroundTruthGraph:
    """Link each query to every dictionary entry sharing a concept id."""
    return GroundTruthGraph(queries, dictionary)


def similarity_row(
    query_embedding: np.ndarray,
    dict_embeddings: EmbeddingMatrix | np.ndarray,
    *,
    query_id: int | None = None,
) -> SimilarityRow:
    """Inner products of one query against all dictionary embeddings."""
    q = np.asarray(query_embedding, dtype=np.float64).reshape(-1)
    mat = _dict_vectors(dict_embeddings).astype(np.float64, copy=False)
    if mat.ndim != 2:
        raise ValueError(f"dictionary embeddings must be 2-d, got shape {mat.shape}")
    if mat.shape[1] != q.shape[0]:
        raise ValueError(
            f"dimension mismatch: query has {q.shape[0]}, dictionary has {mat.shape[1]}"
        )
    sims = mat @ q
    max_sim = float(sims.max())
    if max_sim > 0:
        weights = sims / max_sim
        normalized = True
    else:
        LOGGER.warning(
            "query %s: max similarity %.6g is not positive, keeping raw similarities",
            "?" if query_id is None else query_id,
            max_sim,
        )
        weights = sims.copy()
        normalized = False
    return SimilarityRow(sims=sims, max_sim=max_sim, weights=weights, normalized=normalized, query_id=query_id)


def top_k(row: SimilarityRow, k: int) -> CandidateSet:
    """Select the K best-weighted dictionary indices from a row."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    order = np.argsort(-row.weights, kind="stable")[: min(k, row.weights.shape[0])]
    return CandidateSet(
        query_id=row.query_id,
        k=k,
        dict_indices=tuple(int(i) for i in order),
        weights=tuple(float(row.weights[i]) for i in order),
    )


def build_similarity_graph(
    queries: Sequence[EntityRecord],
    dictionary: ConceptDictionary,
    handle: Encoder,
    k: int,
    *,
    dict_matrix: EmbeddingMatrix | np.ndarray | None = None,
) -> SimilarityGraph:
    """Embed queries and dictionary, keep each query's top K candidates.

    ``dict_matrix`` lets callers reuse dictionary embeddings computed
    elsewhere (they only change when encoder parameters change).
    """
    if not queries:
        raise ValueError("no queries")
    if dict_matrix is None:
        dict_matrix = encode(handle, dictionary.surfaces(), ids=[str(e.index) for e in dictionary])
    vectors = _dict_vectors(dict_matrix)
    if vectors.shape[0] != len(dictionary):
        raise ValueError(
            f"dictionary has {len(dictionary)} entries but matrix has {vectors.shape[0]} rows"
        )
    query_mat = handle.encode_batch([rec.surface for rec in queries])
    sets = [
        top_k(similarity_row(query_mat[i], vectors, query_id=i), k)
        for i in range(len(queries))
    ]
    return SimilarityGraph(queries, sets, dictionary.fingerprint(), k)


def write_similarity_graph(path: str | Path, graph: SimilarityGraph) -> None:
    """Dump edges as ``query_id<TAB>dict_index<TAB>weight`` rows."""
    lines = []
    for qid, cand in enumerate(graph.candidate_sets):
        for dict_index, weight in zip(cand.dict_indices, cand.weights):
            lines.append(f"{qid}\t{dict_index}\t{weight:.6f}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")
