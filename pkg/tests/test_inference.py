from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from edgenorm.corpus import ConceptDictionary, PairRecord
from edgenorm.encoder import ToyEncoder, write_embedding_matrix
from edgenorm.errors import CalibrationError, IntegrityError
from edgenorm.inference import (
    SCORER_INNER,
    batch_normalize,
    calibrate_threshold,
    classify_pair,
    dictionary_matrix,
    normalize,
    pair_score,
    write_normalizations,
    write_pair_decisions,
)


def oracle_best_threshold(scores, labels):
    """Try every observed score as a cutoff, explicit counting loops.

    Ascending scan with strict improvement keeps the smallest cutoff
    among F1 ties.
    """
    best_f1, best_t = -1.0, None
    for t in sorted(set(scores)):
        tp = sum(1 for s, l in zip(scores, labels) if s >= t and l)
        fp = sum(1 for s, l in zip(scores, labels) if s >= t and not l)
        fn = sum(1 for s, l in zip(scores, labels) if s < t and l)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (
            2 * precision * recall / (precision + recall)
            if precision + recall
            else 0.0
        )
        if f1 > best_f1:
            best_f1, best_t = f1, t
    return best_t


def angle_encoder(lookup_encoder_cls, scores):
    """Surfaces p0..pN score cos-similarity ``scores[i]`` against 'anchor'."""
    table = {"anchor": [1.0, 0.0]}
    for i, s in enumerate(scores):
        theta = math.acos(max(-1.0, min(1.0, s)))
        table[f"p{i}"] = [math.cos(theta), math.sin(theta)]
    return lookup_encoder_cls(table)


class TestDictionaryMatrix:
    def test_uncached_matches_direct_encoding(self, drug_dictionary):
        handle = ToyEncoder(dim=16, seed=0)
        np.testing.assert_array_equal(
            dictionary_matrix(drug_dictionary, handle),
            handle.encode_batch(drug_dictionary.surfaces()),
        )

    def test_cache_round_trip_and_hit(self, tmp_path, drug_dictionary, monkeypatch):
        handle = ToyEncoder(dim=16, seed=0)
        first = dictionary_matrix(drug_dictionary, handle, cache_dir=tmp_path)
        assert (tmp_path / "dict_embeddings.bin").is_file()

        calls = {"n": 0}
        original = handle.encode_batch

        def spy(surfaces):
            calls["n"] += 1
            return original(surfaces)

        monkeypatch.setattr(handle, "encode_batch", spy)
        second = dictionary_matrix(drug_dictionary, handle, cache_dir=tmp_path)
        assert calls["n"] == 0
        np.testing.assert_array_equal(second, first)

    def test_weight_change_invalidates_cache(self, tmp_path, drug_dictionary):
        import torch

        handle = ToyEncoder(dim=16, seed=0)
        stale = dictionary_matrix(drug_dictionary, handle, cache_dir=tmp_path)
        with torch.no_grad():
            next(iter(handle.parameters())).add_(0.5)
        handle.mark_updated()
        fresh = dictionary_matrix(drug_dictionary, handle, cache_dir=tmp_path)
        assert not np.array_equal(fresh, stale)
        np.testing.assert_array_equal(
            fresh, handle.encode_batch(drug_dictionary.surfaces())
        )

    def test_dictionary_change_invalidates_cache(self, tmp_path, drug_dictionary):
        handle = ToyEncoder(dim=16, seed=0)
        dictionary_matrix(drug_dictionary, handle, cache_dir=tmp_path)
        other = ConceptDictionary([("aspirin", {"C01"})])
        fresh = dictionary_matrix(other, handle, cache_dir=tmp_path)
        assert fresh.shape == (1, 16)

    def test_corrupt_cache_meta_triggers_recompute(self, tmp_path, drug_dictionary):
        handle = ToyEncoder(dim=16, seed=0)
        expected = dictionary_matrix(drug_dictionary, handle, cache_dir=tmp_path)
        (tmp_path / "dict_embeddings.json").write_text("{oops", encoding="utf-8")
        np.testing.assert_array_equal(
            dictionary_matrix(drug_dictionary, handle, cache_dir=tmp_path), expected
        )

    def test_shape_drift_with_matching_meta_is_an_error(self, tmp_path, drug_dictionary):
        handle = ToyEncoder(dim=16, seed=0)
        dictionary_matrix(drug_dictionary, handle, cache_dir=tmp_path)
        write_embedding_matrix(
            tmp_path / "dict_embeddings.bin", np.zeros((2, 16), dtype=np.float32)
        )
        with pytest.raises(IntegrityError):
            dictionary_matrix(drug_dictionary, handle, cache_dir=tmp_path)


class TestNormalize:
    def test_ranking_follows_hand_picked_vectors(self, lookup_encoder_cls):
        dictionary = ConceptDictionary(
            [("exact", {"C1"}), ("close", {"C2"}), ("far", {"C3"})]
        )
        handle = lookup_encoder_cls(
            {
                "exact": [1.0, 0.0],
                "close": [0.8, 0.6],
                "far": [-1.0, 0.0],
                "query": [1.0, 0.0],
            }
        )
        result = normalize("query", dictionary, handle, k=3)
        assert [e.surface for e in result.ranked] == ["exact", "close", "far"]
        assert result.top1.concept_ids == frozenset({"C1"})
        assert result.top1.weight == 1.0

    def test_k_truncates_ranking(self, drug_dictionary):
        handle = ToyEncoder(dim=32, seed=0)
        result = normalize("aspirin", drug_dictionary, handle, k=2)
        assert len(result.ranked) == 2

    def test_empty_query_rejected(self, drug_dictionary):
        handle = ToyEncoder(dim=8, seed=0)
        with pytest.raises(ValueError):
            normalize("", drug_dictionary, handle, k=1)

    def test_batch_agrees_with_single_calls(self, drug_dictionary):
        handle = ToyEncoder(dim=32, seed=0)
        queries = ["aspirin", "paracetamol caplets"]
        batch = batch_normalize(queries, drug_dictionary, handle, k=3)
        for query, got in zip(queries, batch):
            solo = normalize(query, drug_dictionary, handle, k=3)
            assert [e.dict_index for e in got.ranked] == [e.dict_index for e in solo.ranked]

    def test_supplied_matrix_skips_dictionary_encoding(self, drug_dictionary, monkeypatch):
        handle = ToyEncoder(dim=16, seed=0)
        matrix = handle.encode_batch(drug_dictionary.surfaces())

        original = handle.encode_batch
        seen: list[list[str]] = []

        def spy(surfaces):
            seen.append(list(surfaces))
            return original(surfaces)

        monkeypatch.setattr(handle, "encode_batch", spy)
        normalize("aspirin", drug_dictionary, handle, k=1, dict_matrix=matrix)
        assert seen == [["aspirin"]]


class TestPairScore:
    def test_identical_surfaces_score_one(self):
        handle = ToyEncoder(dim=32, seed=0)
        assert pair_score("aspirin", "aspirin", handle) == pytest.approx(1.0)

    def test_cosine_is_symmetric_and_bounded(self):
        handle = ToyEncoder(dim=32, seed=0)
        ab = pair_score("aspirin", "tylenol", handle)
        ba = pair_score("tylenol", "aspirin", handle)
        assert ab == pytest.approx(ba, abs=1e-12)
        assert -1.0 <= ab <= 1.0

    def test_inner_scorer_matches_manual_dot(self, lookup_encoder_cls):
        handle = lookup_encoder_cls({"a": [2.0, 3.0], "b": [4.0, -1.0]})
        assert pair_score("a", "b", handle, scorer=SCORER_INNER) == pytest.approx(5.0)

    def test_cosine_matches_manual_formula(self, lookup_encoder_cls):
        handle = lookup_encoder_cls({"a": [3.0, 4.0], "b": [4.0, 3.0]})
        assert pair_score("a", "b", handle) == pytest.approx(24.0 / 25.0)

    def test_zero_vector_conventions(self, lookup_encoder_cls):
        handle = lookup_encoder_cls({"z1": [0.0, 0.0], "z2": [0.0, 0.0], "x": [1.0, 0.0]})
        assert pair_score("z1", "x", handle) == 0.0
        assert pair_score("z1", "z2", handle) == 1.0

    def test_bad_inputs_rejected(self):
        handle = ToyEncoder(dim=8, seed=0)
        with pytest.raises(ValueError):
            pair_score("a", "b", handle, scorer="manhattan")
        with pytest.raises(ValueError):
            pair_score("", "b", handle)


class TestClassifyPair:
    def test_threshold_boundary_is_inclusive(self, lookup_encoder_cls):
        handle = lookup_encoder_cls({"a": [1.0, 0.0], "b": [1.0, 0.0]})
        decision = classify_pair("a", "b", handle, threshold=1.0)
        assert decision.matched
        assert decision.score == pytest.approx(1.0)

    def test_below_threshold_rejects(self, lookup_encoder_cls):
        handle = lookup_encoder_cls({"a": [1.0, 0.0], "b": [0.0, 1.0]})
        decision = classify_pair("a", "b", handle, threshold=0.5)
        assert not decision.matched
        assert decision.threshold == 0.5


class TestCalibrateThreshold:
    def test_two_cluster_case(self, lookup_encoder_cls):
        scores = [0.9, 0.8, 0.2, 0.1]
        labels = [True, True, False, False]
        handle = angle_encoder(lookup_encoder_cls, scores)
        pairs = [
            PairRecord("anchor", f"p{i}", labels[i]) for i in range(len(scores))
        ]
        got = calibrate_threshold(pairs, handle)
        realized = [pair_score("anchor", f"p{i}", handle) for i in range(len(scores))]
        assert got == oracle_best_threshold(realized, labels)
        assert 0.2 < got <= 0.8 + 1e-9

    # the fixture only hands over a stateless class, so reuse is fine
    @settings(suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(
        st.lists(
            st.tuples(
                st.integers(min_value=-9, max_value=9).map(lambda v: v / 10.0),
                st.booleans(),
            ),
            min_size=2,
            max_size=16,
        ).filter(lambda rows: len({l for _, l in rows}) == 2)
    )
    def test_matches_exhaustive_oracle(self, lookup_encoder_cls, rows):
        scores = [s for s, _ in rows]
        labels = [l for _, l in rows]
        handle = angle_encoder(lookup_encoder_cls, scores)
        pairs = [PairRecord("anchor", f"p{i}", labels[i]) for i in range(len(rows))]
        realized = [pair_score("anchor", f"p{i}", handle) for i in range(len(rows))]
        if len(set(realized)) == 1:
            return  # degenerate path tested separately
        assert calibrate_threshold(pairs, handle) == oracle_best_threshold(realized, labels)

    def test_empty_rejected(self, lookup_encoder_cls):
        handle = angle_encoder(lookup_encoder_cls, [])
        with pytest.raises(CalibrationError):
            calibrate_threshold([], handle)

    def test_single_class_rejected(self, lookup_encoder_cls):
        handle = angle_encoder(lookup_encoder_cls, [0.9, 0.8])
        pairs = [PairRecord("anchor", "p0", True), PairRecord("anchor", "p1", True)]
        with pytest.raises(CalibrationError):
            calibrate_threshold(pairs, handle)

    def test_identical_scores_warn_and_return_that_score(self, lookup_encoder_cls, caplog):
        handle = lookup_encoder_cls(
            {"anchor": [1.0, 0.0], "p0": [1.0, 0.0], "p1": [2.0, 0.0]}
        )
        pairs = [PairRecord("anchor", "p0", True), PairRecord("anchor", "p1", False)]
        with caplog.at_level("WARNING"):
            got = calibrate_threshold(pairs, handle)
        assert got == pytest.approx(1.0)
        assert any("identical" in r.getMessage() for r in caplog.records)


class TestWriters:
    def test_normalization_rows(self, tmp_path, drug_dictionary):
        handle = ToyEncoder(dim=32, seed=0)
        results = batch_normalize(["aspirin"], drug_dictionary, handle, k=2)
        path = tmp_path / "norm.tsv"
        write_normalizations(path, results)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 2
        query, rank, surface, ids, weight = lines[0].split("\t")
        assert (query, rank) == ("aspirin", "1")
        assert surface == results[0].top1.surface
        assert float(weight) == pytest.approx(results[0].top1.weight, abs=5e-7)
        assert ids == "|".join(sorted(results[0].top1.concept_ids))

    def test_pair_decision_rows(self, tmp_path, lookup_encoder_cls):
        handle = lookup_encoder_cls({"a": [1.0, 0.0], "b": [0.0, 1.0]})
        decisions = [classify_pair("a", "b", handle, threshold=0.5)]
        path = tmp_path / "pairs.tsv"
        write_pair_decisions(path, decisions)
        assert path.read_text(encoding="utf-8") == "a\tb\t0.000000\t0\n"
