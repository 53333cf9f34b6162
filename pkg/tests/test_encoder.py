from __future__ import annotations

import zlib

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from edgenorm.encoder import (
    DEFAULT_TOY_BUCKETS,
    EmbeddingMatrix,
    POOL_FIRST,
    POOL_MEAN,
    ToyEncoder,
    encode,
    encode_trainable,
    make_toy_encoder,
    read_embedding_matrix,
    write_embedding_matrix,
)
from edgenorm.errors import EncoderModeError, IntegrityError


def oracle_features(surface: str, n_buckets: int) -> np.ndarray:
    """Hashed n-gram counts recomputed with nothing from the library."""
    counts = np.zeros(n_buckets, dtype=np.float64)
    for n in (2, 3):
        for i in range(len(surface) - n + 1):
            gram = surface[i : i + n]
            counts[zlib.crc32(gram.encode("utf-8")) % n_buckets] += 1.0
    return counts


class TestEmbeddingMatrix:
    def test_row_lookup(self):
        matrix = EmbeddingMatrix(np.eye(3, dtype=np.float32), ["a", "b", "c"])
        assert len(matrix) == 3
        assert matrix.dim == 3
        np.testing.assert_array_equal(matrix.row("b"), [0.0, 1.0, 0.0])
        assert matrix.index_map == {"a": 0, "b": 1, "c": 2}

    def test_rejects_non_2d(self):
        with pytest.raises(ValueError):
            EmbeddingMatrix(np.zeros(4), ["a"])

    def test_rejects_non_finite(self):
        from edgenorm.errors import DataError

        vectors = np.array([[1.0, np.nan]])
        with pytest.raises(DataError):
            EmbeddingMatrix(vectors, ["a"])

    def test_rejects_duplicate_ids(self):
        with pytest.raises(ValueError):
            EmbeddingMatrix(np.zeros((2, 2)), ["a", "a"])

    def test_rejects_row_count_mismatch(self):
        with pytest.raises(ValueError):
            EmbeddingMatrix(np.zeros((2, 2)), ["a"])


class TestToyFeaturization:
    def test_char_ngrams_order(self):
        assert ToyEncoder.char_ngrams("abcd") == [
            "ab", "bc", "cd", "abc", "bcd",
        ]

    def test_single_char_has_no_ngrams(self):
        assert ToyEncoder.char_ngrams("x") == []

    @given(st.text(alphabet="abcdefgh -.", min_size=0, max_size=30))
    def test_featurize_matches_oracle(self, surface):
        enc = ToyEncoder(dim=4, seed=0, n_buckets=64)
        np.testing.assert_array_equal(enc.featurize(surface), oracle_features(surface, 64))

    def test_feature_cache_reuses_arrays(self):
        enc = ToyEncoder(dim=4, seed=0)
        assert enc.featurize("aspirin") is enc.featurize("aspirin")

    def test_bucket_is_stable_across_instances(self):
        a = ToyEncoder(dim=4, seed=0)
        b = ToyEncoder(dim=8, seed=99)
        assert a.bucket("asp") == b.bucket("asp")

    def test_dim_and_bucket_floors(self):
        with pytest.raises(ValueError):
            ToyEncoder(dim=1, seed=0)
        with pytest.raises(ValueError):
            ToyEncoder(dim=4, seed=0, n_buckets=4)


class TestToyEncoding:
    def test_same_seed_gives_identical_embeddings(self):
        a = ToyEncoder(dim=16, seed=3)
        b = ToyEncoder(dim=16, seed=3)
        np.testing.assert_array_equal(
            a.encode_batch(["aspirin", "advil"]), b.encode_batch(["aspirin", "advil"])
        )

    def test_different_seeds_differ(self):
        a = ToyEncoder(dim=16, seed=0).encode_batch(["aspirin"])
        b = ToyEncoder(dim=16, seed=1).encode_batch(["aspirin"])
        assert not np.array_equal(a, b)

    def test_forward_is_features_times_weight(self):
        enc = ToyEncoder(dim=8, seed=2, n_buckets=32)
        weight = enc.state_dict()["weight"].numpy()
        expected = oracle_features("tylenol", 32).astype(np.float32) @ weight
        got = enc.encode_batch(["tylenol"])[0]
        np.testing.assert_allclose(got, expected, rtol=1e-6)

    def test_batch_matches_singletons_with_duplicates(self):
        enc = ToyEncoder(dim=8, seed=0)
        surfaces = ["a b", "c d", "a b"]
        batch = enc.encode_batch(surfaces)
        for surface, row in zip(surfaces, batch):
            np.testing.assert_array_equal(row, enc.encode_batch([surface])[0])
        np.testing.assert_array_equal(batch[0], batch[2])

    def test_gradient_path_agrees_with_plain_encode(self):
        enc = ToyEncoder(dim=8, seed=5)
        plain = enc.encode_batch(["ibuprofen"])
        traced = enc.encode_tensor(["ibuprofen"])
        assert traced.requires_grad
        np.testing.assert_array_equal(traced.detach().numpy(), plain)

    def test_empty_surface_rejected(self):
        enc = ToyEncoder(dim=4, seed=0)
        with pytest.raises(ValueError):
            enc.encode_batch(["ok", ""])

    def test_frozen_encoder_refuses_gradient_path(self):
        enc = ToyEncoder(dim=4, seed=0)
        enc.freeze()
        with pytest.raises(EncoderModeError):
            enc.encode_tensor(["aspirin"])
        enc.unfreeze()
        enc.encode_tensor(["aspirin"])

    def test_mark_updated_bumps_version(self):
        enc = ToyEncoder(dim=4, seed=0)
        before = enc.version
        enc.mark_updated()
        assert enc.version == before + 1

    def test_fingerprint_tracks_weights(self):
        enc = ToyEncoder(dim=4, seed=0)
        first = enc.weights_fingerprint()
        assert enc.weights_fingerprint() == first
        with torch.no_grad():
            next(iter(enc.parameters())).add_(1.0)
        enc.mark_updated()
        assert enc.weights_fingerprint() != first

    def test_state_dict_round_trip(self):
        source = ToyEncoder(dim=8, seed=7)
        target = ToyEncoder(dim=8, seed=0)
        target.load_state_dict(source.state_dict())
        np.testing.assert_array_equal(
            target.encode_batch(["aspirin"]), source.encode_batch(["aspirin"])
        )
        assert target.weights_fingerprint() == source.weights_fingerprint()

    def test_load_rejects_shape_mismatch(self):
        from edgenorm.errors import DataError

        target = ToyEncoder(dim=8, seed=0)
        with pytest.raises(DataError):
            target.load_state_dict(ToyEncoder(dim=4, seed=0).state_dict())

    def test_make_toy_encoder_defaults(self):
        handle = make_toy_encoder(dim=12, seed=4)
        assert handle.dim == 12
        assert handle.n_buckets == DEFAULT_TOY_BUCKETS
        assert handle.trainable and not handle.frozen


class TestEncodeHelpers:
    def test_encode_defaults_to_positional_ids(self):
        handle = ToyEncoder(dim=4, seed=0)
        matrix = encode(handle, ["aspirin", "advil"])
        assert matrix.ids == ("0", "1")

    def test_encode_with_explicit_ids(self):
        handle = ToyEncoder(dim=4, seed=0)
        matrix = encode(handle, ["aspirin"], ids=["q7"])
        np.testing.assert_array_equal(matrix.row("q7"), handle.encode_batch(["aspirin"])[0])

    def test_encode_trainable_backprops_to_weights(self):
        handle = ToyEncoder(dim=4, seed=0)
        out = encode_trainable(handle, ["aspirin"])
        out.sum().backward()
        grad = next(iter(handle.parameters())).grad
        assert grad is not None and float(grad.abs().sum()) > 0


class TestEmbeddingMatrixIO:
    def test_round_trip_is_exact(self, tmp_path):
        vectors = np.random.default_rng(0).normal(size=(5, 3)).astype(np.float32)
        path = tmp_path / "emb.bin"
        write_embedding_matrix(path, vectors)
        np.testing.assert_array_equal(read_embedding_matrix(path), vectors)

    def test_truncated_payload_detected(self, tmp_path):
        vectors = np.ones((4, 4), dtype=np.float32)
        path = tmp_path / "emb.bin"
        write_embedding_matrix(path, vectors)
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(IntegrityError):
            read_embedding_matrix(path)

    def test_garbage_header_detected(self, tmp_path):
        path = tmp_path / "emb.bin"
        path.write_bytes(b"not a header\n\x00\x00")
        with pytest.raises(IntegrityError):
            read_embedding_matrix(path)


@pytest.fixture(scope="module")
def tiny_bert(tmp_path_factory):
    transformers = pytest.importorskip("transformers")
    vocab_dir = tmp_path_factory.mktemp("vocab")
    words = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    words += list("abcdefghij") + ["acid", "aspirin", "pain", "relief", "co"]
    (vocab_dir / "vocab.txt").write_text("\n".join(words) + "\n", encoding="utf-8")
    tokenizer = transformers.BertTokenizerFast(str(vocab_dir / "vocab.txt"), do_lower_case=True)
    config = transformers.BertConfig(
        vocab_size=len(words),
        hidden_size=32,
        num_hidden_layers=1,
        num_attention_heads=2,
        intermediate_size=64,
        max_position_embeddings=64,
    )
    torch.manual_seed(0)
    model = transformers.BertModel(config)
    return model, tokenizer


class TestContextualEncoder:
    def test_dim_comes_from_model_config(self, tiny_bert):
        from edgenorm.encoder import ContextualEncoder

        model, tokenizer = tiny_bert
        handle = ContextualEncoder(model=model, tokenizer=tokenizer)
        assert handle.dim == 32

    def test_first_token_pooling_matches_hidden_state(self, tiny_bert):
        from edgenorm.encoder import ContextualEncoder

        model, tokenizer = tiny_bert
        handle = ContextualEncoder(model=model, tokenizer=tokenizer, pooling=POOL_FIRST)
        got = handle.encode_batch(["aspirin acid"])
        batch = tokenizer(["aspirin acid"], return_tensors="pt")
        with torch.no_grad():
            hidden = model(**batch).last_hidden_state
        np.testing.assert_allclose(got[0], hidden[0, 0, :].numpy(), atol=1e-6)

    def test_mean_pooling_averages_unpadded_positions(self, tiny_bert):
        from edgenorm.encoder import ContextualEncoder

        model, tokenizer = tiny_bert
        handle = ContextualEncoder(model=model, tokenizer=tokenizer, pooling=POOL_MEAN)
        surfaces = ["aspirin", "pain relief co"]
        got = handle.encode_batch(surfaces)
        batch = tokenizer(surfaces, padding=True, return_tensors="pt")
        with torch.no_grad():
            hidden = model(**batch).last_hidden_state
        for i in range(len(surfaces)):
            keep = batch["attention_mask"][i].bool()
            expected = hidden[i][keep].mean(dim=0).numpy()
            np.testing.assert_allclose(got[i], expected, atol=1e-6)

    def test_long_surface_truncates_and_logs(self, tiny_bert):
        from edgenorm.encoder import ContextualEncoder

        model, tokenizer = tiny_bert
        handle = ContextualEncoder(model=model, tokenizer=tokenizer, max_length=4)
        surface = "a b c d e f g"
        out = handle.encode_batch([surface])
        assert out.shape == (1, 32)
        assert surface in handle.truncation_log

    def test_frozen_blocks_gradient_path(self, tiny_bert):
        from edgenorm.encoder import ContextualEncoder

        model, tokenizer = tiny_bert
        handle = ContextualEncoder(model=model, tokenizer=tokenizer, frozen=True)
        with pytest.raises(EncoderModeError):
            handle.encode_tensor(["aspirin"])
        np.testing.assert_allclose(
            handle.encode_batch(["aspirin"]),
            ContextualEncoder(model=model, tokenizer=tokenizer).encode_batch(["aspirin"]),
        )

    def test_gradient_path_agrees_with_plain_encode(self, tiny_bert):
        # dropout must stay off for this to hold
        from edgenorm.encoder import ContextualEncoder

        model, tokenizer = tiny_bert
        handle = ContextualEncoder(model=model, tokenizer=tokenizer)
        plain = handle.encode_batch(["pain relief"])
        traced = handle.encode_tensor(["pain relief"]).detach().numpy()
        np.testing.assert_allclose(traced, plain, atol=1e-7)

    def test_architecture_round_trip_restores_weights(self, tiny_bert, tmp_path):
        from edgenorm.encoder import ContextualEncoder

        model, tokenizer = tiny_bert
        source = ContextualEncoder(model=model, tokenizer=tokenizer)
        source.save_architecture(tmp_path / "arch")
        rebuilt = ContextualEncoder.from_architecture(tmp_path / "arch")
        rebuilt.load_state_dict(source.state_dict())
        np.testing.assert_allclose(
            rebuilt.encode_batch(["aspirin acid"]),
            source.encode_batch(["aspirin acid"]),
            atol=1e-6,
        )

    def test_unknown_pooling_rejected(self, tiny_bert):
        from edgenorm.encoder import ContextualEncoder

        model, tokenizer = tiny_bert
        with pytest.raises(ValueError):
            ContextualEncoder(model=model, tokenizer=tokenizer, pooling="max")
