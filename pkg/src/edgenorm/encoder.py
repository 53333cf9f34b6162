"""Embedding encoders behind one trainable interface.

Two encoder families are supported.  ``ToyEncoder`` hashes character
n-grams into count features and applies a single trainable linear map;
it is fully deterministic at a fixed seed and fast enough for CPU-only
tests.  ``ContextualEncoder`` wraps a pretrained transformer (BioBERT,
BERT, or anything compatible with the ``transformers`` AutoModel API)
and pools its final hidden states; pretraining itself is out of scope
here, the model arrives as an external artifact.

Both expose the same surface: ``encode`` for detached numpy embeddings
(cached per parameter version) and ``encode_trainable`` for a torch
tensor that participates in gradient computation.
"""

from __future__ import annotations

import hashlib
import logging
import math
import zlib
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import DataError, EncoderModeError, IntegrityError

LOGGER = logging.getLogger(__name__)

KIND_TOY = "toy-trainable"
KIND_CONTEXTUAL = "pretrained-contextual"
POOL_FIRST = "first-token"
POOL_MEAN = "mean"
POOLING_MODES = (POOL_FIRST, POOL_MEAN)

DEFAULT_CONTEXTUAL_DIM = 768
DEFAULT_MAX_TOKENS = 25
DEFAULT_TOY_BUCKETS = 2048
NGRAM_SIZES = (2, 3)


class EmbeddingMatrix:
    """Row-aligned embeddings with an id-to-row lookup.

    Row ``i`` embeds the ``i``-th input; ``ids`` must be unique so the
    lookup is a bijection onto ``0..N-1``.  Vectors must be finite.
    """

    def __init__(self, vectors: np.ndarray, ids: Sequence[str]):
        vectors = np.asarray(vectors)
        if vectors.ndim != 2:
            raise ValueError(f"expected a 2-d array, got shape {vectors.shape}")
        if len(ids) != vectors.shape[0]:
            raise ValueError(f"{len(ids)} ids for {vectors.shape[0]} rows")
        if not np.all(np.isfinite(vectors)):
            raise DataError("embedding matrix contains non-finite values")
        self.vectors = vectors
        self.ids = tuple(str(i) for i in ids)
        self.index_map = {eid: row for row, eid in enumerate(self.ids)}
        if len(self.index_map) != len(self.ids):
            raise ValueError("embedding ids are not unique")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def row(self, entity_id: str) -> np.ndarray:
        return self.vectors[self.index_map[entity_id]]


class Encoder:
    """Common behavior: input checks, per-version embedding cache, freezing."""

    kind: str = "abstract"

    def __init__(self, dim: int, pooling: str = "none"):
        self.dim = int(dim)
        self.pooling = pooling
        self._frozen = False
        self._version = 0
        self._cache: dict[str, np.ndarray] = {}
        self._fingerprint: str | None = None

    # -- parameter bookkeeping

    @property
    def version(self) -> int:
        return self._version

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        self._frozen = True

    def unfreeze(self) -> None:
        self._frozen = False

    def mark_updated(self) -> None:
        """Invalidate cached embeddings after an in-place parameter change."""
        self._version += 1
        self._cache.clear()
        self._fingerprint = None

    @property
    def trainable(self) -> bool:
        return any(True for _ in self.parameters())

    def parameters(self) -> Iterable[torch.nn.Parameter]:
        raise NotImplementedError

    def state_dict(self) -> dict[str, torch.Tensor]:
        raise NotImplementedError

    def load_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        raise NotImplementedError

    def metadata(self) -> dict:
        """Constructor arguments needed to rebuild this handle."""
        raise NotImplementedError

    def weights_fingerprint(self) -> str:
        """Stable hash of the current parameters, cached per version."""
        if self._fingerprint is None:
            h = hashlib.sha256()
            for name in sorted(self.state_dict()):
                tensor = self.state_dict()[name].detach().cpu().contiguous()
                h.update(name.encode("utf-8"))
                h.update(str(tuple(tensor.shape)).encode("ascii"))
                h.update(tensor.numpy().tobytes())
            self._fingerprint = h.hexdigest()
        return self._fingerprint

    # -- encoding

    def _forward_numpy(self, surfaces: list[str]) -> np.ndarray:
        raise NotImplementedError

    def _forward_tensor(self, surfaces: list[str]) -> torch.Tensor:
        raise NotImplementedError

    @staticmethod
    def _check_surfaces(surfaces: Sequence[str]) -> list[str]:
        surfaces = list(surfaces)
        if not surfaces:
            raise ValueError("no surfaces to encode")
        if any(not s for s in surfaces):
            raise ValueError("cannot encode an empty surface")
        return surfaces

    def encode_batch(self, surfaces: Sequence[str]) -> np.ndarray:
        """Detached embeddings, order-aligned with the input."""
        surfaces = self._check_surfaces(surfaces)
        missing = [s for s in dict.fromkeys(surfaces) if s not in self._cache]
        if missing:
            fresh = self._forward_numpy(missing)
            for surface, row in zip(missing, fresh):
                self._cache[surface] = row
        return np.stack([self._cache[s] for s in surfaces])

    def encode_tensor(self, surfaces: Sequence[str]) -> torch.Tensor:
        """Embeddings connected to the parameter graph for training."""
        if self._frozen or not self.trainable:
            raise EncoderModeError(f"{self.kind} encoder is frozen or has no parameters")
        return self._forward_tensor(self._check_surfaces(surfaces))


class ToyEncoder(Encoder):
    """Hashed character n-gram counts through one trainable linear map.

    Features are counts of 2- and 3-grams hashed into ``n_buckets``
    slots with crc32, so featurization is deterministic across
    processes.  The only parameters are the ``n_buckets x dim`` weight
    matrix, initialized from a generator seeded with ``seed``.
    """

    kind = KIND_TOY

    def __init__(
        self,
        dim: int,
        seed: int,
        *,
        n_buckets: int = DEFAULT_TOY_BUCKETS,
        dtype: torch.dtype = torch.float32,
    ):
        if dim < 2:
            raise ValueError(f"embedding dim must be >= 2, got {dim}")
        if n_buckets < 8:
            raise ValueError(f"n_buckets must be >= 8, got {n_buckets}")
        super().__init__(dim=dim)
        self.seed = int(seed)
        self.n_buckets = int(n_buckets)
        gen = torch.Generator().manual_seed(self.seed)
        init = torch.randn(self.n_buckets, dim, generator=gen, dtype=dtype)
        self._weight = torch.nn.Parameter(init / math.sqrt(self.n_buckets))
        self._feature_cache: dict[str, np.ndarray] = {}

    @staticmethod
    def char_ngrams(surface: str) -> list[str]:
        return [
            surface[i : i + n]
            for n in NGRAM_SIZES
            for i in range(len(surface) - n + 1)
        ]

    def bucket(self, ngram: str) -> int:
        return zlib.crc32(ngram.encode("utf-8")) % self.n_buckets

    def featurize(self, surface: str) -> np.ndarray:
        cached = self._feature_cache.get(surface)
        if cached is None:
            counts = np.zeros(self.n_buckets, dtype=np.float64)
            for ngram in self.char_ngrams(surface):
                counts[self.bucket(ngram)] += 1.0
            cached = counts
            self._feature_cache[surface] = cached
        return cached

    def _feature_matrix(self, surfaces: list[str]) -> np.ndarray:
        return np.stack([self.featurize(s) for s in surfaces])

    def _forward_numpy(self, surfaces: list[str]) -> np.ndarray:
        with torch.no_grad():
            return self._forward_tensor_unchecked(surfaces).numpy().copy()

    def _forward_tensor(self, surfaces: list[str]) -> torch.Tensor:
        return self._forward_tensor_unchecked(surfaces)

    def _forward_tensor_unchecked(self, surfaces: list[str]) -> torch.Tensor:
        features = torch.from_numpy(self._feature_matrix(surfaces)).to(self._weight.dtype)
        return features @ self._weight

    def parameters(self) -> Iterable[torch.nn.Parameter]:
        return [self._weight]

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {"weight": self._weight.detach().clone()}

    def load_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        weight = state["weight"]
        if tuple(weight.shape) != tuple(self._weight.shape):
            raise DataError(
                f"weight shape {tuple(weight.shape)} does not match encoder {tuple(self._weight.shape)}"
            )
        with torch.no_grad():
            self._weight.copy_(weight)
        self.mark_updated()

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "dim": self.dim,
            "seed": self.seed,
            "n_buckets": self.n_buckets,
            "dtype": str(self._weight.dtype).removeprefix("torch."),
        }


class ContextualEncoder(Encoder):
    """Pretrained transformer encoder with first-token or mean pooling.

    Surfaces longer than ``max_length`` subword tokens are truncated;
    each truncation is logged and appended to ``truncation_log`` rather
    than raised, since long mentions are expected in real corpora.
    Dropout stays disabled even on the gradient path so that
    ``encode_trainable`` agrees with ``encode`` at equal parameters.
    """

    kind = KIND_CONTEXTUAL

    def __init__(
        self,
        model_name: str | None = None,
        *,
        model=None,
        tokenizer=None,
        pooling: str = POOL_FIRST,
        max_length: int = DEFAULT_MAX_TOKENS,
        device: str = "cpu",
        frozen: bool = False,
    ):
        if pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {pooling!r}")
        if model is None or tokenizer is None:
            if model_name is None:
                raise ValueError("need either model_name or both model and tokenizer")
            try:
                from transformers import AutoModel, AutoTokenizer
            except ImportError as exc:
                raise ImportError(
                    "the contextual encoder needs the 'transformers' extra: "
                    "pip install edgenorm[contextual]"
                ) from exc
            model = AutoModel.from_pretrained(model_name)
            tokenizer = AutoTokenizer.from_pretrained(model_name)
        super().__init__(dim=int(model.config.hidden_size), pooling=pooling)
        self.model_name = model_name
        self.max_length = int(max_length)
        self.device = torch.device(device)
        self._model = model.to(self.device)
        self._model.eval()
        self._tokenizer = tokenizer
        self.truncation_log: list[str] = []
        if frozen:
            for param in self._model.parameters():
                param.requires_grad_(False)
            self.freeze()

    def _tokenize(self, surfaces: list[str]):
        full_lengths = [len(ids) for ids in self._tokenizer(surfaces)["input_ids"]]
        for surface, length in zip(surfaces, full_lengths):
            if length > self.max_length:
                LOGGER.warning(
                    "surface truncated to %d tokens: %r", self.max_length, surface
                )
                self.truncation_log.append(surface)
        batch = self._tokenizer(
            surfaces,
            padding=True,
            truncation=True,
            max_length=self.max_length,
            return_tensors="pt",
        )
        return {k: v.to(self.device) for k, v in batch.items()}

    def _pool(self, hidden: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if self.pooling == POOL_FIRST:
            return hidden[:, 0, :]
        weights = mask.unsqueeze(-1).to(hidden.dtype)
        return (hidden * weights).sum(dim=1) / weights.sum(dim=1).clamp(min=1.0)

    def _forward_numpy(self, surfaces: list[str]) -> np.ndarray:
        with torch.no_grad():
            pooled = self._forward_tensor_unchecked(surfaces)
        return pooled.cpu().numpy().copy()

    def _forward_tensor(self, surfaces: list[str]) -> torch.Tensor:
        return self._forward_tensor_unchecked(surfaces)

    def _forward_tensor_unchecked(self, surfaces: list[str]) -> torch.Tensor:
        batch = self._tokenize(surfaces)
        hidden = self._model(**batch).last_hidden_state
        return self._pool(hidden, batch["attention_mask"])

    def parameters(self) -> Iterable[torch.nn.Parameter]:
        return self._model.parameters()

    def state_dict(self) -> dict[str, torch.Tensor]:
        return self._model.state_dict()

    def load_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        self._model.load_state_dict(state)
        self.mark_updated()

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "dim": self.dim,
            "pooling": self.pooling,
            "max_length": self.max_length,
            "model_name": self.model_name,
        }

    def save_architecture(self, directory: str | Path) -> None:
        """Write config and tokenizer files so restore works offline."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self._model.config.save_pretrained(directory)
        self._tokenizer.save_pretrained(directory)

    @classmethod
    def from_architecture(
        cls,
        directory: str | Path,
        *,
        pooling: str = POOL_FIRST,
        max_length: int = DEFAULT_MAX_TOKENS,
        device: str = "cpu",
    ) -> "ContextualEncoder":
        from transformers import AutoConfig, AutoModel, AutoTokenizer

        config = AutoConfig.from_pretrained(directory)
        model = AutoModel.from_config(config)
        tokenizer = AutoTokenizer.from_pretrained(directory)
        return cls(
            model=model,
            tokenizer=tokenizer,
            pooling=pooling,
            max_length=max_length,
            device=device,
        )


def make_toy_encoder(
    dim: int,
    seed: int,
    *,
    n_buckets: int = DEFAULT_TOY_BUCKETS,
    dtype: torch.dtype = torch.float32,
) -> ToyEncoder:
    """Deterministic desk-scale encoder; same seed gives identical weights."""
    return ToyEncoder(dim, seed, n_buckets=n_buckets, dtype=dtype)


def encode(
    handle: Encoder,
    surfaces: Sequence[str],
    ids: Sequence[str] | None = None,
) -> EmbeddingMatrix:
    """Embed ``surfaces`` into an :class:`EmbeddingMatrix`.

    Row order matches input order.  ``ids`` default to the positional
    index rendered as text; pass dictionary indices when embedding a
    dictionary so rows stay addressable.
    """
    vectors = handle.encode_batch(surfaces)
    if ids is None:
        ids = [str(i) for i in range(len(vectors))]
    return EmbeddingMatrix(vectors, ids)


def encode_trainable(handle: Encoder, surfaces: Sequence[str]) -> torch.Tensor:
    """Like :func:`encode` but returns a tensor on the gradient path."""
    return handle.encode_tensor(surfaces)


def write_embedding_matrix(path: str | Path, vectors: np.ndarray) -> None:
    """Persist vectors as ``N D`` header plus little-endian float32 rows."""
    vectors = np.asarray(vectors)
    if vectors.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {vectors.shape}")
    with Path(path).open("wb") as handle:
        handle.write(f"{vectors.shape[0]} {vectors.shape[1]}\n".encode("ascii"))
        handle.write(vectors.astype("<f4").tobytes(order="C"))


def read_embedding_matrix(path: str | Path) -> np.ndarray:
    """Inverse of :func:`write_embedding_matrix`; verifies the byte count."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise IntegrityError(f"{path}: missing embedding header")
    try:
        n_text, d_text = raw[:newline].decode("ascii").split()
        n, d = int(n_text), int(d_text)
    except ValueError as exc:
        raise IntegrityError(f"{path}: bad embedding header {raw[:newline]!r}") from exc
    body = raw[newline + 1 :]
    expected = n * d * 4
    if len(body) != expected:
        raise IntegrityError(
            f"{path}: expected {expected} payload bytes for {n}x{d}, found {len(body)}"
        )
    return np.frombuffer(body, dtype="<f4").reshape(n, d).copy()
