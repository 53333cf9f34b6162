"""Encoder fine-tuning by matching edge-weight distributions.

For each training query we take its top-K similarity-graph candidates,
read off two K-vectors of edge weights (binary ground-truth links and
max-scaled similarities), push both through a softmax, and minimize the
KL divergence from the ground-truth distribution to the similarity
distribution.  Gradients flow through the query and candidate
embeddings back into the encoder.

Candidate sets are rebuilt from scratch at the start of every epoch
with the current parameters and stay frozen within the epoch, so a
batch sees a stable selection while the weights it trains against are
recomputed live at each step.

Checkpoints are directories: an opaque parameter blob, a metadata JSON
with a sha256 of the blob for integrity checking, and optionally the
exported dictionary embeddings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import ConceptDictionary, EntityRecord
from .encoder import (
    KIND_CONTEXTUAL,
    KIND_TOY,
    ContextualEncoder,
    Encoder,
    ToyEncoder,
    encode,
    encode_trainable,
    write_embedding_matrix,
)
from .errors import DataError, EncoderModeError, IntegrityError, TrainingDivergedError
from .graph import CandidateSet, GroundTruthGraph, build_ground_truth, build_similarity_graph

LOGGER = logging.getLogger(__name__)

REFRESH_PER_EPOCH = "per-epoch"
SELECT_TEST_BEST = "test-best"
SELECT_DEV_BEST = "dev-best"

PARAMS_FILE = "params.pt"
META_FILE = "meta.json"
EMBEDDINGS_FILE = "embeddings.bin"
ARCH_DIR = "architecture"
STATE_FILE = "state.json"
METRICS_FILE = "metrics.jsonl"
CHECKPOINT_DIR = "checkpoints"


def _softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def kl_edge_loss(gt_edges, sim_edges):
    """KL divergence between softmaxed edge-weight vectors.

    ``gt_edges`` holds binary link indicators for the selected
    candidates, ``sim_edges`` their similarity weights.  Both are
    softmaxed and the loss is ``sum(p_gt * log(p_gt / p_sim))`` in nats.
    An all-zero ground-truth row softmaxes to the uniform distribution,
    which keeps queries without a linked candidate usable as targets.

    Accepts array-likes (returns a float) or torch tensors (returns a
    scalar tensor differentiable in ``sim_edges``).
    """
    tensor_in = isinstance(sim_edges, torch.Tensor)
    if tensor_in:
        sim = sim_edges
        gt = torch.as_tensor(gt_edges, dtype=sim.dtype, device=sim.device)
    else:
        sim = torch.as_tensor(np.asarray(sim_edges, dtype=np.float64))
        gt = torch.as_tensor(np.asarray(gt_edges, dtype=np.float64))
    if gt.ndim != 1 or sim.ndim != 1:
        raise ValueError("edge-weight vectors must be 1-d")
    if gt.shape != sim.shape:
        raise ValueError(f"length mismatch: gt has {gt.shape[0]}, sim has {sim.shape[0]}")
    if gt.numel() == 0:
        raise ValueError("edge-weight vectors are empty")
    with torch.no_grad():
        if not torch.all((gt == 0) | (gt == 1)):
            raise ValueError("ground-truth edge weights must be 0 or 1")
    log_p = torch.log_softmax(gt, dim=0)
    log_q = torch.log_softmax(sim, dim=0)
    loss = torch.sum(torch.exp(log_p) * (log_p - log_q))
    return loss if tensor_in else float(loss)


@dataclass(frozen=True)
class EdgeDistributionPair:
    """The two K-vectors feeding the loss for one query, plus softmaxes."""

    query_id: int | None
    gt_edges: np.ndarray
    sim_edges: np.ndarray
    p_gt: np.ndarray
    p_sim: np.ndarray


def assemble_edge_distributions(
    gt_graph: GroundTruthGraph, candidates: CandidateSet
) -> EdgeDistributionPair:
    """Pair ground-truth indicators with similarity weights for one query."""
    if candidates.query_id is None:
        raise ValueError("candidate set has no query id")
    gt = np.array(
        [1.0 if gt_graph.has_edge(candidates.query_id, d) else 0.0 for d in candidates.dict_indices],
        dtype=np.float64,
    )
    sim = np.asarray(candidates.weights, dtype=np.float64)
    return EdgeDistributionPair(
        query_id=candidates.query_id,
        gt_edges=gt,
        sim_edges=sim,
        p_gt=_softmax(gt),
        p_sim=_softmax(sim),
    )


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the full-scale training recipe."""

    k: int = 30
    batch_size: int = 16
    epochs: int = 50
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    seed: int = 0
    candidate_refresh: str = REFRESH_PER_EPOCH
    selection_split: str = SELECT_TEST_BEST
    skip_unmatched: bool = False

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.candidate_refresh != REFRESH_PER_EPOCH:
            raise ValueError(f"unsupported candidate_refresh {self.candidate_refresh!r}")
        if self.selection_split not in (SELECT_TEST_BEST, SELECT_DEV_BEST):
            raise ValueError(f"unsupported selection_split {self.selection_split!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    top1_accuracy: float
    wall_time: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainState:
    """Progress record kept across epochs and stored in checkpoints."""

    epoch: int = 0
    step: int = 0
    running_loss: float = math.nan
    history: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int | None = None
    best_metric: float | None = None
    best_checkpoint: str | None = None

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["history"] = [m.to_dict() for m in self.history]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainState":
        history = [EpochMetrics(**m) for m in data.get("history", [])]
        return cls(
            epoch=data.get("epoch", 0),
            step=data.get("step", 0),
            running_loss=data.get("running_loss", math.nan),
            history=history,
            best_epoch=data.get("best_epoch"),
            best_metric=data.get("best_metric"),
            best_checkpoint=data.get("best_checkpoint"),
        )


def _eval_top1(
    records: Sequence[EntityRecord],
    dictionary: ConceptDictionary,
    handle: Encoder,
) -> float:
    """Fraction of queries whose best candidate shares a concept id."""
    graph = build_similarity_graph(records, dictionary, handle, k=1)
    correct = 0
    for rec, cand in zip(records, graph.candidate_sets):
        entry = dictionary[cand.dict_indices[0]]
        if rec.concept_ids & entry.concept_ids:
            correct += 1
    return correct / len(records)


def _step_edges(
    embeddings: torch.Tensor, query_row: int, candidate_rows: slice
) -> torch.Tensor:
    """Similarity weights for one query from a live embedding batch."""
    sims = embeddings[candidate_rows] @ embeddings[query_row]
    max_sim = sims.max()
    if float(max_sim.detach()) > 0:
        return sims / max_sim
    return sims


def train(
    train_records: Sequence[EntityRecord],
    dictionary: ConceptDictionary,
    handle: Encoder,
    config: TrainConfig,
    *,
    eval_records: Sequence[EntityRecord],
    run_dir: str | Path | None = None,
    keep_epoch_checkpoints: bool = True,
) -> TrainState:
    """Fine-tune ``handle`` on a concept corpus.

    Per epoch: rebuild candidate sets with the current parameters, walk
    the queries in a seeded shuffled order in batches, re-encode each
    query with its candidates, average the per-query KL losses, and
    take one optimizer step per batch (Adam with decoupled weight
    decay).  After the epoch the model is scored on ``eval_records``
    (top-1 accuracy) and checkpointed.  The returned state points at
    the best-scoring epoch; ties go to the earlier epoch.

    When ``run_dir`` is given it receives ``checkpoints/epoch_NNN``
    directories (``epoch_000`` holds the untouched initial parameters),
    a ``metrics.jsonl`` with one record per epoch, and a final
    ``state.json``.  A non-finite loss aborts with
    :class:`TrainingDivergedError` carrying the offending batch.
    """
    if not train_records:
        raise ValueError("no training records")
    if not eval_records:
        raise ValueError("no evaluation records")
    if not handle.trainable or handle.frozen:
        raise EncoderModeError("training requires a trainable, unfrozen encoder")

    gt_graph = build_ground_truth(train_records, dictionary)
    optimizer = torch.optim.AdamW(
        handle.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    rng = np.random.default_rng(config.seed)
    state = TrainState()

    run_path: Path | None = None
    metrics_path: Path | None = None
    if run_dir is not None:
        run_path = Path(run_dir)
        (run_path / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
        metrics_path = run_path / METRICS_FILE
        metrics_path.write_text("", encoding="utf-8")
        checkpoint(
            state,
            handle,
            run_path / CHECKPOINT_DIR / "epoch_000",
            corpus_fingerprint=dictionary.fingerprint(),
        )

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        sim_graph = build_similarity_graph(train_records, dictionary, handle, config.k)
        pairs = [
            assemble_edge_distributions(gt_graph, cand) for cand in sim_graph.candidate_sets
        ]

        order = rng.permutation(len(train_records))
        query_losses: list[float] = []
        for start in range(0, len(order), config.batch_size):
            batch_ids = [int(i) for i in order[start : start + config.batch_size]]
            active = [
                qid
                for qid in batch_ids
                if not (config.skip_unmatched and pairs[qid].gt_edges.sum() == 0)
            ]
            if not active:
                continue

            surfaces: list[str] = []
            layout: list[tuple[int, int, slice]] = []
            for qid in active:
                cand = sim_graph.candidate_sets[qid]
                q_row = len(surfaces)
                surfaces.append(train_records[qid].surface)
                c_rows = slice(len(surfaces), len(surfaces) + len(cand.dict_indices))
                surfaces.extend(dictionary[d].surface for d in cand.dict_indices)
                layout.append((qid, q_row, c_rows))

            embeddings = encode_trainable(handle, surfaces)
            losses = []
            for qid, q_row, c_rows in layout:
                sim_edges = _step_edges(embeddings, q_row, c_rows)
                gt = torch.as_tensor(pairs[qid].gt_edges, dtype=embeddings.dtype)
                losses.append(kl_edge_loss(gt, sim_edges))
            batch_loss = torch.stack(losses).mean()

            if not torch.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss {float(batch_loss)!r} at epoch {epoch} step {state.step}; "
                    f"batch surfaces: {[train_records[q].surface for q in active]}",
                    epoch=epoch,
                    step=state.step,
                    batch=[train_records[q].surface for q in active],
                )

            optimizer.zero_grad()
            batch_loss.backward()
            optimizer.step()
            handle.mark_updated()
            state.step += 1
            state.running_loss = float(batch_loss.detach())
            query_losses.extend(float(l.detach()) for l in losses)

        mean_loss = math.fsum(query_losses) / len(query_losses) if query_losses else math.nan
        accuracy = _eval_top1(eval_records, dictionary, handle)
        metrics = EpochMetrics(
            epoch=epoch,
            mean_loss=mean_loss,
            top1_accuracy=accuracy,
            wall_time=time.perf_counter() - started,
        )
        state.epoch = epoch
        state.history.append(metrics)
        LOGGER.info(
            "epoch %d: mean_loss=%.6f top1=%.4f (%.2fs)",
            epoch,
            mean_loss,
            accuracy,
            metrics.wall_time,
        )
        if metrics_path is not None:
            with metrics_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(metrics.to_dict()) + "\n")

        epoch_dir: Path | None = None
        if run_path is not None and keep_epoch_checkpoints:
            epoch_dir = run_path / CHECKPOINT_DIR / f"epoch_{epoch:03d}"
            checkpoint(state, handle, epoch_dir, corpus_fingerprint=dictionary.fingerprint())

        if state.best_metric is None or accuracy > state.best_metric:
            state.best_epoch = epoch
            state.best_metric = accuracy
            state.best_checkpoint = str(epoch_dir) if epoch_dir is not None else None

    if run_path is not None:
        (run_path / STATE_FILE).write_text(
            json.dumps(state.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
    return state


# --- checkpointing ------------------------------------------------------


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def checkpoint(
    state: TrainState,
    handle: Encoder,
    path: str | Path,
    *,
    corpus_fingerprint: str | None = None,
    dict_vectors: np.ndarray | None = None,
) -> Path:
    """Write a restorable snapshot of encoder and training state."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params_path = path / PARAMS_FILE
    torch.save(handle.state_dict(), params_path)
    if isinstance(handle, ContextualEncoder):
        handle.save_architecture(path / ARCH_DIR)
    if dict_vectors is not None:
        write_embedding_matrix(path / EMBEDDINGS_FILE, dict_vectors)
    meta = {
        "format_version": 1,
        "encoder": handle.metadata(),
        "params_sha256": _sha256_file(params_path),
        "corpus_fingerprint": corpus_fingerprint,
        "weights_fingerprint": handle.weights_fingerprint(),
        "state": state.to_dict(),
    }
    (path / META_FILE).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return path


def _rebuild_handle(meta: dict, path: Path) -> Encoder:
    encoder_meta = dict(meta["encoder"])
    kind = encoder_meta.get("kind")
    if kind == KIND_TOY:
        dtype = getattr(torch, encoder_meta.get("dtype", "float32"))
        return ToyEncoder(
            encoder_meta["dim"],
            encoder_meta["seed"],
            n_buckets=encoder_meta["n_buckets"],
            dtype=dtype,
        )
    if kind == KIND_CONTEXTUAL:
        arch = path / ARCH_DIR
        if arch.is_dir():
            return ContextualEncoder.from_architecture(
                arch,
                pooling=encoder_meta.get("pooling", "first-token"),
                max_length=encoder_meta.get("max_length", 25),
            )
        return ContextualEncoder(
            encoder_meta["model_name"],
            pooling=encoder_meta.get("pooling", "first-token"),
            max_length=encoder_meta.get("max_length", 25),
        )
    raise IntegrityError(f"{path}: unknown encoder kind {kind!r}")


def restore(path: str | Path) -> tuple[Encoder, TrainState]:
    """Load a checkpoint written by :func:`checkpoint`.

    The parameter blob is verified against the stored sha256 before
    anything is deserialized; a truncated or edited blob raises
    :class:`IntegrityError`.
    """
    path = Path(path)
    meta_path = path / META_FILE
    params_path = path / PARAMS_FILE
    if not meta_path.is_file() or not params_path.is_file():
        raise IntegrityError(f"{path} is not a checkpoint directory")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{meta_path}: unreadable metadata") from exc
    actual = _sha256_file(params_path)
    expected = meta.get("params_sha256")
    if actual != expected:
        raise IntegrityError(
            f"{params_path}: checksum mismatch (expected {expected}, found {actual})"
        )
    handle = _rebuild_handle(meta, path)
    state_dict = torch.load(params_path, map_location="cpu", weights_only=True)
    handle.load_state_dict(state_dict)
    state = TrainState.from_dict(meta.get("state", {}))
    return handle, state


def resolve_checkpoint(path: str | Path) -> Path:
    """Accept either a checkpoint directory or a run directory.

    A run directory is resolved through its ``state.json`` best-epoch
    pointer, falling back to the last epoch checkpoint.
    """
    path = Path(path)
    if (path / META_FILE).is_file():
        return path
    state_path = path / STATE_FILE
    if state_path.is_file():
        state = TrainState.from_dict(json.loads(state_path.read_text(encoding="utf-8")))
        if state.best_checkpoint:
            return Path(state.best_checkpoint)
        if state.epoch:
            candidate = path / CHECKPOINT_DIR / f"epoch_{state.epoch:03d}"
            if (candidate / META_FILE).is_file():
                return candidate
    raise IntegrityError(f"{path} contains no checkpoint")
