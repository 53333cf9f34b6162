"""Named entity normalization via edge-weight distribution matching.

The pipeline links free-text entity mentions to dictionary concepts.
Two graphs are built over the same query and dictionary nodes: a
binary ground-truth graph from shared concept ids, and a top-K
similarity graph from encoder embeddings whose edge weights are
max-scaled inner products.  Training minimizes the KL divergence
between the softmaxed edge-weight vectors of the two graphs, pulling
the embedding space toward the annotated links.  Inference re-embeds a
query and returns its best-weighted dictionary candidates; a threshold
over pairwise similarity scores turns the same embeddings into an
entity matcher.
"""

__version__ = "0.1.0"

from .corpus import (
    ConceptDictionary,
    CorpusStats,
    EntityRecord,
    PairRecord,
    filter_unlinkable,
    generate_synthetic_corpus,
    load_concept_corpus,
    load_dictionary,
    load_pair_corpus,
    normalize_surface,
)
from .encoder import (
    ContextualEncoder,
    EmbeddingMatrix,
    Encoder,
    ToyEncoder,
    encode,
    encode_trainable,
    make_toy_encoder,
)
from .errors import (
    CalibrationError,
    DataError,
    EdgenormError,
    EncoderModeError,
    IntegrityError,
    TrainingDivergedError,
)
from .evaluation import (
    ConfusionCounts,
    EvalReport,
    PairMetrics,
    edit_distance,
    error_report,
    pair_metrics,
    snapshot_recommendations,
    top1_accuracy,
)
from .graph import (
    CandidateSet,
    GroundTruthGraph,
    SimilarityGraph,
    SimilarityRow,
    build_ground_truth,
    build_similarity_graph,
    similarity_row,
    top_k,
)
from .inference import (
    Normalization,
    PairDecision,
    batch_normalize,
    calibrate_threshold,
    classify_pair,
    normalize,
)
from .trainer import (
    EdgeDistributionPair,
    TrainConfig,
    TrainState,
    assemble_edge_distributions,
    checkpoint,
    kl_edge_loss,
    restore,
    train,
)

__all__ = [
    "__version__",
    "CalibrationError",
    "CandidateSet",
    "ConceptDictionary",
    "ConfusionCounts",
    "ContextualEncoder",
    "CorpusStats",
    "DataError",
    "EdgeDistributionPair",
    "EdgenormError",
    "EmbeddingMatrix",
    "Encoder",
    "EncoderModeError",
    "EntityRecord",
    "EvalReport",
    "GroundTruthGraph",
    "IntegrityError",
    "Normalization",
    "PairDecision",
    "PairMetrics",
    "PairRecord",
    "SimilarityGraph",
    "SimilarityRow",
    "ToyEncoder",
    "TrainConfig",
    "TrainState",
    "TrainingDivergedError",
    "assemble_edge_distributions",
    "batch_normalize",
    "build_ground_truth",
    "build_similarity_graph",
    "calibrate_threshold",
    "checkpoint",
    "classify_pair",
    "edit_distance",
    "encode",
    "encode_trainable",
    "error_report",
    "filter_unlinkable",
    "generate_synthetic_corpus",
    "kl_edge_loss",
    "load_concept_corpus",
    "load_dictionary",
    "load_pair_corpus",
    "make_toy_encoder",
    "normalize",
    "normalize_surface",
    "pair_metrics",
    "restore",
    "similarity_row",
    "snapshot_recommendations",
    "top1_accuracy",
    "top_k",
    "train",
]
