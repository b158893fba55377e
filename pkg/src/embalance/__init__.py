"""Embedding semantic balance, clustering, and distillation loss toolkit.

The package is organized around a small binary embedding format (EMB1) and
four processing layers:

* ``store``    : embedding file I/O, validation, L2 normalization
* ``balance``  : duplicate-set detection via chunked top-k neighbors and
                 union-find, with representative selection
* ``cluster``  : spherical k-means with k-means++ seeding (KMC1 model files)
* ``losses``   : cluster/instance distillation losses with analytic gradients
* ``pipeline`` : CLI orchestration with reproducible seeds and JSON reports
"""

__version__ = "0.1.0"

from .store import (
    EmbeddingSet,
    ValidationReport,
    EmbeddingFormatError,
    BadMagicError,
    VersionMismatchError,
    TruncatedPayloadError,
    ZeroRowError,
    DataValidationError,
    read_embeddings,
    write_embeddings,
    normalize,
    validate,
)
from .unionfind import UnionFind
from .balance import (
    ChunkTopK,
    NeighborTable,
    Partition,
    BalanceResult,
    chunk_topk,
    merge_topk,
    build_sets,
    select_representatives,
    balance,
    brute_force_balance,
)
from .cluster import (
    ClusterModel,
    kmeans_init,
    assign,
    update_centroids,
    kmeans,
    write_cluster_model,
    read_cluster_model,
)
from .losses import (
    DistillBatch,
    Prototypes,
    LossParams,
    LossReport,
    softmax_with_temperature,
    logit_loss,
    kl_distill_loss,
    cluster_loss,
    contrastive_loss,
    instance_loss,
    overall_loss,
    sample_negatives,
)
from .config import PipelineConfig, load_config, save_config, stage_seed
from .pipeline import PipelineError, run_pipeline, stats

__all__ = [
    "__version__",
    "EmbeddingSet",
    "ValidationReport",
    "EmbeddingFormatError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedPayloadError",
    "ZeroRowError",
    "DataValidationError",
    "read_embeddings",
    "write_embeddings",
    "normalize",
    "validate",
    "UnionFind",
    "ChunkTopK",
    "NeighborTable",
    "Partition",
    "BalanceResult",
    "chunk_topk",
    "merge_topk",
    "build_sets",
    "select_representatives",
    "balance",
    "brute_force_balance",
    "ClusterModel",
    "kmeans_init",
    "assign",
    "update_centroids",
    "kmeans",
    "write_cluster_model",
    "read_cluster_model",
    "DistillBatch",
    "Prototypes",
    "LossParams",
    "LossReport",
    "softmax_with_temperature",
    "logit_loss",
    "kl_distill_loss",
    "cluster_loss",
    "contrastive_loss",
    "instance_loss",
    "overall_loss",
    "sample_negatives",
    "PipelineConfig",
    "load_config",
    "save_config",
    "stage_seed",
    "PipelineError",
    "run_pipeline",
    "stats",
]
