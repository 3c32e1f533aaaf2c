"""Filter pruning by clustered, evolutionarily blended importance criteria."""

__version__ = "0.1.0"

from .blend import LayerGene, PrunePlan, blend_scores, make_mask, mask_fingerprint, prune_plan
from .clustering import CriteriaClustering, cluster_all, cluster_criteria, kmeans, search_space_size
from .criteria import (
    ALL_CRITERIA,
    CriterionId,
    CriterionUnavailableError,
    ScoreVector,
    normalize_minmax,
    score_all,
    score_criterion,
    weiszfeld,
)
from .estimator import BlendedPruningSearch
from .evolution import (
    EAConfig,
    Gene,
    SearchResult,
    crossover,
    drop,
    finalize,
    init_population,
    mutation,
    search,
    single_criterion_gene,
)
from .fitness import (
    EvaluatorError,
    EvalTimeout,
    ExternalEvaluator,
    FitnessRequest,
    FitnessResponse,
    OracleEvaluator,
    ProtocolViolation,
    RemoteError,
    SpawnError,
    external_evaluate,
    oracle_evaluate,
)
from .rankstats import CorrelationMatrix, average_ranks, correlation_matrices, correlation_matrix, spearman
from .snapshot import (
    ActivationStats,
    LayerRecord,
    NetworkSnapshot,
    PruneConfig,
    SnapshotError,
    SynthSpec,
    load_snapshot,
    save_snapshot,
    snapshot_digest,
    synth_generate,
    validate_snapshot,
)
from .toynet import ToyEvaluator, ToyModel, toy_build, toy_evaluate, toy_pretrain

__all__ = [
    "ALL_CRITERIA",
    "ActivationStats",
    "BlendedPruningSearch",
    "CorrelationMatrix",
    "CriteriaClustering",
    "CriterionId",
    "CriterionUnavailableError",
    "EAConfig",
    "EvalTimeout",
    "EvaluatorError",
    "ExternalEvaluator",
    "FitnessRequest",
    "FitnessResponse",
    "Gene",
    "LayerGene",
    "LayerRecord",
    "NetworkSnapshot",
    "OracleEvaluator",
    "ProtocolViolation",
    "PruneConfig",
    "PrunePlan",
    "RemoteError",
    "ScoreVector",
    "SearchResult",
    "SnapshotError",
    "SpawnError",
    "SynthSpec",
    "ToyEvaluator",
    "ToyModel",
    "average_ranks",
    "blend_scores",
    "cluster_all",
    "cluster_criteria",
    "correlation_matrices",
    "correlation_matrix",
    "crossover",
    "drop",
    "external_evaluate",
    "finalize",
    "init_population",
    "kmeans",
    "load_snapshot",
    "make_mask",
    "mask_fingerprint",
    "mutation",
    "normalize_minmax",
    "oracle_evaluate",
    "prune_plan",
    "save_snapshot",
    "score_all",
    "score_criterion",
    "search",
    "search_space_size",
    "single_criterion_gene",
    "snapshot_digest",
    "spearman",
    "synth_generate",
    "toy_build",
    "toy_evaluate",
    "toy_pretrain",
    "validate_snapshot",
    "weiszfeld",
]
