"""Adversarial robustness auditing for beta-VAEs across demographic subgroups.

Pipeline: load or synthesize an attributed image dataset, train beta-VAEs,
optimize per-sample maximum-damage perturbations under an L-inf budget,
measure reconstruction-space adversarial deviation, disaggregate by
intersectional subgroup, and probe reconstructions with downstream
classifiers and latent-neighborhood forensics.
"""

from ._util import derive_seed
from .attack import (
    BUDGET_TOLERANCE,
    AttackArtifact,
    AttackConfig,
    AttackError,
    latent_discrepancy,
    load_artifact,
    max_damage_attack,
    output_space_attack,
    project_linf,
    run_attack,
    save_artifact,
    verify_budget,
)
from .dataio import (
    AttributeSchema,
    DataError,
    Dataset,
    DatasetManifest,
    EvaluationSet,
    ImageSample,
    SubgroupKey,
    SubgroupTable,
    build_subgroups,
    generate_synthetic_dataset,
    imbalanced_benchmark_spec,
    load_dataset,
    normalize_image,
    parse_attribute_file,
    sample_evaluation_set,
    save_dataset,
)
from .latentlab import (
    EmbeddingMatrix,
    LatentLabError,
    NeighborEntry,
    Projection2D,
    PullRecord,
    embed_dataset,
    knn_composition,
    knn_global,
    nearest_centroid_subgroup,
    project_2d,
    pull_effect,
)
from .probes import (
    Prediction,
    ProbeConfig,
    ProbeError,
    ProbeModel,
    ProbeReport,
    accuracy_table,
    subgroup_switch_rate,
    train_probe,
)
from .robustness import (
    DisparityMetrics,
    RobustnessError,
    RobustnessRecord,
    SubgroupStats,
    adversarial_deviation,
    aggregate,
    disparity_metrics,
    evaluate_subgroups,
    marginal_aggregate,
    scatter_data,
)
from .vae import (
    DEFAULT_BETAS,
    DEFAULT_LEARNING_RATE,
    Checkpoint,
    ElboTerms,
    EpochLoss,
    LatentCode,
    ModelConfig,
    TrainingDiverged,
    VaeError,
    VaeModel,
    default_config,
    kl_divergence,
    reparameterize,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AttackArtifact",
    "AttackConfig",
    "AttackError",
    "AttributeSchema",
    "BUDGET_TOLERANCE",
    "Checkpoint",
    "DEFAULT_BETAS",
    "DEFAULT_LEARNING_RATE",
    "DataError",
    "Dataset",
    "DatasetManifest",
    "DisparityMetrics",
    "ElboTerms",
    "EmbeddingMatrix",
    "EpochLoss",
    "EvaluationSet",
    "ImageSample",
    "LatentCode",
    "LatentLabError",
    "ModelConfig",
    "NeighborEntry",
    "Prediction",
    "ProbeConfig",
    "ProbeError",
    "ProbeModel",
    "ProbeReport",
    "Projection2D",
    "PullRecord",
    "RobustnessError",
    "RobustnessRecord",
    "SubgroupKey",
    "SubgroupStats",
    "SubgroupTable",
    "TrainingDiverged",
    "VaeError",
    "VaeModel",
    "accuracy_table",
    "adversarial_deviation",
    "aggregate",
    "build_subgroups",
    "default_config",
    "derive_seed",
    "disparity_metrics",
    "embed_dataset",
    "evaluate_subgroups",
    "generate_synthetic_dataset",
    "imbalanced_benchmark_spec",
    "kl_divergence",
    "knn_composition",
    "knn_global",
    "latent_discrepancy",
    "load_artifact",
    "load_dataset",
    "marginal_aggregate",
    "max_damage_attack",
    "nearest_centroid_subgroup",
    "normalize_image",
    "output_space_attack",
    "parse_attribute_file",
    "project_2d",
    "project_linf",
    "pull_effect",
    "reparameterize",
    "run_attack",
    "sample_evaluation_set",
    "save_artifact",
    "save_dataset",
    "scatter_data",
    "subgroup_switch_rate",
    "train",
    "train_probe",
    "verify_budget",
]
