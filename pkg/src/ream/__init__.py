"""Desk-scale MoE expert compression: saliency, pseudo-pruning, aligned merging."""

from .alignment import align_member, cost_act, cost_wt, hungarian, member_permutation
from .calibration import (
    DOMAINS,
    CalibrationSet,
    LayerStats,
    MixtureConfig,
    MixtureParseError,
    MixtureRatio,
    build_mixture,
    collect_layer_stats,
    domain_generators,
    domain_tokens,
    parse_ratio,
    read_mixture_config,
    plant_domain_experts,
    sweep_mixtures,
    write_mixture_config,
)
from .evaluation import (
    CorrelationTable,
    FidelityReport,
    ScorePoint,
    ScoreRow,
    correlation_table,
    fidelity,
    fidelity_score,
    hypervolume,
    numerical_rank,
    pareto_frontier,
    pre_logit_rank,
    read_score_table,
    write_score_table,
)
from .grouping import (
    GroupingPlan,
    InfeasibleCapacityError,
    assign_nearest,
    cluster_avg_linkage,
    parse_plan,
    prune_select,
    pseudo_prune,
)
from .merging import (
    ABLATIONS,
    CompressionConfig,
    CompressionReport,
    apply_plan,
    baseline_config,
    compress_layer,
    compress_model,
    merge_group,
    reduce_gate,
)
from .model import (
    ExpertWeights,
    ModelSpec,
    MoELayer,
    RedundancyPlan,
    layer_pass,
    load_model,
    model_forward,
    model_forward_batch,
    moe_forward,
    save_model,
    synth_model,
)
from .numeric import ShapeError, UndefinedCorrelationError
from .saliency import SaliencyVector, compute_saliency, saliency_freq, saliency_reap
from .similarity import SimilarityMatrix, sim_expert_outputs, sim_gate_logits, sim_gated_outputs, sim_ream

__version__ = "0.1.0"
