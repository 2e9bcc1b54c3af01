"""Executing compression plans on layers and whole models."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import ALIGN_MODES, align_member
from .calibration import CalibrationSet, LayerStats, collect_layer_stats
from .grouping import (
    GroupingPlan,
    assign_nearest,
    cluster_avg_linkage,
    prune_select,
    pseudo_prune,
)
from .model import ExpertWeights, ModelSpec, MoELayer, _atomic_write, layer_pass, model_forward_batch
from .saliency import SaliencyVector, compute_saliency
from .similarity import SimilarityMatrix, sim_expert_outputs, sim_ream

METHOD_ALIASES = {
    "ream": "ream_pseudo_prune",
    "freq": "prune_freq",
    "reap": "prune_reap",
    "hcsmoe": "cluster_avg_linkage",
    "mcsmoe": "assign_nearest",
}

WORKERS_ENV = "REAM_WORKERS"


def default_capacity(num_experts: int) -> int:
    return 16 if num_experts <= 128 else 32


@dataclass(frozen=True)
class CompressionConfig:
    """Knobs for one compression run.

    ``capacity=None`` resolves to :func:`default_capacity`. The
    ``use_gate_sim`` / ``use_gated_outputs`` switches only affect the
    similarity used by pseudo-pruning and nearest-centroid assignment.
    """

    n_keep: int
    method: str = "ream_pseudo_prune"
    capacity: int | None = None
    saliency: str = "reap"
    merge_weights: str = "reap"
    alignment_mode: str = "combined"
    sequential: bool = True
    renormalize_topk: bool = False
    use_gate_sim: bool = True
    use_gated_outputs: bool = True
    dense_capture: bool = False

    def __post_init__(self):
        method = METHOD_ALIASES.get(self.method, self.method)
        object.__setattr__(self, "method", method)
        if method not in METHOD_ALIASES.values():
            raise ValueError(f"unknown method {self.method!r}")
        if self.saliency not in ("freq", "reap"):
            raise ValueError(f"unknown saliency {self.saliency!r}")
        if self.merge_weights not in ("freq", "reap", "uniform"):
            raise ValueError(f"unknown merge weights {self.merge_weights!r}")
        if self.alignment_mode not in ALIGN_MODES:
            raise ValueError(f"unknown alignment mode {self.alignment_mode!r}")
        if self.n_keep < 1:
            raise ValueError("n_keep must be positive")

    def capacity_for(self, num_experts: int) -> int:
        return self.capacity if self.capacity is not None else default_capacity(num_experts)


def baseline_config(name: str, n_keep: int, **overrides) -> CompressionConfig:
    """Preset configs: ``freq``, ``reap``, ``hcsmoe`` and ``ream``.

    Pruning baselines and HC-SMoE collect statistics once from the original
    model; HC-SMoE merges frequency-weighted with activation alignment.
    """
    presets = {
        "freq": dict(method="prune_freq", saliency="freq", sequential=False, alignment_mode="none"),
        "reap": dict(method="prune_reap", saliency="reap", sequential=False, alignment_mode="none"),
        "hcsmoe": dict(
            method="cluster_avg_linkage",
            saliency="freq",
            merge_weights="freq",
            alignment_mode="act",
            sequential=False,
        ),
        "ream": dict(method="ream_pseudo_prune"),
    }
    if name not in presets:
        raise ValueError(f"unknown baseline {name!r}")
    return CompressionConfig(n_keep=n_keep, **{**presets[name], **overrides})


ABLATIONS = {
    "saliency=freq": dict(saliency="freq"),
    "no-gated-outputs": dict(use_gated_outputs=False),
    "no-pseudo-prune": dict(method="assign_nearest"),
    "no-gate-sim": dict(use_gate_sim=False),
    "no-sequential": dict(sequential=False),
    "align=act": dict(alignment_mode="act"),
}


@dataclass
class CompressedLayer:
    layer: MoELayer
    plan: GroupingPlan
    permutations: dict[int, np.ndarray] = field(default_factory=dict)
    saliency: SaliencyVector | None = None


def reduce_gate(w_gate: np.ndarray, centroids) -> np.ndarray:
    """Router rows of the kept experts, in centroid order."""
    centroids = list(centroids)
    n = np.asarray(w_gate).shape[0]
    if len(set(centroids)) != len(centroids):
        raise ValueError("duplicate centroid index")
    if any(not (0 <= c < n) for c in centroids):
        raise ValueError(f"centroid index out of range for {n} experts")
    return np.asarray(w_gate)[centroids]


def merge_weights_for(stats: LayerStats, kind: str) -> np.ndarray:
    if kind == "uniform":
        return np.ones(stats.num_experts)
    return compute_saliency(stats, kind).scores


def merge_group(
    centroid: int,
    members,
    layer: MoELayer,
    stats: LayerStats | None,
    cfg: CompressionConfig,
    weights: np.ndarray | None = None,
) -> tuple[ExpertWeights, dict[int, np.ndarray]]:
    """Saliency-weighted average of a centroid and its aligned members.

    Returns the merged expert and the permutation applied to each member.
    Falls back to a plain mean when the group's weights sum below 1e-12.
    """
    if centroid is None:
        raise ValueError("empty group")
    members = sorted(members)
    if not members:
        return layer.experts[centroid], {}
    if weights is None:
        if cfg.merge_weights != "uniform" and stats is None:
            raise ValueError("saliency merge weights need calibration stats")
        weights = merge_weights_for(stats, cfg.merge_weights) if stats is not None else np.ones(layer.num_experts)
    aligned = [layer.experts[centroid]]
    perms = {}
    for j in members:
        e, perm = align_member(layer, centroid, j, stats, cfg.alignment_mode)
        aligned.append(e)
        perms[j] = perm
    s = np.array([weights[i] for i in [centroid] + members], dtype=np.float64)
    if s.sum() < 1e-12:
        s = np.ones_like(s)
    total = s.sum()

    def avg(name):
        acc = np.zeros(getattr(aligned[0], name).shape)
        for w, e in zip(s, aligned):
            acc += w * getattr(e, name).astype(np.float64)
        return acc / total

    return ExpertWeights(avg("w_gate_proj"), avg("w_up"), avg("w_down")), perms


def plan_layer(stats: LayerStats, cfg: CompressionConfig) -> tuple[GroupingPlan, SaliencyVector]:
    n = stats.num_experts
    saliency = compute_saliency(stats, cfg.saliency)
    method = cfg.method
    if method in ("prune_freq", "prune_reap"):
        sal = compute_saliency(stats, method.split("_")[1])
        return prune_select(sal, cfg.n_keep), sal
    if method == "cluster_avg_linkage":
        return cluster_avg_linkage(sim_expert_outputs(stats), cfg.n_keep), saliency
    sim = sim_ream(stats, use_gate=cfg.use_gate_sim, use_gated_outputs=cfg.use_gated_outputs)
    if method == "assign_nearest":
        return assign_nearest(saliency, sim, cfg.n_keep), saliency
    return pseudo_prune(saliency, sim, cfg.n_keep, cfg.capacity_for(n)), saliency


def apply_plan(
    layer: MoELayer, plan: GroupingPlan, stats: LayerStats | None, cfg: CompressionConfig
) -> CompressedLayer:
    plan.validate(layer.num_experts)
    weights = None
    if plan.assignments and cfg.merge_weights != "uniform":
        weights = merge_weights_for(stats, cfg.merge_weights)
    experts, perms = [], {}
    for c, members in plan.groups():
        merged, p = merge_group(c, members, layer, stats, cfg, weights)
        experts.append(merged)
        perms.update(p)
    new_layer = MoELayer(reduce_gate(layer.w_gate, plan.centroids), tuple(experts), layer.top_k)
    return CompressedLayer(new_layer, plan, perms)


def compress_layer(layer: MoELayer, stats: LayerStats, cfg: CompressionConfig) -> CompressedLayer:
    """Plan and apply one layer's compression. ``n_keep >= N`` is the identity."""
    n = layer.num_experts
    if cfg.n_keep >= n:
        plan = GroupingPlan(tuple(range(n)), {}, None, "identity")
        return CompressedLayer(layer, plan, {})
    if layer.top_k > cfg.n_keep:
        raise ValueError(f"cannot keep {cfg.n_keep} experts with top_k={layer.top_k}")
    plan, saliency = plan_layer(stats, cfg)
    out = apply_plan(layer, plan, stats, cfg)
    out.saliency = saliency
    return out


@dataclass
class CompressionReport:
    """Provenance of a whole-model compression."""

    config: CompressionConfig
    layers: list[CompressedLayer]
    stats: list[LayerStats] = field(default_factory=list, repr=False)

    def manifest(self) -> str:
        lines = ["# ream provenance manifest", f"# config {self.config}"]
        for li, cl in enumerate(self.layers):
            lines.append(f"layer {li}")
            lines.extend("  " + row for row in cl.plan.dump().splitlines())
            for j in sorted(cl.permutations):
                perm = cl.permutations[j]
                lines.append(f"  perm {j} {','.join(map(str, perm.tolist()))}")
        return "\n".join(lines) + "\n"

    def write_manifest(self, path) -> None:
        _atomic_write(Path(path), self.manifest().encode())


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def compress_model(
    model: ModelSpec, calib: CalibrationSet | np.ndarray, cfg: CompressionConfig
) -> tuple[ModelSpec, CompressionReport]:
    """Compress every layer to ``cfg.n_keep`` experts.

    Sequential mode rebuilds layer l's statistics by running the calibration
    stream through the already-compressed layers 0..l-1; otherwise all
    statistics come from one pass through the original model.
    """
    tokens = calib.tokens if isinstance(calib, CalibrationSet) else np.asarray(calib, dtype=np.float64)
    renorm = cfg.renormalize_topk
    layers = list(model.layers)
    compressed: list[CompressedLayer] = []
    stats_log: list[LayerStats] = []
    if cfg.sequential:
        x = tokens
        for li, layer in enumerate(layers):
            stats = collect_layer_stats(layer, x, renormalize=renorm, dense=cfg.dense_capture)
            cl = compress_layer(layer, stats, cfg)
            compressed.append(cl)
            stats_log.append(stats)
            if li + 1 < len(layers):
                # second pass through the freshly compressed layer
                x = x + layer_pass(cl.layer, x, renormalize=renorm).output
    else:
        _, inputs = model_forward_batch(model, tokens, renormalize=renorm)
        stats_log = [
            collect_layer_stats(layer, x, renormalize=renorm, dense=cfg.dense_capture)
            for layer, x in zip(layers, inputs)
        ]
        workers = _workers()
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                compressed = list(pool.map(lambda ls: compress_layer(ls[0], ls[1], cfg), zip(layers, stats_log)))
        else:
            compressed = [compress_layer(layer, st, cfg) for layer, st in zip(layers, stats_log)]
    out = ModelSpec(model.d_model, model.d_ff, model.num_layers, tuple(cl.layer for cl in compressed), model.seed)
    return out, CompressionReport(cfg, compressed, stats_log)

