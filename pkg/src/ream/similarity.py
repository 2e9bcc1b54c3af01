"""Pairwise expert similarity matrices.

Output-based similarities average a per-token cosine over the tokens on which
both experts were captured: co-routed tokens under sparse capture, every
token under dense capture. Pairs without shared tokens score 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibration import LayerStats
from .numeric import NORM_EPS, matmul, rowwise_cosine

KINDS = ("output", "gate", "gated_output", "ream")


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    values: np.ndarray
    kind: str

    @property
    def n(self) -> int:
        return self.values.shape[0]


def sim_gate_logits(stats: LayerStats) -> SimilarityMatrix:
    """Cosine between experts' raw gate-logit series over all tokens."""
    g = stats.gate_logits
    if g.shape[0] < 2:
        raise ValueError("gate-logit similarity needs at least two tokens")
    norms = np.linalg.norm(g, axis=0)
    ok = norms >= NORM_EPS
    unit = np.zeros_like(g)
    unit[:, ok] = g[:, ok] / norms[ok]
    vals = np.clip(matmul(unit.T, unit), -1.0, 1.0)
    vals = 0.5 * (vals + vals.T)
    idx = np.flatnonzero(ok)
    vals[idx, idx] = 1.0
    return SimilarityMatrix(vals, "gate")


def _pairwise_mean_cosine(stats: LayerStats, outputs: list[np.ndarray]) -> np.ndarray:
    n = stats.num_experts
    vals = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            _, ri, rj = np.intersect1d(
                stats.captured[i], stats.captured[j], assume_unique=True, return_indices=True
            )
            if ri.size == 0:
                continue
            vals[i, j] = vals[j, i] = rowwise_cosine(outputs[i][ri], outputs[j][rj]).mean()
    return vals


def sim_expert_outputs(stats: LayerStats) -> SimilarityMatrix:
    """Mean per-token cosine of raw expert outputs."""
    return SimilarityMatrix(_pairwise_mean_cosine(stats, stats.expert_outputs), "output")


def sim_gated_outputs(stats: LayerStats) -> SimilarityMatrix:
    """Mean per-token cosine of softmax-scaled expert outputs."""
    return SimilarityMatrix(_pairwise_mean_cosine(stats, stats.gated_outputs), "gated_output")


def sim_ream(
    stats: LayerStats, use_gate: bool = True, use_gated_outputs: bool = True
) -> SimilarityMatrix:
    """Gate-logit similarity plus gated-output similarity.

    The two switches drop the gate term or swap the gated outputs for raw
    outputs; both exist for ablations.
    """
    out = sim_gated_outputs(stats) if use_gated_outputs else sim_expert_outputs(stats)
    vals = out.values.copy()
    if use_gate:
        vals = sim_gate_logits(stats).values + vals
    return SimilarityMatrix(vals, "ream")


def dump_matrix(sim: SimilarityMatrix, path) -> None:
    """Whitespace-separated text grid, one row per line."""
    lines = [f"# kind={sim.kind} n={sim.n}"]
    lines += [" ".join(f"{v:+.6f}" for v in row) for row in sim.values]
    Path(path).write_text("\n".join(lines) + "\n")
