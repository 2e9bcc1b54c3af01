"""Expert saliency: routing frequency and router-weighted activation (REAP)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import LayerStats


@dataclass(frozen=True, eq=False)
class SaliencyVector:
    scores: np.ndarray
    kind: str  # "freq" or "reap"

    def __len__(self) -> int:
        return self.scores.size


def saliency_freq(stats: LayerStats) -> SaliencyVector:
    """Fraction of calibration tokens that route to each expert."""
    if stats.num_tokens < 1:
        raise ValueError("empty calibration stats")
    return SaliencyVector(stats.active_counts / stats.num_tokens, "freq")


def saliency_reap(stats: LayerStats) -> SaliencyVector:
    """Mean of ``pi(x)_i * ||E_i(x)||`` over the tokens routed to expert i.

    Experts that never fire score 0.
    """
    if stats.num_tokens < 1:
        raise ValueError("empty calibration stats")
    scores = np.zeros(stats.num_experts)
    for i in range(stats.num_experts):
        tokens = stats.active_tokens(i)
        if tokens.size == 0:
            continue
        norms = np.linalg.norm(stats.active_outputs(i), axis=1)
        scores[i] = np.sum(stats.masked_probs[tokens, i] * norms) / tokens.size
    return SaliencyVector(scores, "reap")


def compute_saliency(stats: LayerStats, kind: str) -> SaliencyVector:
    if kind == "freq":
        return saliency_freq(stats)
    if kind == "reap":
        return saliency_reap(stats)
    raise ValueError(f"unknown saliency kind {kind!r}")
