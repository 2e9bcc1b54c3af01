"""Hidden-neuron permutation alignment of a member expert to its centroid."""

from __future__ import annotations

import logging

import numpy as np

from .calibration import LayerStats, normalize_rows
from .model import ExpertWeights, MoELayer
from .numeric import ShapeError

logger = logging.getLogger(__name__)

ALIGN_MODES = ("act", "wt", "combined", "none")


def _pairwise_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``out[p, q] = ||a[p] - b[q]||``, computed row by row (no Gram trick)."""
    out = np.empty((a.shape[0], b.shape[0]))
    for p in range(a.shape[0]):
        out[p] = np.linalg.norm(b - a[p], axis=1)
    return out


def cost_act(profile_c: np.ndarray, profile_j: np.ndarray) -> np.ndarray:
    """Distances between normalized per-neuron activation profiles.

    Both profiles are ``d_ff x T`` over the same tokens.
    """
    profile_c = np.asarray(profile_c, dtype=np.float64)
    profile_j = np.asarray(profile_j, dtype=np.float64)
    if profile_c.shape != profile_j.shape:
        raise ShapeError(f"profiles differ in shape: {profile_c.shape} vs {profile_j.shape}")
    return _pairwise_distance(profile_c, profile_j)


def weight_signature(e: ExpertWeights) -> np.ndarray:
    """Per-neuron rows: gate_proj row, up row and down column concatenated."""
    return np.concatenate(
        [e.w_gate_proj.astype(np.float64), e.w_up.astype(np.float64), e.w_down.T.astype(np.float64)],
        axis=1,
    )


def cost_wt(e_c: ExpertWeights, e_j: ExpertWeights) -> np.ndarray:
    if (e_c.d_ff, e_c.d_model) != (e_j.d_ff, e_j.d_model):
        raise ShapeError("experts differ in shape")
    return _pairwise_distance(weight_signature(e_c), weight_signature(e_j))


def shared_profiles(stats: LayerStats, c: int, j: int) -> tuple[np.ndarray, np.ndarray] | None:
    """Normalized activation profiles of experts c and j on their shared
    captured tokens, or ``None`` when they share none."""
    _, rc, rj = np.intersect1d(stats.captured[c], stats.captured[j], assume_unique=True, return_indices=True)
    if rc.size == 0:
        return None
    return normalize_rows(stats.hidden_acts[c][:, rc]), normalize_rows(stats.hidden_acts[j][:, rj])


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-cost assignment on a square matrix.

    Returns ``perm`` with ``perm[q]`` the row matched to column q, and the
    total ``sum_q cost[perm[q], q]``. Shortest augmenting paths with
    potentials, O(n^3); ties resolve to the lowest column index.
    """
    a = np.asarray(cost, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"cost matrix must be square, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("cost matrix has non-finite entries")
    n = a.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.intp), 0.0
    # 1-based arrays; index 0 is the virtual column holding the row being added
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.intp)  # p[j] = row on column j
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = p[1:] - 1
    total = float(sum(a[perm[q], q] for q in range(n)))
    return perm, total


def member_permutation(
    layer: MoELayer, centroid: int, member: int, stats: LayerStats | None, mode: str
) -> np.ndarray:
    """Permutation ``perm`` such that member neuron ``perm[q]`` goes to slot q."""
    if mode not in ALIGN_MODES:
        raise ValueError(f"unknown alignment mode {mode!r}")
    d_ff = layer.d_ff
    if mode == "none":
        return np.arange(d_ff)
    e_c, e_j = layer.experts[centroid], layer.experts[member]
    cost = None
    if mode in ("act", "combined"):
        if stats is None:
            raise ValueError(f"alignment mode {mode!r} needs calibration stats")
        profiles = shared_profiles(stats, centroid, member)
        if profiles is None:
            logger.warning(
                "experts %d and %d share no calibration tokens; aligning on weights only",
                centroid,
                member,
            )
        else:
            cost = cost_act(*profiles)
    if mode in ("wt", "combined") or cost is None:
        wt = cost_wt(e_c, e_j)
        cost = wt if cost is None else cost + wt
    # rows of cost are centroid neurons; hungarian wants rows = member neurons
    perm, _ = hungarian(cost.T)
    return perm


def align_member(
    layer: MoELayer, centroid: int, member: int, stats: LayerStats | None, mode: str
) -> tuple[ExpertWeights, np.ndarray]:
    """Member expert with its hidden neurons reordered to match the centroid."""
    perm = member_permutation(layer, centroid, member, stats, mode)
    return layer.experts[member].permute_hidden(perm), perm
